#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "caresep/datagen.hpp"
#include "caresep/queries.hpp"

namespace caresep::eval {

// 10*log10(|ref|^2 / |ref-est|^2), clamped to +-100 dB for reporting.
double sdr_db(const AudioClip& est, const AudioClip& ref);

// Suppression ratio for the silence protocol: 10*log10(|in|^2/(|out|^2+eps))
// with eps = 1e-12*|in|^2, clamped to +100 dB. Standard SDR is undefined
// against a zero reference.
double silence_sdr_db(const AudioClip& input, const AudioClip& output);

// Macro-averaged AP over classes with at least one positive; ties broken by
// stable clip order.
double mean_average_precision(const std::vector<std::vector<double>>& scores,
                              const std::vector<std::vector<uint8_t>>& labels);

struct SdrStats {
  double mean = 0.0;
  double stddev = 0.0;
  int n = 0;
};

struct SDRReport {
  SdrStats mixture;
  SdrStats clean;
  SdrStats silence;
  int n_pairs = 0;
  std::string anchor_mode;
  uint64_t seed = 0;
};

// Anything that can answer the two protocol calls: separate an input given a
// query, and produce a query embedding from an anchor clip.
class SeparatorLike {
 public:
  virtual ~SeparatorLike() = default;
  virtual AudioClip separate(const AudioClip& input, const QueryEmbedding& query) = 0;
  virtual QueryEmbedding query_for(const AudioClip& anchor) = 0;
};

// Resolve the query for a target clip under the anchor policy over a pool.
QueryEmbedding query_for_target(SeparatorLike& model, const AudioClip& target,
                                const std::vector<const AudioClip*>& pool,
                                const AnchorPolicy& policy, uint64_t seed);

// S(c1+c2, e_j) -> c_j over both directions of every pair.
SdrStats eval_mixture_sdr(SeparatorLike& model, const data::Dataset& ds,
                          const std::vector<data::MixPair>& pairs,
                          const AnchorPolicy& policy, uint64_t seed);

// S(c_j, e_j) -> c_j over the eval split.
SdrStats eval_clean_sdr(SeparatorLike& model, const data::Dataset& ds,
                        const AnchorPolicy& policy, uint64_t seed);

// S(c_not_j, e_j) -> 0 over both directions of every pair.
SdrStats eval_silence_sdr(SeparatorLike& model, const data::Dataset& ds,
                          const std::vector<data::MixPair>& pairs,
                          const AnchorPolicy& policy, uint64_t seed);

SDRReport full_sdr_report(SeparatorLike& model, const data::Dataset& ds,
                          const std::vector<data::MixPair>& pairs,
                          const AnchorPolicy& policy, uint64_t seed);

// Per-clip embeddings with class labels.
struct EmbeddingSet {
  std::vector<std::vector<double>> vectors;
  std::vector<std::vector<uint8_t>> labels;
  std::vector<std::string> clip_ids;
  std::string kind;  // "query" | "separation-feature"
};

EmbeddingSet collect_embeddings(const data::Dataset& ds, const std::vector<size_t>& idx,
                                const std::function<std::vector<double>(const AudioClip&)>& embed,
                                const std::string& kind);

// Flat columnar text dump: clip_id, labels, embedding values.
void write_embedding_dump(const EmbeddingSet& set, const std::string& path);

struct KlResult {
  double ab = 0.0;
  double ba = 0.0;
  double symmetric = 0.0;
};

// Diagonal-Gaussian KL between two class-conditional embedding clouds
// (variance floor 1e-6); needs >= 5 samples per class.
KlResult class_kl_divergence(const EmbeddingSet& set, int class_a, int class_b);

// Adapter exposing a trained system through the protocol interface, with a
// per-clip query cache.
template <typename T>
class SystemSeparator : public SeparatorLike {
 public:
  explicit SystemSeparator(SeparationSystem<T>& sys) : sys_(sys) {}

  AudioClip separate(const AudioClip& input, const QueryEmbedding& query) override {
    return sys_.separator.separate(input, query);
  }

  QueryEmbedding query_for(const AudioClip& anchor) override {
    auto it = cache_.find(anchor.clip_id);
    if (!anchor.clip_id.empty() && it != cache_.end()) return it->second;
    QueryEmbedding q = queries::compute_query(anchor, sys_);
    if (!anchor.clip_id.empty()) cache_.emplace(anchor.clip_id, q);
    return q;
  }

  // Token-averaged connector output of the separation pass driven by the
  // clip's own query.
  std::vector<double> separation_feature(const AudioClip& clip) {
    QueryEmbedding q = query_for(clip);
    typename nn::SeparatorModel<T>::Outputs outs;
    sys_.separator.separate(clip, q, &outs);
    return outs.connector_pooled;
  }

 private:
  SeparationSystem<T>& sys_;
  std::map<std::string, QueryEmbedding> cache_;
};

// The identity baseline: returns its input unchanged.
class IdentitySeparator : public SeparatorLike {
 public:
  explicit IdentitySeparator(int embed_dim) : embed_dim_(embed_dim) {}
  AudioClip separate(const AudioClip& input, const QueryEmbedding&) override {
    return input;
  }
  QueryEmbedding query_for(const AudioClip&) override {
    QueryEmbedding q;
    q.values.assign(static_cast<size_t>(embed_dim_), 0.0);
    return q;
  }

 private:
  int embed_dim_;
};

}  // namespace caresep::eval
