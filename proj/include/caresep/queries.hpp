#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "caresep/checkpoint.hpp"
#include "caresep/model.hpp"
#include "caresep/rng.hpp"

namespace caresep {

// The three ablation toggles. grad: query gradients flow into the query
// encoder; init: the query encoder starts from a pretrained classifier;
// shared_encoder: the separator's encoder doubles as the query encoder.
struct AblationConfig {
  bool grad = true;
  bool init = true;
  bool shared_encoder = true;

  // Rows A..G; A and G share toggles (A stands in for the external baseline).
  static AblationConfig row(char id) {
    switch (id) {
      case 'A': return {false, true, false};
      case 'B': return {true, true, false};
      case 'C': return {true, true, true};
      case 'D': return {false, true, true};
      case 'E': return {true, false, true};
      case 'F': return {false, false, true};
      case 'G': return {false, true, false};
      default: throw std::invalid_argument("unknown ablation row");
    }
  }
};

inline void to_json(Json& j, const AblationConfig& a) {
  j = Json{{"grad", a.grad}, {"init", a.init}, {"shared_encoder", a.shared_encoder}};
}
inline void from_json(const Json& j, AblationConfig& a) {
  j.at("grad").get_to(a.grad);
  j.at("init").get_to(a.init);
  j.at("shared_encoder").get_to(a.shared_encoder);
}

struct AnchorPolicy {
  enum class Mode { kSelf, kSameClassOther, kClassMean };
  Mode mode = Mode::kSameClassOther;
  int pool_size = 3;  // class-mean only
};

namespace queries {

// Fields of the encoder-relevant config that a pretrained checkpoint must
// agree on to be loadable.
inline Json encoder_signature(const ModelConfig& c) {
  return Json{{"latent_dim", c.latent_dim},
              {"patch_size", c.patch_size},
              {"window_tokens", c.window_tokens},
              {"enc_depths", c.enc_depths},
              {"connector_depth", c.connector_depth},
              {"heads", c.heads},
              {"n_classes", c.n_classes},
              {"stft_window", c.stft_window},
              {"stft_hop", c.stft_hop},
              {"n_bands", c.n_bands},
              {"sample_rate", c.sample_rate},
              {"token_sem_kernel", c.token_sem_kernel}};
}

template <typename T>
void load_encoder_from_classifier(nn::EncoderStack<T>& stack, const ckpt::Loaded<T>& ck,
                                  const ModelConfig& cfg) {
  if (!ck.meta.contains("encoder_prefix") || !ck.meta.contains("model"))
    throw std::runtime_error("checkpoint/config mismatch: not an encoder checkpoint");
  ModelConfig ck_cfg = ck.meta.at("model").template get<ModelConfig>();
  if (encoder_signature(ck_cfg) != encoder_signature(cfg))
    throw std::runtime_error("checkpoint/config mismatch: encoder signature differs");
  std::vector<nn::Parameter<T>*> params;
  stack.collect(params);
  ckpt::assign_stripped<T>(params, stack.prefix, ck.arrays,
                           ck.meta.at("encoder_prefix").template get<std::string>());
}

// Structurally identical encoder+connector with independent parameters,
// optionally loaded from a pretrained classifier checkpoint (the Init toggle
// for non-shared rows).
template <typename T>
nn::EncoderStack<T> build_external_query_net(const ModelConfig& cfg,
                                             int64_t channel_features, uint64_t seed,
                                             const ckpt::Loaded<T>* init_from = nullptr) {
  Rng rng(Rng::derive(seed, /*stream=*/0x71757279));
  nn::EncoderStack<T> net(cfg, channel_features, "qnet", rng);
  if (init_from) load_encoder_from_classifier(net, *init_from, cfg);
  return net;
}

}  // namespace queries

// Separator plus (for non-shared rows) the independent query network. The
// query path reads the separator's own encoder when shared_encoder is on;
// parameter storage identity is the contract, not a copy.
template <typename T>
struct SeparationSystem {
  AblationConfig ablation;
  nn::SeparatorModel<T> separator;
  std::optional<nn::EncoderStack<T>> query_net;

  SeparationSystem(const ModelConfig& cfg, const AblationConfig& ab, uint64_t seed)
      : ablation(ab), separator(cfg, seed) {
    if (!ab.shared_encoder)
      query_net = queries::build_external_query_net<T>(cfg, separator.channel_features,
                                                       seed);
  }

  nn::EncoderStack<T>& query_encoder() {
    return ablation.shared_encoder ? separator.encoder : *query_net;
  }

  std::vector<nn::Parameter<T>*> parameters() {
    auto out = separator.parameters();
    if (query_net) {
      std::vector<nn::Parameter<T>*> q;
      query_net->collect(q);
      out.insert(out.end(), q.begin(), q.end());
    }
    return out;
  }

  // Empty when the encoder is shared; the whole external net otherwise.
  std::vector<nn::Parameter<T>*> query_exclusive_parameters() {
    std::vector<nn::Parameter<T>*> out;
    if (query_net) query_net->collect(out);
    return out;
  }

  // Parameters the optimizer may update: the separator always; the external
  // query net only when its gradients are enabled.
  std::vector<nn::Parameter<T>*> trainable_parameters() {
    auto out = separator.parameters();
    if (query_net && ablation.grad) {
      std::vector<nn::Parameter<T>*> q;
      query_net->collect(q);
      out.insert(out.end(), q.begin(), q.end());
    }
    return out;
  }

  // Init toggle: load the pretrained classifier into the query encoder (the
  // shared encoder when sharing, the external net otherwise).
  void apply_pretrained(const ckpt::Loaded<T>& ck) {
    queries::load_encoder_from_classifier(query_encoder(), ck, separator.cfg);
  }
};

namespace queries {

// Anchor resolution: one clip for self / same-class-other, pool_size clips
// for class-mean (resolved by averaging their embeddings).
struct AnchorChoice {
  AnchorPolicy::Mode mode;
  std::vector<const AudioClip*> clips;
};

inline bool share_label(const AudioClip& a, const AudioClip& b) {
  if (!a.labels || !b.labels) return false;
  const auto& la = *a.labels;
  const auto& lb = *b.labels;
  for (size_t i = 0; i < la.size() && i < lb.size(); ++i)
    if (la[i] && lb[i]) return true;
  return false;
}

inline AnchorChoice select_anchor(const AudioClip& target,
                                  const std::vector<const AudioClip*>& pool,
                                  const AnchorPolicy& policy, uint64_t seed) {
  AnchorChoice out;
  out.mode = policy.mode;
  if (policy.mode == AnchorPolicy::Mode::kSelf) {
    out.clips = {&target};
    return out;
  }
  std::vector<const AudioClip*> same;
  for (const auto* c : pool)
    if (c->clip_id != target.clip_id && share_label(*c, target)) same.push_back(c);
  Rng rng(seed);
  if (policy.mode == AnchorPolicy::Mode::kSameClassOther) {
    if (same.empty()) throw std::invalid_argument("anchor policy unsatisfiable");
    out.clips = {same[static_cast<size_t>(rng.below(same.size()))]};
    return out;
  }
  // class-mean: pool_size distinct same-class clips (the target may appear).
  std::vector<const AudioClip*> candidates = same;
  candidates.push_back(&target);
  if (static_cast<int>(candidates.size()) < policy.pool_size)
    throw std::invalid_argument("anchor policy unsatisfiable");
  rng.shuffle(candidates);
  out.clips.assign(candidates.begin(), candidates.begin() + policy.pool_size);
  return out;
}

// Pooled connector output on the anchor; pure function of (anchor, params).
template <typename T>
QueryEmbedding compute_query(const AudioClip& anchor, SeparationSystem<T>& sys) {
  if (anchor.silent()) throw std::invalid_argument("silent anchor");
  nn::Tape<T> t(false);
  auto fe = nn::make_frontend(anchor, sys.separator.cfg);
  int pooled = nn::build_query_graph(t, sys.query_encoder(), fe);
  QueryEmbedding q;
  q.source = sys.ablation.shared_encoder ? QueryEmbedding::Source::kAnchorDerived
                                         : QueryEmbedding::Source::kExternal;
  const auto& v = t.val(pooled);
  q.values.resize(static_cast<size_t>(v.cols()));
  for (int64_t c = 0; c < v.cols(); ++c)
    q.values[static_cast<size_t>(c)] = static_cast<double>(v(0, c));
  return q;
}

template <typename T>
QueryEmbedding resolve_query(const AnchorChoice& choice, SeparationSystem<T>& sys) {
  if (choice.clips.empty()) throw std::invalid_argument("empty anchor choice");
  QueryEmbedding acc = compute_query(*choice.clips[0], sys);
  for (size_t i = 1; i < choice.clips.size(); ++i) {
    QueryEmbedding qi = compute_query(*choice.clips[i], sys);
    for (size_t d = 0; d < acc.values.size(); ++d) acc.values[d] += qi.values[d];
  }
  for (auto& v : acc.values) v /= static_cast<double>(choice.clips.size());
  return acc;
}

}  // namespace queries
}  // namespace caresep
