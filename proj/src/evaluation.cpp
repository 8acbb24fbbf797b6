#include "caresep/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "caresep/dsp.hpp"

namespace caresep::eval {

namespace {

constexpr double kSdrClampDb = 100.0;

double clamp_db(double v) { return std::min(kSdrClampDb, std::max(-kSdrClampDb, v)); }

SdrStats stats_of(const std::vector<double>& xs) {
  SdrStats s;
  s.n = static_cast<int>(xs.size());
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / s.n;
  double var = 0.0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / s.n);
  return s;
}

int first_class(const std::vector<uint8_t>& labels) {
  for (size_t c = 0; c < labels.size(); ++c)
    if (labels[c]) return static_cast<int>(c);
  return -1;
}

}  // namespace

double sdr_db(const AudioClip& est, const AudioClip& ref) {
  if (est.samples.size() != ref.samples.size())
    throw std::invalid_argument("sdr: length mismatch");
  const double ref_e = ref.energy();
  if (ref_e <= 0.0) throw std::invalid_argument("sdr: zero reference");
  double err_e = 0.0;
  for (size_t i = 0; i < ref.samples.size(); ++i) {
    const double d = ref.samples[i] - est.samples[i];
    err_e += d * d;
  }
  if (err_e == 0.0) return kSdrClampDb;
  return clamp_db(10.0 * std::log10(ref_e / err_e));
}

double silence_sdr_db(const AudioClip& input, const AudioClip& output) {
  const double in_e = input.energy();
  if (in_e <= 0.0) throw std::invalid_argument("silence_sdr: silent input");
  const double eps = 1e-12 * in_e;
  return clamp_db(10.0 * std::log10(in_e / (output.energy() + eps)));
}

double mean_average_precision(const std::vector<std::vector<double>>& scores,
                              const std::vector<std::vector<uint8_t>>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("mAP: shape mismatch");
  const size_t n_clips = scores.size();
  const size_t n_classes = scores[0].size();
  double ap_sum = 0.0;
  int evaluated = 0;
  for (size_t c = 0; c < n_classes; ++c) {
    int positives = 0;
    for (size_t i = 0; i < n_clips; ++i) positives += labels[i][c] ? 1 : 0;
    if (positives == 0) continue;  // skipped per contract
    std::vector<size_t> order(n_clips);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return scores[a][c] > scores[b][c];
    });
    double ap = 0.0;
    int hits = 0;
    for (size_t rank = 0; rank < n_clips; ++rank) {
      if (!labels[order[rank]][c]) continue;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    ap_sum += ap / positives;
    ++evaluated;
  }
  if (evaluated == 0) throw std::invalid_argument("mAP: no class has positives");
  return ap_sum / evaluated;
}

QueryEmbedding query_for_target(SeparatorLike& model, const AudioClip& target,
                                const std::vector<const AudioClip*>& pool,
                                const AnchorPolicy& policy, uint64_t seed) {
  auto choice = queries::select_anchor(target, pool, policy, seed);
  QueryEmbedding acc = model.query_for(*choice.clips[0]);
  for (size_t i = 1; i < choice.clips.size(); ++i) {
    QueryEmbedding qi = model.query_for(*choice.clips[i]);
    for (size_t d = 0; d < acc.values.size(); ++d) acc.values[d] += qi.values[d];
  }
  for (auto& v : acc.values) v /= static_cast<double>(choice.clips.size());
  return acc;
}

SdrStats eval_mixture_sdr(SeparatorLike& model, const data::Dataset& ds,
                          const std::vector<data::MixPair>& pairs,
                          const AnchorPolicy& policy, uint64_t seed) {
  auto pool = ds.eval_pool();
  std::vector<double> values;
  size_t pi = 0;
  for (const auto& pair : pairs) {
    const AudioClip* a = ds.find(pair.clip_a);
    const AudioClip* b = ds.find(pair.clip_b);
    if (!a || !b) throw std::invalid_argument("eval pair references unknown clip");
    auto mix = dsp::mix_with_energy_norm(*a, *b, pair.mix_seed);
    const QueryEmbedding qa =
        query_for_target(model, *a, pool, policy, Rng::derive(seed, 2 * pi));
    const QueryEmbedding qb =
        query_for_target(model, *b, pool, policy, Rng::derive(seed, 2 * pi + 1));
    values.push_back(sdr_db(model.separate(mix.mixture, qa), mix.scaled_a1));
    values.push_back(sdr_db(model.separate(mix.mixture, qb), mix.scaled_a2));
    ++pi;
  }
  return stats_of(values);
}

SdrStats eval_clean_sdr(SeparatorLike& model, const data::Dataset& ds,
                        const AnchorPolicy& policy, uint64_t seed) {
  auto pool = ds.eval_pool();
  std::vector<double> values;
  size_t i = 0;
  for (size_t idx : ds.eval_idx) {
    const AudioClip& clip = ds.clips[idx];
    const QueryEmbedding q = query_for_target(model, clip, pool, policy,
                                              Rng::derive(seed, 0x636c + i));
    values.push_back(sdr_db(model.separate(clip, q), clip));
    ++i;
  }
  return stats_of(values);
}

SdrStats eval_silence_sdr(SeparatorLike& model, const data::Dataset& ds,
                          const std::vector<data::MixPair>& pairs,
                          const AnchorPolicy& policy, uint64_t seed) {
  auto pool = ds.eval_pool();
  std::vector<double> values;
  size_t pi = 0;
  for (const auto& pair : pairs) {
    const AudioClip* a = ds.find(pair.clip_a);
    const AudioClip* b = ds.find(pair.clip_b);
    if (!a || !b) throw std::invalid_argument("eval pair references unknown clip");
    const QueryEmbedding qa =
        query_for_target(model, *a, pool, policy, Rng::derive(seed, 2 * pi));
    const QueryEmbedding qb =
        query_for_target(model, *b, pool, policy, Rng::derive(seed, 2 * pi + 1));
    // Query j against the clip that does not contain class j.
    values.push_back(silence_sdr_db(*b, model.separate(*b, qa)));
    values.push_back(silence_sdr_db(*a, model.separate(*a, qb)));
    ++pi;
  }
  return stats_of(values);
}

SDRReport full_sdr_report(SeparatorLike& model, const data::Dataset& ds,
                          const std::vector<data::MixPair>& pairs,
                          const AnchorPolicy& policy, uint64_t seed) {
  SDRReport r;
  r.mixture = eval_mixture_sdr(model, ds, pairs, policy, seed);
  r.clean = eval_clean_sdr(model, ds, policy, seed);
  r.silence = eval_silence_sdr(model, ds, pairs, policy, seed);
  r.n_pairs = static_cast<int>(pairs.size());
  switch (policy.mode) {
    case AnchorPolicy::Mode::kSelf: r.anchor_mode = "self"; break;
    case AnchorPolicy::Mode::kSameClassOther: r.anchor_mode = "same-class-other"; break;
    case AnchorPolicy::Mode::kClassMean: r.anchor_mode = "class-mean"; break;
  }
  r.seed = seed;
  return r;
}

EmbeddingSet collect_embeddings(const data::Dataset& ds, const std::vector<size_t>& idx,
                                const std::function<std::vector<double>(const AudioClip&)>& embed,
                                const std::string& kind) {
  EmbeddingSet set;
  set.kind = kind;
  for (size_t i : idx) {
    set.vectors.push_back(embed(ds.clips[i]));
    set.labels.push_back(*ds.clips[i].labels);
    set.clip_ids.push_back(ds.clips[i].clip_id);
  }
  return set;
}

void write_embedding_dump(const EmbeddingSet& set, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write embedding dump " + path);
  f << "#caresep-embeddings v1 kind=" << set.kind << "\n";
  char buf[32];
  for (size_t i = 0; i < set.vectors.size(); ++i) {
    f << set.clip_ids[i] << "\t";
    bool first = true;
    for (size_t c = 0; c < set.labels[i].size(); ++c)
      if (set.labels[i][c]) {
        f << (first ? "" : ";") << c;
        first = false;
      }
    for (double v : set.vectors[i]) {
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      f << "\t" << buf;
    }
    f << "\n";
  }
}

KlResult class_kl_divergence(const EmbeddingSet& set, int class_a, int class_b) {
  auto gather = [&](int cls) {
    std::vector<const std::vector<double>*> out;
    for (size_t i = 0; i < set.vectors.size(); ++i)
      if (first_class(set.labels[i]) == cls) out.push_back(&set.vectors[i]);
    return out;
  };
  auto fit = [](const std::vector<const std::vector<double>*>& xs) {
    const size_t n = xs.size();
    const size_t d = xs[0]->size();
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (const auto* x : xs)
      for (size_t k = 0; k < d; ++k) mean[k] += (*x)[k];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (const auto* x : xs)
      for (size_t k = 0; k < d; ++k) var[k] += ((*x)[k] - mean[k]) * ((*x)[k] - mean[k]);
    for (auto& v : var) v = std::max(v / static_cast<double>(n), 1e-6);
    return std::pair(mean, var);
  };
  auto kl = [](const std::pair<std::vector<double>, std::vector<double>>& p,
               const std::pair<std::vector<double>, std::vector<double>>& q) {
    double acc = 0.0;
    for (size_t k = 0; k < p.first.size(); ++k) {
      const double dm = q.first[k] - p.first[k];
      acc += p.second[k] / q.second[k] + dm * dm / q.second[k] - 1.0 +
             std::log(q.second[k] / p.second[k]);
    }
    return 0.5 * acc;
  };

  auto xa = gather(class_a);
  auto xb = gather(class_b);
  if (xa.size() < 5 || xb.size() < 5)
    throw std::invalid_argument("class_kl_divergence: need >= 5 samples per class");
  auto ga = fit(xa);
  auto gb = fit(xb);
  KlResult r;
  r.ab = kl(ga, gb);
  r.ba = kl(gb, ga);
  r.symmetric = 0.5 * (r.ab + r.ba);
  return r;
}

}  // namespace caresep::eval
