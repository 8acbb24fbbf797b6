#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "caresep/datagen.hpp"
#include "caresep/evaluation.hpp"
#include "caresep/queries.hpp"

namespace caresep::train {

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  int batch_size = 8;
  double base_lr = 1e-3;
  double lambda_mae = 1.0;
  double lambda_sdr = 0.05;
  double lambda_bce = 0.5;
  double sdr_clamp_db = 30.0;
  int max_epochs = 30;
  uint64_t seed = 42;
  bool joint_tagging = false;

  void validate() const {
    if (lambda_mae < 0 || lambda_sdr < 0 || lambda_bce < 0)
      throw std::invalid_argument("loss weights must be >= 0");
    if (sdr_clamp_db <= 0) throw std::invalid_argument("sdr_clamp must be > 0");
    if (batch_size < 1 || max_epochs < 0 || base_lr <= 0)
      throw std::invalid_argument("bad optimizer config");
  }
};

inline void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"beta1", c.beta1},           {"beta2", c.beta2},
           {"eps", c.eps},               {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size}, {"base_lr", c.base_lr},
           {"lambda_mae", c.lambda_mae}, {"lambda_sdr", c.lambda_sdr},
           {"lambda_bce", c.lambda_bce}, {"sdr_clamp_db", c.sdr_clamp_db},
           {"max_epochs", c.max_epochs}, {"seed", c.seed},
           {"joint_tagging", c.joint_tagging}};
}
inline void from_json(const Json& j, TrainConfig& c) {
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("batch_size").get_to(c.batch_size);
  j.at("base_lr").get_to(c.base_lr);
  j.at("lambda_mae").get_to(c.lambda_mae);
  j.at("lambda_sdr").get_to(c.lambda_sdr);
  j.at("lambda_bce").get_to(c.lambda_bce);
  j.at("sdr_clamp_db").get_to(c.sdr_clamp_db);
  j.at("max_epochs").get_to(c.max_epochs);
  j.at("seed").get_to(c.seed);
  j.at("joint_tagging").get_to(c.joint_tagging);
}

// Rate multiplier on the base LR: warm-up 0.05/0.1/0.2 over the first three
// epochs, then halved every ten epochs with a 0.05 floor.
inline double lr_multiplier(int epoch) {
  if (epoch <= 0) return 0.05;
  if (epoch == 1) return 0.1;
  if (epoch == 2) return 0.2;
  const double m = 0.2 * std::pow(0.5, (epoch - 3) / 10);
  return std::max(m, 0.05);
}

inline double lr_schedule(int epoch, double /*step_in_epoch*/, const TrainConfig& cfg) {
  return cfg.base_lr * lr_multiplier(epoch);
}

// Plain scalar losses (reference forms mirrored by the graph builders).
inline double separation_loss(const AudioClip& est, const AudioClip& ref,
                              const TrainConfig& cfg) {
  if (est.samples.size() != ref.samples.size())
    throw std::invalid_argument("separation_loss: length mismatch");
  if (ref.energy() <= 0.0) throw std::invalid_argument("separation_loss: silent reference");
  double mae = 0.0, err_e = 0.0;
  for (size_t i = 0; i < ref.samples.size(); ++i) {
    const double d = est.samples[i] - ref.samples[i];
    mae += std::abs(d);
    err_e += d * d;
  }
  mae /= static_cast<double>(ref.samples.size());
  const double sdr = err_e == 0.0 ? std::numeric_limits<double>::infinity()
                                  : 10.0 * std::log10(ref.energy() / err_e);
  const double clamped = std::min(cfg.sdr_clamp_db, std::max(-cfg.sdr_clamp_db, sdr));
  return cfg.lambda_mae * mae - cfg.lambda_sdr * clamped;
}

inline double tagging_loss(const std::vector<double>& logits,
                           const std::vector<uint8_t>& labels) {
  if (logits.size() != labels.size())
    throw std::invalid_argument("tagging_loss: length mismatch");
  for (uint8_t l : labels)
    if (l > 1) throw std::invalid_argument("tagging_loss: labels must be 0/1");
  double loss = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    loss += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return loss / static_cast<double>(logits.size());
}

// Two triplets sharing one mixture: (a, a1, e1) and (a, a2, e2).
struct TrainingTriplet {
  const AudioClip* mixture = nullptr;
  const AudioClip* target = nullptr;
  const AudioClip* anchor = nullptr;  // clean source clip (self-anchoring)
  std::vector<uint8_t> union_labels;
};

struct TripletPair {
  dsp::MixResult mix;
  const AudioClip* src1 = nullptr;
  const AudioClip* src2 = nullptr;
  std::vector<uint8_t> union_labels;

  TrainingTriplet first() const {
    return {&mix.mixture, &mix.scaled_a1, src1, union_labels};
  }
  TrainingTriplet second() const {
    return {&mix.mixture, &mix.scaled_a2, src2, union_labels};
  }
};

inline TripletPair make_triplets(const AudioClip& a1, const AudioClip& a2, uint64_t seed) {
  TripletPair tp;
  tp.mix = dsp::mix_with_energy_norm(a1, a2, seed);
  tp.src1 = &a1;
  tp.src2 = &a2;
  if (a1.labels && a2.labels) {
    tp.union_labels.resize(a1.labels->size());
    for (size_t i = 0; i < tp.union_labels.size(); ++i)
      tp.union_labels[i] = ((*a1.labels)[i] || (*a2.labels)[i]) ? 1 : 0;
  }
  return tp;
}

template <typename T>
struct TripletLossNodes {
  int total = -1;
  int mae = -1;
  int sdr_clamped = -1;
  int bce = -1;
};

// One triplet's loss graph: lambda_mae*MAE - lambda_sdr*clamp(SDR) plus the
// optional tagging term on the mixture pass's class logits.
template <typename T>
TripletLossNodes<T> build_triplet_loss(nn::Tape<T>& t, SeparationSystem<T>& sys,
                                       const nn::Frontend& fe_mix,
                                       const TrainingTriplet& trip, int query_node,
                                       const TrainConfig& cfg) {
  nn::SeparationTrace trace;
  int wave = sys.separator.build_separation(t, fe_mix, query_node, &trace);

  Tensor<T> tgt(1, trip.target->length());
  for (int64_t i = 0; i < tgt.size(); ++i)
    tgt[i] = static_cast<T>(trip.target->samples[static_cast<size_t>(i)]);
  int diff = t.sub(wave, t.constant(std::move(tgt)));

  TripletLossNodes<T> out;
  out.mae = t.mean_all(t.abs(diff));
  const double ref_e = trip.target->energy();
  if (ref_e <= 0.0) throw std::invalid_argument("separation_loss: silent reference");
  int err_e = t.clamp(t.sum_all(t.mul(diff, diff)), T(1e-30),
                      std::numeric_limits<T>::max());
  constexpr double kTenOverLn10 = 4.342944819032518;
  int sdr = t.add_scalar(t.scale(t.log(err_e), T(-kTenOverLn10)),
                         static_cast<T>(10.0 * std::log10(ref_e)));
  out.sdr_clamped = t.clamp(sdr, static_cast<T>(-cfg.sdr_clamp_db),
                            static_cast<T>(cfg.sdr_clamp_db));
  out.total = t.add(t.scale(out.mae, static_cast<T>(cfg.lambda_mae)),
                    t.scale(out.sdr_clamped, static_cast<T>(-cfg.lambda_sdr)));
  if (cfg.joint_tagging && !trip.union_labels.empty()) {
    Tensor<T> labels(1, static_cast<int64_t>(trip.union_labels.size()));
    for (int64_t i = 0; i < labels.size(); ++i)
      labels[i] = static_cast<T>(trip.union_labels[static_cast<size_t>(i)]);
    out.bce = t.bce_with_logits(trace.class_logits, labels);
    out.total = t.add(out.total, t.scale(out.bce, static_cast<T>(cfg.lambda_bce)));
  }
  return out;
}

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<nn::Parameter<T>*> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.rows(), p->value.cols());
      v_.emplace_back(p->value.rows(), p->value.cols());
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      for (int64_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        const double m = cfg_.beta1 * static_cast<double>(m_[k][i]) + (1 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(v_[k][i]) + (1 - cfg_.beta2) * g * g;
        m_[k][i] = static_cast<T>(m);
        v_[k][i] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps) +
                              cfg_.weight_decay * static_cast<double>(p.value[i]);
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * update);
      }
    }
  }

  const std::vector<nn::Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<nn::Parameter<T>*> params_;
  TrainConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  int64_t t_ = 0;
};

struct StepMetrics {
  int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double mae = 0.0;
  double sdr_db = 0.0;
  double bce = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct BatchItem {
  size_t i = 0;  // dataset clip indices
  size_t j = 0;
  uint64_t mix_seed = 0;
};

template <typename T>
class Trainer {
 public:
  Trainer(SeparationSystem<T>& sys, const data::Dataset& ds, TrainConfig cfg,
          std::string metrics_path = "")
      : sys_(sys), ds_(ds), cfg_(cfg), opt_(sys.trainable_parameters(), cfg),
        metrics_path_(std::move(metrics_path)) {
    cfg_.validate();
    if (!metrics_path_.empty()) {
      std::ofstream f(metrics_path_, std::ios::trunc);
      f << "step\tepoch\tloss\tmae\tsdr_db\tbce\tgrad_norm\tlr\n";
    }
  }

  // Anchor frontends and (grad-off) query embeddings are pure functions of
  // the current parameters, refreshed per epoch.
  void refresh_query_cache() {
    query_cache_.clear();
    if (sys_.ablation.grad) return;
    for (size_t idx : ds_.train_idx) {
      const AudioClip& clip = ds_.clips[idx];
      QueryEmbedding q = queries::compute_query(clip, sys_);
      Tensor<T> qt(1, static_cast<int64_t>(q.values.size()));
      for (int64_t c = 0; c < qt.size(); ++c)
        qt[c] = static_cast<T>(q.values[static_cast<size_t>(c)]);
      query_cache_[clip.clip_id] = std::move(qt);
    }
  }

  StepMetrics run_step(const std::vector<BatchItem>& batch, double lr) {
    for (auto* p : sys_.parameters()) p->zero_grad();
    StepMetrics m;
    m.step = step_;
    m.epoch = epoch_;
    m.lr = lr;
    const double denom = 2.0 * static_cast<double>(batch.size());

    for (const auto& item : batch) {
      TripletPair tp = make_triplets(ds_.clips[item.i], ds_.clips[item.j], item.mix_seed);
      nn::Tape<T> t;
      nn::Frontend fe_mix = nn::make_frontend(tp.mix.mixture, sys_.separator.cfg);
      int combined = -1;
      for (const TrainingTriplet& trip : {tp.first(), tp.second()}) {
        const int qnode = query_node(t, *trip.anchor);
        auto parts = build_triplet_loss(t, sys_, fe_mix, trip, qnode, cfg_);
        m.loss += t.val(parts.total)[0] / denom;
        m.mae += t.val(parts.mae)[0] / denom;
        m.sdr_db += t.val(parts.sdr_clamped)[0] / denom;
        if (parts.bce >= 0) m.bce += t.val(parts.bce)[0] / denom;
        combined = combined < 0 ? parts.total : t.add(combined, parts.total);
      }
      t.backward(t.scale(combined, static_cast<T>(1.0 / denom)));
    }

    double gn2 = 0.0;
    for (auto* p : opt_.params())
      for (int64_t i = 0; i < p->grad.size(); ++i)
        gn2 += static_cast<double>(p->grad[i]) * static_cast<double>(p->grad[i]);
    m.grad_norm = std::sqrt(gn2);
    if (!std::isfinite(m.loss) || !std::isfinite(m.grad_norm))
      abort_non_finite(m);

    opt_.step(lr);
    ++step_;
    log_metrics(m);
    return m;
  }

  void train() {
    for (int epoch = 0; epoch < cfg_.max_epochs; ++epoch) run_epoch(epoch);
  }

  void run_epoch(int epoch) {
    epoch_ = epoch;
    refresh_query_cache();
    auto batches = epoch_batches(epoch);
    const double lr = lr_schedule(epoch, 0.0, cfg_);
    for (const auto& b : batches) run_step(b, lr);
  }

  // Deterministic cross-class pairing: every train clip appears once as the
  // primary source per epoch.
  std::vector<std::vector<BatchItem>> epoch_batches(int epoch) const {
    std::vector<size_t> order = ds_.train_idx;
    Rng rng(Rng::derive(cfg_.seed, 0x65706f63, static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    std::vector<std::vector<BatchItem>> batches;
    std::vector<BatchItem> current;
    for (size_t k = 0; k < order.size(); ++k) {
      const size_t i = order[k];
      std::vector<size_t> partners;
      for (size_t cand : ds_.train_idx)
        if (ds_.class_of(cand) != ds_.class_of(i)) partners.push_back(cand);
      if (partners.empty()) throw std::runtime_error("training needs >= 2 classes");
      BatchItem item;
      item.i = i;
      item.j = partners[static_cast<size_t>(rng.below(partners.size()))];
      item.mix_seed = Rng::derive(cfg_.seed, static_cast<uint64_t>(epoch), k);
      current.push_back(item);
      if (static_cast<int>(current.size()) == cfg_.batch_size) {
        batches.push_back(std::move(current));
        current.clear();
      }
    }
    if (!current.empty()) batches.push_back(std::move(current));
    return batches;
  }

  int64_t step() const { return step_; }

 private:
  int query_node(nn::Tape<T>& t, const AudioClip& anchor) {
    if (sys_.ablation.grad) {
      nn::Frontend fe = nn::make_frontend(anchor, sys_.separator.cfg);
      return nn::build_query_graph(t, sys_.query_encoder(), fe);
    }
    auto it = query_cache_.find(anchor.clip_id);
    if (it == query_cache_.end()) {
      QueryEmbedding q = queries::compute_query(anchor, sys_);
      Tensor<T> qt(1, static_cast<int64_t>(q.values.size()));
      for (int64_t c = 0; c < qt.size(); ++c)
        qt[c] = static_cast<T>(q.values[static_cast<size_t>(c)]);
      it = query_cache_.emplace(anchor.clip_id, std::move(qt)).first;
    }
    return t.constant(it->second);
  }

  void log_metrics(const StepMetrics& m) {
    if (metrics_path_.empty()) return;
    std::ofstream f(metrics_path_, std::ios::app);
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld\t%d\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n",
                  static_cast<long long>(m.step), m.epoch, m.loss, m.mae, m.sdr_db,
                  m.bce, m.grad_norm, m.lr);
    f << buf;
  }

  [[noreturn]] void abort_non_finite(const StepMetrics& m) {
    Json dump;
    dump["step"] = m.step;
    dump["epoch"] = m.epoch;
    dump["loss"] = m.loss;
    dump["grad_norm"] = m.grad_norm;
    Json norms;
    for (auto* p : sys_.parameters()) {
      double n2 = 0.0;
      for (int64_t i = 0; i < p->value.size(); ++i)
        n2 += static_cast<double>(p->value[i]) * static_cast<double>(p->value[i]);
      norms[p->name] = std::sqrt(n2);
    }
    dump["param_norms"] = norms;
    std::string path = metrics_path_.empty() ? "nonfinite_dump.json"
                                             : metrics_path_ + ".dump.json";
    std::ofstream f(path, std::ios::trunc);
    f << dump.dump(2) << "\n";
    throw std::runtime_error("non-finite loss at step " + std::to_string(m.step) +
                             "; diagnostics written to " + path);
  }

  SeparationSystem<T>& sys_;
  const data::Dataset& ds_;
  TrainConfig cfg_;
  AdamW<T> opt_;
  std::string metrics_path_;
  std::map<std::string, Tensor<T>> query_cache_;
  int64_t step_ = 0;
  int epoch_ = 0;
};

struct PretrainResult {
  double eval_map = 0.0;
  int64_t steps = 0;
};

// Tagging-only training of an encoder stack (no decoder); reports held-out
// mAP and saves a checkpoint loadable by the Init toggle.
template <typename T>
PretrainResult pretrain_classifier(nn::EncoderStack<T>& stack, const data::Dataset& ds,
                                   const TrainConfig& cfg,
                                   const std::string& ckpt_path = "") {
  cfg.validate();
  std::set<int> train_classes;
  for (size_t idx : ds.train_idx) train_classes.insert(ds.class_of(idx));
  if (train_classes.size() < 2)
    throw std::invalid_argument("pretrain_classifier: need >= 2 classes");

  auto params = stack.parameters();
  AdamW<T> opt(params, cfg);
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<size_t> order = ds.train_idx;
    Rng rng(Rng::derive(cfg.seed, 0x636c73, static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      for (auto* p : params) p->zero_grad();
      for (size_t k = start; k < end; ++k) {
        const AudioClip& clip = ds.clips[order[k]];
        nn::Tape<T> t;
        auto fe = nn::make_frontend(clip, stack.cfg);
        int logits = nn::build_classifier_graph(t, stack, fe);
        Tensor<T> labels(1, static_cast<int64_t>(clip.labels->size()));
        for (int64_t c = 0; c < labels.size(); ++c)
          labels[c] = static_cast<T>((*clip.labels)[static_cast<size_t>(c)]);
        int loss = t.scale(t.bce_with_logits(logits, labels),
                           static_cast<T>(1.0 / static_cast<double>(end - start)));
        t.backward(loss);
      }
      opt.step(lr_schedule(epoch, 0.0, cfg));
      ++step;
    }
  }

  PretrainResult out;
  out.steps = step;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<uint8_t>> labels;
  for (size_t idx : ds.eval_idx) {
    scores.push_back(nn::classifier_logits(stack, ds.clips[idx]));
    labels.push_back(*ds.clips[idx].labels);
  }
  out.eval_map = eval::mean_average_precision(scores, labels);

  if (!ckpt_path.empty()) {
    Json meta;
    meta["kind"] = "classifier";
    meta["encoder_prefix"] = stack.prefix;
    meta["model"] = stack.cfg;
    meta["seed"] = cfg.seed;
    meta["step"] = step;
    meta["eval_map"] = out.eval_map;
    ckpt::save<T>(ckpt_path, params, meta);
  }
  return out;
}

struct AblationRowResult {
  std::string label;
  AblationConfig ablation;
  eval::SdrStats mixture;
  eval::SdrStats clean;
  eval::SdrStats silence;
};

// Trains one model per row under identical seeds/data and reports the three
// SDR protocols per row.
template <typename T>
std::vector<AblationRowResult> run_ablation_grid(
    const std::vector<std::pair<std::string, AblationConfig>>& rows,
    const ModelConfig& mc, const TrainConfig& tc, const data::Dataset& ds,
    const std::vector<data::MixPair>& pairs, const AnchorPolicy& policy,
    const ckpt::Loaded<T>* classifier_ckpt) {
  std::vector<AblationRowResult> out;
  for (const auto& [label, ab] : rows) {
    if (ab.init && !classifier_ckpt)
      throw std::runtime_error("ablation row " + label +
                               " requires a pretrained classifier checkpoint");
    SeparationSystem<T> sys(mc, ab, tc.seed);
    if (ab.init) sys.apply_pretrained(*classifier_ckpt);
    Trainer<T> trainer(sys, ds, tc);
    trainer.train();
    eval::SystemSeparator<T> model(sys);
    auto report = eval::full_sdr_report(model, ds, pairs, policy, tc.seed);
    out.push_back({label, ab, report.mixture, report.clean, report.silence});
  }
  return out;
}

}  // namespace caresep::train
