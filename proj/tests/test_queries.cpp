#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "caresep/datagen.hpp"
#include "caresep/queries.hpp"
#include "caresep/training.hpp"

using namespace caresep;
namespace fs = std::filesystem;

namespace {

AudioClip labeled_clip(int64_t len, uint64_t seed, int cls, int n_classes,
                       const std::string& id) {
  Rng rng(seed);
  AudioClip c;
  c.sample_rate = 16000;
  c.samples.resize(static_cast<size_t>(len));
  for (auto& s : c.samples) s = 0.2 * rng.normal();
  std::vector<uint8_t> hot(static_cast<size_t>(n_classes), 0);
  hot[static_cast<size_t>(cls)] = 1;
  c.labels = hot;
  c.clip_id = id;
  return c;
}

}  // namespace

TEST_CASE("ablation rows cover the seven toggle combinations") {
  CHECK(AblationConfig::row('C').grad);
  CHECK(AblationConfig::row('C').init);
  CHECK(AblationConfig::row('C').shared_encoder);
  CHECK_FALSE(AblationConfig::row('D').grad);
  CHECK_FALSE(AblationConfig::row('E').init);
  CHECK_FALSE(AblationConfig::row('F').grad);
  CHECK_FALSE(AblationConfig::row('F').init);
  CHECK_FALSE(AblationConfig::row('G').shared_encoder);
  CHECK_FALSE(AblationConfig::row('A').shared_encoder);
  CHECK_THROWS_AS(AblationConfig::row('Z'), std::invalid_argument);
}

TEST_CASE("shared encoder exposes identical parameter storage") {
  SeparationSystem<float> sys(ModelConfig::tiny(), AblationConfig::row('C'), 5);
  CHECK(sys.query_exclusive_parameters().empty());
  CHECK(&sys.query_encoder() == &sys.separator.encoder);
  // Mutating through the query path mutates the separator's encoder.
  auto& p = sys.query_encoder().patch_embed.proj.w;
  const float before = sys.separator.encoder.patch_embed.proj.w.value[0];
  p.value[0] = before + 1.0f;
  CHECK(sys.separator.encoder.patch_embed.proj.w.value[0] == before + 1.0f);
}

TEST_CASE("non-shared system owns a disjoint second parameter set") {
  SeparationSystem<float> sys(ModelConfig::tiny(), AblationConfig::row('G'), 5);
  REQUIRE(sys.query_net.has_value());
  auto excl = sys.query_exclusive_parameters();
  CHECK_FALSE(excl.empty());
  auto sep = sys.separator.parameters();
  for (auto* q : excl)
    for (auto* s : sep) CHECK(q != s);
  // Independent random init: the clone differs from the separator's encoder.
  std::vector<nn::Parameter<float>*> enc_params;
  sys.separator.encoder.collect(enc_params);
  bool any_diff = false;
  for (size_t k = 0; k < enc_params.size(); ++k)
    for (int64_t i = 0; i < enc_params[k]->value.size() && !any_diff; ++i)
      if (enc_params[k]->value[i] != excl[k]->value[i]) any_diff = true;
  CHECK(any_diff);
  // Mutating the clone leaves the separator untouched.
  const float before = enc_params[0]->value[0];
  excl[0]->value[0] += 2.0f;
  CHECK(enc_params[0]->value[0] == before);
}

TEST_CASE("external query net loads a classifier checkpoint bit-for-bit") {
  auto dir = fs::temp_directory_path() / "caresep_qinit";
  fs::create_directories(dir);
  const auto ckpt_path = (dir / "cls.ckpt").string();

  ModelConfig cfg = ModelConfig::tiny();
  // A throwaway classifier: random init, saved untouched.
  Rng rng(99);
  auto bm = dsp::make_band_map(cfg.stft_window / 2 + 1, cfg.n_bands, cfg.sample_rate);
  nn::EncoderStack<float> cls(cfg, 2 * bm->max_width(), "cls", rng);
  {
    Json meta;
    meta["kind"] = "classifier";
    meta["encoder_prefix"] = "cls";
    meta["model"] = cfg;
    meta["seed"] = 99;
    meta["step"] = 0;
    std::vector<nn::Parameter<float>*> params;
    cls.collect(params);
    ckpt::save<float>(ckpt_path, params, meta);
  }

  auto loaded = ckpt::load<float>(ckpt_path);
  auto qnet = queries::build_external_query_net<float>(cfg, 2 * bm->max_width(), 1,
                                                       &loaded);
  std::vector<nn::Parameter<float>*> a, b;
  cls.collect(a);
  qnet.collect(b);
  REQUIRE(a.size() == b.size());
  for (size_t k = 0; k < a.size(); ++k)
    for (int64_t i = 0; i < a[k]->value.size(); ++i)
      CHECK(a[k]->value[i] == b[k]->value[i]);

  // Config mismatch is rejected.
  ModelConfig other = cfg;
  other.latent_dim = 8;
  other.heads = {2, 4, 8, 16};
  auto bm2 = dsp::make_band_map(other.stft_window / 2 + 1, other.n_bands, other.sample_rate);
  CHECK_THROWS_AS(queries::build_external_query_net<float>(other, 2 * bm2->max_width(),
                                                           1, &loaded),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("select_anchor modes") {
  std::vector<AudioClip> clips;
  clips.push_back(labeled_clip(800, 1, 0, 2, "a0"));
  clips.push_back(labeled_clip(800, 2, 0, 2, "a1"));
  clips.push_back(labeled_clip(800, 3, 1, 2, "b0"));
  std::vector<const AudioClip*> pool{&clips[0], &clips[1], &clips[2]};

  AnchorPolicy self{AnchorPolicy::Mode::kSelf, 0};
  auto c1 = queries::select_anchor(clips[0], pool, self, 9);
  REQUIRE(c1.clips.size() == 1);
  CHECK(c1.clips[0]->clip_id == "a0");

  // Two clips in the class: same-class-other is a forced choice.
  AnchorPolicy other{AnchorPolicy::Mode::kSameClassOther, 0};
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto c = queries::select_anchor(clips[0], pool, other, seed);
    CHECK(c.clips[0]->clip_id == "a1");
  }
  // No same-class partner for b0.
  CHECK_THROWS_AS(queries::select_anchor(clips[2], pool, other, 0),
                  std::invalid_argument);
  // class-mean needs pool_size clips.
  AnchorPolicy mean{AnchorPolicy::Mode::kClassMean, 2};
  auto cm = queries::select_anchor(clips[0], pool, mean, 4);
  CHECK(cm.clips.size() == 2);
  AnchorPolicy mean5{AnchorPolicy::Mode::kClassMean, 5};
  CHECK_THROWS_AS(queries::select_anchor(clips[0], pool, mean5, 4),
                  std::invalid_argument);
}

TEST_CASE("class-mean query equals the mean of individual embeddings") {
  SeparationSystem<float> sys(ModelConfig::tiny(), AblationConfig::row('C'), 5);
  std::vector<AudioClip> clips;
  for (int i = 0; i < 3; ++i)
    clips.push_back(labeled_clip(960, 10 + static_cast<uint64_t>(i), 0, 2,
                                 "m" + std::to_string(i)));
  queries::AnchorChoice choice;
  choice.mode = AnchorPolicy::Mode::kClassMean;
  choice.clips = {&clips[0], &clips[1], &clips[2]};
  auto mean_q = queries::resolve_query(choice, sys);

  std::vector<QueryEmbedding> singles;
  for (const auto& c : clips) singles.push_back(queries::compute_query(c, sys));
  for (size_t d = 0; d < mean_q.values.size(); ++d) {
    double expect =
        (singles[0].values[d] + singles[1].values[d] + singles[2].values[d]) / 3.0;
    CHECK(mean_q.values[d] == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("compute_query is deterministic and rejects silent anchors") {
  SeparationSystem<float> sys(ModelConfig::tiny(), AblationConfig::row('C'), 6);
  auto clip = labeled_clip(960, 77, 0, 2, "q");
  auto q1 = queries::compute_query(clip, sys);
  auto q2 = queries::compute_query(clip, sys);
  CHECK(q1.values == q2.values);
  CHECK(q1.values.size() == static_cast<size_t>(sys.separator.cfg.embed_dim()));

  AudioClip silent;
  silent.sample_rate = 16000;
  silent.samples.assign(960, 0.0);
  CHECK_THROWS_WITH_AS(queries::compute_query(silent, sys), "silent anchor",
                       std::invalid_argument);
}

TEST_CASE("stop-gradient queries leave encoder gradients untouched") {
  // grad=off, shared=on: a loss read from the (detached) query embedding
  // pushes no gradient anywhere.
  SeparationSystem<double> sys(ModelConfig::tiny(), AblationConfig::row('D'), 6);
  auto clip = labeled_clip(960, 78, 0, 2, "sg");
  for (auto* p : sys.parameters()) p->zero_grad();

  nn::Tape<double> t;
  auto fe = nn::make_frontend(clip, sys.separator.cfg);
  int pooled = nn::build_query_graph(t, sys.query_encoder(), fe);
  int detached = sys.ablation.grad ? pooled : t.stop_gradient(pooled);
  int loss = t.sum_all(t.mul(detached, detached));
  t.backward(loss);
  for (auto* p : sys.parameters()) {
    double norm = 0;
    for (int64_t i = 0; i < p->grad.size(); ++i)
      norm += static_cast<double>(p->grad[i]) * static_cast<double>(p->grad[i]);
    CHECK(norm == 0.0);
  }
}
