#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "caresep/model.hpp"
#include "caresep/rng.hpp"

using namespace caresep;
using namespace caresep::nn;

namespace {

AudioClip noise_clip(int64_t len, int sr, uint64_t seed, double amp = 0.3) {
  Rng rng(seed);
  AudioClip c;
  c.sample_rate = sr;
  c.samples.resize(static_cast<size_t>(len));
  for (auto& s : c.samples) s = amp * (2.0 * rng.uniform() - 1.0);
  c.clip_id = "noise" + std::to_string(seed);
  return c;
}

// 1 s at 16 kHz with the desk preset: 51 frames padded to 64, 64 bands.
ModelConfig desk_cfg() { return ModelConfig::desk(); }

QueryEmbedding random_query(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  QueryEmbedding q;
  q.values.resize(static_cast<size_t>(cfg.embed_dim()));
  for (auto& v : q.values) v = rng.normal(0.0, 0.5);
  return q;
}

}  // namespace

TEST_CASE("encoder shape chain for three configs") {
  struct Case {
    ModelConfig cfg;
    int64_t clip_len;
  };
  ModelConfig big = ModelConfig::desk();
  big.latent_dim = 12;
  big.heads = {2, 4, 6, 12};
  for (auto& [cfg, clip_len] : std::vector<Case>{{ModelConfig::desk(), 16000},
                                                 {ModelConfig::tiny(), 960},
                                                 {big, 16000}}) {
    SeparatorModel<float> model(cfg, 7);
    auto clip = noise_clip(clip_len, 16000, 1);
    auto fe = make_frontend(clip, cfg);
    Tape<float> t(false);
    int cells = t.constant(band_tensor_padded<float>(fe.bands, fe.t_padded));
    auto enc = model.encoder.encode(t, cells, fe.cells);

    const int64_t th = fe.t_padded / cfg.patch_size;
    const int64_t tw = cfg.n_bands / cfg.patch_size;
    for (int s = 0; s < 3; ++s) {
      CHECK(enc.skip_grids[static_cast<size_t>(s)].h == th >> s);
      CHECK(enc.skip_grids[static_cast<size_t>(s)].w == tw >> s);
      CHECK(t.val(enc.skips[static_cast<size_t>(s)]).cols() == cfg.stage_channels(s));
      CHECK(t.val(enc.skips[static_cast<size_t>(s)]).rows() ==
            (th >> s) * (tw >> s));
    }
    CHECK(enc.grid.h == th / 8);
    CHECK(enc.grid.w == tw / 8);
    CHECK(t.val(enc.bottleneck).cols() == cfg.embed_dim());

    auto conn = model.encoder.connector_forward(t, enc.bottleneck, enc.grid);
    CHECK(t.val(conn.pooled).cols() == cfg.embed_dim());
    CHECK(t.val(conn.class_logits).cols() == cfg.n_classes);
  }
}

TEST_CASE("pooled embedding width follows 8*D") {
  for (int d : {8, 96, 256}) {
    ModelConfig cfg = ModelConfig::desk();
    cfg.latent_dim = d;
    cfg.heads = {d / 4, d / 2, d, 2 * d};
    CHECK(cfg.embed_dim() == 8 * d);
  }
  CHECK(ModelConfig::paper(96).embed_dim() == 768);
  CHECK(ModelConfig::paper(256).embed_dim() == 2048);
}

TEST_CASE("patch embed: constant-bias pattern on zero input and locality") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 3);
  Grid cells{16, 16};
  const int64_t cf = model.channel_features;

  Tape<double> t(false);
  Tensor<double> zeros(cells.tokens(), cf);
  auto [y0, g0] = model.encoder.patch_embed.forward(t, t.constant(zeros), cells);
  CHECK(g0.h == 8);
  CHECK(g0.w == 8);
  const auto& v = t.val(y0);
  for (int64_t r = 1; r < v.rows(); ++r)
    for (int64_t c = 0; c < v.cols(); ++c) CHECK(v(r, c) == doctest::Approx(v(0, c)));

  // Perturbing cells inside one patch changes only that token.
  Rng rng(5);
  Tensor<double> x(cells.tokens(), cf);
  for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  Tensor<double> x2 = x;
  // patch (3,2) covers cells rows 6..7, cols 4..5
  x2(6 * 16 + 4, 1) += 0.77;
  x2(7 * 16 + 5, 0) -= 0.31;
  Tape<double> t2(false);
  auto [ya, ga] = model.encoder.patch_embed.forward(t2, t2.constant(x), cells);
  auto [yb, gb] = model.encoder.patch_embed.forward(t2, t2.constant(x2), cells);
  for (int64_t r = 0; r < t2.val(ya).rows(); ++r) {
    double diff = 0;
    for (int64_t c = 0; c < t2.val(ya).cols(); ++c)
      diff += std::abs(t2.val(ya)(r, c) - t2.val(yb)(r, c));
    if (r == 3 * 8 + 2)
      CHECK(diff > 1e-6);
    else
      CHECK(diff == 0.0);
  }
}

TEST_CASE("patch merge and expand shape laws") {
  Rng rng(11);
  Tape<double> t(false);
  PatchMerge<double> merge("m", 8, rng);
  Tensor<double> x(16 * 16, 8);
  for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  auto [m, mg] = merge.forward(t, t.constant(x), Grid{16, 16});
  CHECK(mg.h == 8);
  CHECK(mg.w == 8);
  CHECK(t.val(m).cols() == 16);

  // Constant input stays spatially constant through the merge.
  Tensor<double> c(16 * 16, 8);
  for (int64_t i = 0; i < c.size(); ++i) c[i] = 0.37;
  auto [mc, mcg] = merge.forward(t, t.constant(c), Grid{16, 16});
  for (int64_t r = 1; r < t.val(mc).rows(); ++r)
    for (int64_t col = 0; col < 16; ++col)
      CHECK(t.val(mc)(r, col) == doctest::Approx(t.val(mc)(0, col)));

  PatchExpand<double> expand("e", 64, rng);
  Tensor<double> z(4 * 4, 64);
  for (int64_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
  auto [e, eg] = expand.forward(t, t.constant(z), Grid{4, 4});
  CHECK(eg.h == 8);
  CHECK(eg.w == 8);
  CHECK(t.val(e).cols() == 32);

  // Merge then expand restores the original shape.
  PatchMerge<double> m2("m2", 32, rng);
  auto [mm, mmg] = m2.forward(t, t.constant(Tensor<double>(8 * 8, 32)), Grid{8, 8});
  PatchExpand<double> e2("e2", 64, rng);
  auto [ee, eeg] = e2.forward(t, mm, mmg);
  CHECK(eeg.h == 8);
  CHECK(eeg.w == 8);
  CHECK(t.val(ee).cols() == 32);

  CHECK_THROWS_AS(merge.forward(t, t.constant(Tensor<double>(15 * 16, 8)), Grid{15, 16}),
                  std::invalid_argument);
}

TEST_CASE("three merges reach 8D channels") {
  ModelConfig cfg = ModelConfig::desk();
  SeparatorModel<float> model(cfg, 1);
  auto clip = noise_clip(16000, 16000, 2);
  auto fe = make_frontend(clip, cfg);
  Tape<float> t(false);
  auto enc = model.encoder.encode(
      t, t.constant(band_tensor_padded<float>(fe.bands, fe.t_padded)), fe.cells);
  CHECK(t.val(enc.bottleneck).cols() == 8 * cfg.latent_dim);
}

TEST_CASE("swin block: zero query with zero-init injection bias is a no-op") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 9);
  auto clip = noise_clip(960, 16000, 3);
  auto fe = make_frontend(clip, cfg);

  Tape<double> t(false);
  int cells = t.constant(band_tensor_padded<double>(fe.bands, fe.t_padded));
  auto enc = model.encoder.encode(t, cells, fe.cells);
  // Query-free connector pass.
  auto plain = model.encoder.connector_forward(t, enc.bottleneck, enc.grid, -1);
  // Zero query through the injection projection: bias is zero-initialized, so
  // the projected vector is exactly zero and the block output matches.
  Tensor<double> zq(1, cfg.embed_dim());
  int inj = model.conn_inj.forward(t, t.constant(zq));
  for (int64_t c = 0; c < t.val(inj).cols(); ++c) CHECK(t.val(inj)(0, c) == 0.0);
  auto injected = model.encoder.connector_forward(t, enc.bottleneck, enc.grid, inj);
  const auto& a = t.val(plain.latent);
  const auto& b = t.val(injected.latent);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("distinct queries give distinct outputs") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 21);
  // The output head ships zero-initialized (constant 0.5 mask); give it
  // non-zero weights so upstream differences can reach the waveform.
  Rng hr(91);
  for (int64_t i = 0; i < model.head.w.value.size(); ++i)
    model.head.w.value[i] = hr.normal(0.0, 0.1);
  auto clip = noise_clip(960, 16000, 4);
  auto q1 = random_query(cfg, 100);
  auto q2 = random_query(cfg, 200);
  auto y1 = model.separate(clip, q1);
  auto y2 = model.separate(clip, q2);
  double diff = 0;
  for (size_t i = 0; i < y1.samples.size(); ++i)
    diff = std::max(diff, std::abs(y1.samples[i] - y2.samples[i]));
  CHECK(diff > 1e-9);
}

TEST_CASE("query injection is affine at the injection site") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 33);
  Rng rng(8);
  Tensor<double> q1(1, cfg.embed_dim()), q2(1, cfg.embed_dim()), zero(1, cfg.embed_dim());
  for (int64_t i = 0; i < q1.size(); ++i) {
    q1[i] = rng.normal();
    q2[i] = rng.normal();
  }
  Tensor<double> qsum = q1;
  qsum.add_inplace(q2);

  Tape<double> t(false);
  int i1 = model.conn_inj.forward(t, t.constant(q1));
  int i2 = model.conn_inj.forward(t, t.constant(q2));
  int i0 = model.conn_inj.forward(t, t.constant(zero));
  int isum = model.conn_inj.forward(t, t.constant(qsum));
  // affine: proj(q1+q2) == proj(q1) + (proj(q2) - proj(0))
  for (int64_t c = 0; c < t.val(isum).cols(); ++c)
    CHECK(t.val(isum)(0, c) ==
          doctest::Approx(t.val(i1)(0, c) + t.val(i2)(0, c) - t.val(i0)(0, c))
              .epsilon(1e-12));
}

TEST_CASE("untrained mask-mode model passes half the mixture") {
  ModelConfig cfg = ModelConfig::desk();
  SeparatorModel<float> model(cfg, 17);
  auto clip = noise_clip(16000, 16000, 5);
  auto q = random_query(cfg, 6);
  auto out = model.separate(clip, q);
  REQUIRE(out.samples.size() == clip.samples.size());
  // Zero-initialized head -> sigmoid(0) = 0.5 mask -> exactly half the
  // mixture after the linear iSTFT.
  double err = 0, ref = 0;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    err += std::pow(out.samples[i] - 0.5 * clip.samples[i], 2);
    ref += std::pow(0.5 * clip.samples[i], 2);
  }
  CHECK(std::sqrt(err / ref) < 1e-5);
  const double energy_ratio = out.energy() / clip.energy();
  CHECK(energy_ratio == doctest::Approx(0.25).epsilon(1e-4));
}

TEST_CASE("separate output length equals input length and is deterministic") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<float> model(cfg, 41);
  auto clip = noise_clip(1000, 16000, 6);
  auto q = random_query(cfg, 7);
  auto y1 = model.separate(clip, q);
  auto y2 = model.separate(clip, q);
  CHECK(y1.samples.size() == clip.samples.size());
  for (size_t i = 0; i < y1.samples.size(); ++i) CHECK(y1.samples[i] == y2.samples[i]);

  QueryEmbedding bad;
  bad.values.assign(13, 0.0);
  CHECK_THROWS_WITH_AS(model.separate(clip, bad), "query length != 8D",
                       std::invalid_argument);
}

TEST_CASE("zeroing a skip changes the decoder output") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 55);
  Rng hr(92);
  for (int64_t i = 0; i < model.head.w.value.size(); ++i)
    model.head.w.value[i] = hr.normal(0.0, 0.1);
  auto clip = noise_clip(960, 16000, 8);
  auto fe = make_frontend(clip, cfg);
  Tensor<double> q(1, cfg.embed_dim());
  Rng rng(9);
  for (int64_t i = 0; i < q.size(); ++i) q[i] = rng.normal();

  Tape<double> t(false);
  int cells = t.constant(band_tensor_padded<double>(fe.bands, fe.t_padded));
  auto enc = model.encoder.encode(t, cells, fe.cells);
  int qn = t.constant(q);
  auto conn = model.encoder.connector_forward(t, enc.bottleneck, enc.grid,
                                              model.conn_inj.forward(t, qn));
  int out1 = model.decoder_forward(t, conn.latent, conn.grid, enc.skips, enc.skip_grids,
                                   qn, fe);
  // Zero out skip 1 (middle stage).
  auto zeroed = enc.skips;
  const auto& s1 = t.val(enc.skips[1]);
  zeroed[1] = t.constant(Tensor<double>(s1.rows(), s1.cols()));
  int out2 = model.decoder_forward(t, conn.latent, conn.grid, zeroed, enc.skip_grids,
                                   qn, fe);
  double diff = 0;
  for (int64_t i = 0; i < t.val(out1).size(); ++i)
    diff = std::max(diff, std::abs(t.val(out1)[i] - t.val(out2)[i]));
  CHECK(diff > 1e-9);

  // Mismatched skip shape is rejected.
  auto badgrids = enc.skip_grids;
  badgrids[1] = Grid{1, 1};
  CHECK_THROWS_AS(model.decoder_forward(t, conn.latent, conn.grid, enc.skips, badgrids,
                                        qn, fe),
                  std::invalid_argument);
}

TEST_CASE("shifted attention confines influence to the shifted window") {
  // One shifted block on an 8x8 grid: perturbing a token outside the target
  // token's shifted window leaves that output unchanged.
  Rng rng(77);
  SwinBlock<double> block("b", 8, 2, 4, /*shift=*/true, rng);
  Grid g{8, 8};
  Tensor<double> x(g.tokens(), 8);
  for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();

  // Shift = 2. Token (2,2) in the shifted canvas belongs to the window of
  // shifted rows 0..3, i.e. original rows 2..5, cols 2..5. Token (7,7) is
  // outside it.
  Tensor<double> x2 = x;
  x2(7 * 8 + 7, 3) += 1.0;

  Tape<double> t(false);
  int y1 = block.forward(t, t.constant(x), g);
  int y2 = block.forward(t, t.constant(x2), g);
  const int64_t target = 3 * 8 + 3;  // inside original rows 2..5 region
  for (int64_t c = 0; c < 8; ++c)
    CHECK(t.val(y1)(target, c) == doctest::Approx(t.val(y2)(target, c)).epsilon(1e-12));
  // And the perturbed token itself does change.
  double d = 0;
  for (int64_t c = 0; c < 8; ++c)
    d += std::abs(t.val(y1)(7 * 8 + 7, c) - t.val(y2)(7 * 8 + 7, c));
  CHECK(d > 1e-9);
}

TEST_CASE("block output shape equals input shape at every stage") {
  ModelConfig cfg = ModelConfig::desk();
  SeparatorModel<float> model(cfg, 4);
  auto clip = noise_clip(16000, 16000, 10);
  auto fe = make_frontend(clip, cfg);
  Tape<float> t(false);
  int cells = t.constant(band_tensor_padded<float>(fe.bands, fe.t_padded));
  auto [x, g] = model.encoder.patch_embed.forward(t, cells, fe.cells);
  for (int s = 0; s < 3; ++s) {
    for (auto& b : model.encoder.stages[static_cast<size_t>(s)]) {
      int before_rows = static_cast<int>(t.val(x).rows());
      int before_cols = static_cast<int>(t.val(x).cols());
      x = b.forward(t, x, g);
      CHECK(t.val(x).rows() == before_rows);
      CHECK(t.val(x).cols() == before_cols);
    }
    auto [m, mg] = model.encoder.merges[static_cast<size_t>(s)].forward(t, x, g);
    x = m;
    g = mg;
  }
}

TEST_CASE("constant connector latent pools to the constant") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 13);
  Tape<double> t(false);
  Tensor<double> latent(4, cfg.embed_dim());
  for (int64_t c = 0; c < latent.cols(); ++c)
    for (int64_t r = 0; r < 4; ++r) latent(r, c) = 0.1 * static_cast<double>(c);
  int pooled = t.mean_rows(t.constant(latent));
  for (int64_t c = 0; c < latent.cols(); ++c)
    CHECK(t.val(pooled)(0, c) == doctest::Approx(0.1 * static_cast<double>(c)));
}

TEST_CASE("permuting token-semantic filters permutes class logits") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 19);
  auto clip = noise_clip(960, 16000, 12);
  auto fe = make_frontend(clip, cfg);

  auto logits_of = [&](SeparatorModel<double>& m) {
    Tape<double> t(false);
    int id = build_classifier_graph(t, m.encoder, fe);
    std::vector<double> out;
    for (int64_t c = 0; c < t.val(id).cols(); ++c) out.push_back(t.val(id)(0, c));
    return out;
  };
  auto base = logits_of(model);

  // Swap classes 1 and 3 in the head parameters.
  auto& conv = model.encoder.token_sem.conv;
  for (int64_t r = 0; r < conv.w.value.rows(); ++r)
    std::swap(conv.w.value(r, 1), conv.w.value(r, 3));
  std::swap(conv.b.value(0, 1), conv.b.value(0, 3));
  auto permuted = logits_of(model);
  CHECK(permuted[1] == doctest::Approx(base[3]).epsilon(1e-12));
  CHECK(permuted[3] == doctest::Approx(base[1]).epsilon(1e-12));
  CHECK(permuted[0] == doctest::Approx(base[0]).epsilon(1e-12));
  CHECK(permuted[2] == doctest::Approx(base[2]).epsilon(1e-12));
}

TEST_CASE("graph istft matches the dsp istft") {
  ModelConfig cfg = ModelConfig::tiny();
  SeparatorModel<double> model(cfg, 23);
  auto clip = noise_clip(960, 16000, 14);
  auto fe = make_frontend(clip, cfg);

  // Push the clip's own band features through the graph istft.
  Tape<double> t(false);
  int bands = t.constant(band_tensor<double>(fe.bands));
  int wave = model.bands_to_waveform(t, bands, fe);
  auto spec = dsp::band_unsplit(fe.bands);
  auto ref = dsp::istft(spec, clip.length(), clip.sample_rate);
  for (int64_t i = 0; i < t.val(wave).size(); ++i)
    CHECK(t.val(wave)[i] == doctest::Approx(ref.samples[static_cast<size_t>(i)])
                                .epsilon(1e-10));
}

TEST_CASE("validation errors are listed") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.n_bands = 63;       // not divisible by patch*8
  cfg.stft_hop = 9999;    // bad framing
  cfg.heads = {3, 4, 8, 16};  // 3 does not divide 8
  auto errs = cfg.validation_errors();
  CHECK(errs.size() >= 3);
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
