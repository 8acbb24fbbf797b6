#pragma once

#include <array>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "caresep/dsp.hpp"
#include "caresep/nn_layers.hpp"

namespace caresep {

struct ModelConfig {
  int latent_dim = 8;  // D; embedding width is 8*D
  int patch_size = 4;
  int window_tokens = 4;
  std::vector<int> enc_depths{1, 1, 1};
  int connector_depth = 1;
  std::vector<int> dec_depths{1, 1, 1};
  std::vector<int> heads{2, 4, 8, 16};  // encoder stages 0..2 + connector level
  int n_classes = 4;
  int stft_window = 1024;
  int stft_hop = 320;
  int n_bands = 64;
  int sample_rate = 16000;
  bool mask_mode = true;       // sigmoid mask on band features vs direct regression
  bool inject_encoder = false; // alternative wiring: queries also enter encoder blocks
  int token_sem_kernel = 3;

  int embed_dim() const { return 8 * latent_dim; }
  int stage_channels(int stage) const { return latent_dim << stage; }  // 0..3
  int up_channels() const { return 2 * latent_dim; }

  std::vector<std::string> validation_errors() const {
    std::vector<std::string> errs;
    auto bad = [&](const std::string& m) { errs.push_back(m); };
    if (latent_dim < 1) bad("latent_dim must be >= 1");
    if (patch_size < 1) bad("patch_size must be >= 1");
    if (enc_depths.size() != 3) bad("enc_depths must have 3 entries");
    if (dec_depths.size() != 3) bad("dec_depths must have 3 entries");
    if (connector_depth < 1) bad("connector_depth must be >= 1");
    if (heads.size() != 4) bad("heads must have 4 entries");
    for (size_t s = 0; s < heads.size() && s < 4; ++s)
      if (heads[s] < 1 || stage_channels(static_cast<int>(s)) % heads[s] != 0)
        bad("heads[" + std::to_string(s) + "] must divide stage channels");
    if (n_classes < 1) bad("n_classes must be >= 1");
    if (!is_power_of_two(stft_window) || stft_window < 2 * stft_hop || stft_hop < 1)
      bad("stft window/hop must be power-of-two window >= 2*hop");
    if (n_bands < 1 || n_bands > stft_window / 2 + 1) bad("n_bands out of range");
    if (n_bands % (patch_size * 8) != 0)
      bad("n_bands must be divisible by patch_size*8 for the merge chain");
    if (sample_rate < 1) bad("sample_rate must be positive");
    if (token_sem_kernel < 1 || token_sem_kernel % 2 == 0) bad("token_sem_kernel must be odd");
    return errs;
  }

  void validate() const {
    auto errs = validation_errors();
    if (errs.empty()) return;
    std::ostringstream os;
    os << "invalid model config:";
    for (const auto& e : errs) os << "\n  - " << e;
    throw std::invalid_argument(os.str());
  }

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig paper(int d = 96) {
    ModelConfig c;
    c.latent_dim = d;
    c.patch_size = 4;
    c.window_tokens = 8;
    c.enc_depths = {2, 2, 6};
    c.connector_depth = 1;
    c.dec_depths = {2, 2, 2};
    c.heads = {3, 6, 12, 24};
    c.n_classes = 527;
    c.stft_window = 1024;
    c.stft_hop = 320;
    c.n_bands = 64;
    return c;
  }

  // Small enough for 64-bit finite-difference checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.latent_dim = 4;
    c.patch_size = 2;
    c.window_tokens = 2;
    c.heads = {1, 2, 4, 8};
    c.n_classes = 4;
    c.stft_window = 256;
    c.stft_hop = 64;
    c.n_bands = 16;
    return c;
  }
};

struct QueryEmbedding {
  std::vector<double> values;
  enum class Source { kAnchorDerived, kExternal };
  Source source = Source::kAnchorDerived;
};

namespace nn {

inline int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

// Band features of a clip plus the zero-padded token-cell geometry.
struct Frontend {
  dsp::BandSpec bands;   // original frames
  int64_t t_frames = 0;  // bands.time_frames
  int64_t t_padded = 0;
  Grid cells;            // (t_padded, n_bands)
  int64_t out_length = 0;
};

inline Frontend make_frontend(const AudioClip& clip, const ModelConfig& cfg) {
  Frontend f;
  auto spec = dsp::stft(clip, cfg.stft_window, cfg.stft_hop);
  f.bands = dsp::mel_band_split(spec, cfg.n_bands, cfg.sample_rate);
  f.t_frames = f.bands.time_frames;
  f.t_padded = round_up(f.t_frames, static_cast<int64_t>(cfg.patch_size) * 8);
  f.cells = Grid{f.t_padded, cfg.n_bands};
  f.out_length = clip.length();
  return f;
}

template <typename T>
Tensor<T> band_tensor_padded(const dsp::BandSpec& b, int64_t t_padded) {
  Tensor<T> out(t_padded * b.n_bands, b.channel_features);
  for (int64_t t = 0; t < b.time_frames; ++t)
    for (int64_t band = 0; band < b.n_bands; ++band)
      for (int64_t c = 0; c < b.channel_features; ++c)
        out(t * b.n_bands + band, c) = static_cast<T>(b.at(t, band, c));
  return out;
}

template <typename T>
Tensor<T> band_tensor(const dsp::BandSpec& b) {
  return band_tensor_padded<T>(b, b.time_frames);
}

// Rows t < t_frames of the padded cell layout.
inline IndexVec crop_time_map(int64_t t_frames, int64_t t_padded, int64_t n_bands,
                              int64_t ch) {
  (void)t_padded;
  auto idx = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(t_frames * n_bands * ch));
  for (int64_t i = 0; i < t_frames * n_bands * ch; ++i) (*idx)[static_cast<size_t>(i)] = i;
  return idx;
}

// Band features [T*B, cf] -> interleaved one-sided spectra [T, 2F].
inline IndexVec band_unsplit_graph_map(const dsp::BandMap& map, int64_t t_frames,
                                       int64_t cf) {
  const int64_t F = map.freq_bins;
  const int64_t B = map.n_bands();
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(t_frames * 2 * F));
  for (int64_t t = 0; t < t_frames; ++t)
    for (int64_t f = 0; f < F; ++f) {
      const int64_t band = map.bin_to_band[static_cast<size_t>(f)];
      const int64_t slot = f - map.start[static_cast<size_t>(band)];
      const int64_t src = (t * B + band) * cf + 2 * slot;
      (*idx)[static_cast<size_t>(t * 2 * F + 2 * f)] = src;
      (*idx)[static_cast<size_t>(t * 2 * F + 2 * f + 1)] = src + 1;
    }
  return idx;
}

template <typename T>
struct PatchEmbed {
  int64_t patch = 0;
  int64_t in_ch = 0;
  Linear<T> proj;
  LayerNorm<T> norm;

  PatchEmbed() = default;
  PatchEmbed(const std::string& name, int64_t patch_size, int64_t channels, int64_t dim,
             Rng& rng)
      : patch(patch_size),
        in_ch(channels),
        proj(name + ".proj", patch_size * patch_size * channels, dim, rng),
        norm(name + ".norm", dim) {}

  // cells: (padded) cell grid; returns token node and token grid.
  std::pair<int, Grid> forward(Tape<T>& t, int cells_node, Grid cells) {
    Grid tokens{cells.h / patch, cells.w / patch};
    int x = t.gather(cells_node, patchify_map(cells, patch, in_ch), tokens.tokens(),
                     patch * patch * in_ch);
    x = proj.forward(t, x);
    return {norm.forward(t, x), tokens};
  }
  void collect(std::vector<Parameter<T>*>& out) {
    proj.collect(out);
    norm.collect(out);
  }
};

template <typename T>
struct PatchMerge {
  int64_t channels = 0;
  LayerNorm<T> norm;
  Linear<T> reduce;

  PatchMerge() = default;
  PatchMerge(const std::string& name, int64_t ch, Rng& rng)
      : channels(ch),
        norm(name + ".norm", 4 * ch),
        reduce(name + ".reduce", 4 * ch, 2 * ch, rng, /*bias=*/false) {}

  std::pair<int, Grid> forward(Tape<T>& t, int x, Grid g) {
    if (g.h % 2 != 0 || g.w % 2 != 0)
      throw std::invalid_argument("patch_merge requires even grid sides");
    Grid out{g.h / 2, g.w / 2};
    int m = t.gather(x, patch_merge_map(g, channels), out.tokens(), 4 * channels);
    return {reduce.forward(t, norm.forward(t, m)), out};
  }
  void collect(std::vector<Parameter<T>*>& out) {
    norm.collect(out);
    reduce.collect(out);
  }
};

template <typename T>
struct PatchExpand {
  int64_t channels = 0;
  Linear<T> expand;

  PatchExpand() = default;
  PatchExpand(const std::string& name, int64_t ch, Rng& rng)
      : channels(ch), expand(name + ".expand", ch, 2 * ch, rng, /*bias=*/false) {}

  std::pair<int, Grid> forward(Tape<T>& t, int x, Grid g) {
    int e = expand.forward(t, x);
    Grid out{g.h * 2, g.w * 2};
    int y = t.gather(e, pixel_shuffle_map(g, 2, channels / 2), out.tokens(), channels / 2);
    return {y, out};
  }
  void collect(std::vector<Parameter<T>*>& out) { expand.collect(out); }
};

// Convolution over the band-token axis feeding per-class maps, averaged over
// all tokens into clip-level logits.
template <typename T>
struct TokenSemantic {
  int64_t channels = 0;
  int64_t kernel = 3;
  Linear<T> conv;

  TokenSemantic() = default;
  TokenSemantic(const std::string& name, int64_t ch, int64_t n_classes, int64_t k, Rng& rng)
      : channels(ch), kernel(k), conv(name + ".conv", k * ch, n_classes, rng) {}

  int forward(Tape<T>& t, int x, Grid g) {
    int cols = t.gather(x, band_conv_map(g, channels, kernel), g.tokens(),
                        kernel * channels);
    int maps = conv.forward(t, cols);  // [tokens, n_classes]
    return t.mean_rows(maps);
  }
  void collect(std::vector<Parameter<T>*>& out) { conv.collect(out); }
};

// Shared encoder: patch embed, three block+merge stages, connector blocks and
// the token-semantic tagging head. Also the standalone classifier network.
template <typename T>
struct EncoderStack {
  ModelConfig cfg;
  std::string prefix;
  PatchEmbed<T> patch_embed;
  std::array<std::vector<SwinBlock<T>>, 3> stages;
  std::array<PatchMerge<T>, 3> merges;
  std::vector<SwinBlock<T>> connector;
  TokenSemantic<T> token_sem;

  EncoderStack() = default;
  EncoderStack(const ModelConfig& c, int64_t channel_features, const std::string& pfx,
               Rng& rng)
      : cfg(c), prefix(pfx) {
    patch_embed = PatchEmbed<T>(pfx + ".patch_embed", c.patch_size, channel_features,
                                c.latent_dim, rng);
    for (int s = 0; s < 3; ++s) {
      const int64_t ch = c.stage_channels(s);
      for (int bidx = 0; bidx < c.enc_depths[static_cast<size_t>(s)]; ++bidx)
        stages[static_cast<size_t>(s)].emplace_back(
            pfx + ".stage" + std::to_string(s) + ".block" + std::to_string(bidx), ch,
            c.heads[static_cast<size_t>(s)], c.window_tokens, bidx % 2 == 1, rng);
      merges[static_cast<size_t>(s)] =
          PatchMerge<T>(pfx + ".merge" + std::to_string(s), ch, rng);
    }
    for (int bidx = 0; bidx < c.connector_depth; ++bidx)
      connector.emplace_back(pfx + ".connector.block" + std::to_string(bidx),
                             c.embed_dim(), c.heads[3], c.window_tokens, bidx % 2 == 1,
                             rng);
    token_sem = TokenSemantic<T>(pfx + ".token_sem", c.embed_dim(), c.n_classes,
                                 c.token_sem_kernel, rng);
  }

  struct EncodeOut {
    std::array<int, 3> skips{};
    std::array<Grid, 3> skip_grids{};
    int bottleneck = -1;
    Grid grid;
  };

  // enc_injections: optional per-stage injection vectors (alternative wiring).
  EncodeOut encode(Tape<T>& t, int cells_node, Grid cells,
                   const std::array<int, 3>* enc_injections = nullptr) {
    EncodeOut out;
    auto [x, g] = patch_embed.forward(t, cells_node, cells);
    for (int s = 0; s < 3; ++s) {
      const int inj = enc_injections ? (*enc_injections)[static_cast<size_t>(s)] : -1;
      for (auto& block : stages[static_cast<size_t>(s)]) x = block.forward(t, x, g, inj);
      out.skips[static_cast<size_t>(s)] = x;
      out.skip_grids[static_cast<size_t>(s)] = g;
      auto [m, mg] = merges[static_cast<size_t>(s)].forward(t, x, g);
      x = m;
      g = mg;
    }
    out.bottleneck = x;
    out.grid = g;
    return out;
  }

  struct ConnectorOut {
    int latent = -1;
    int pooled = -1;
    int class_logits = -1;
    Grid grid;
  };

  ConnectorOut connector_forward(Tape<T>& t, int bottleneck, Grid g, int injection = -1) {
    ConnectorOut out;
    int x = bottleneck;
    for (auto& block : connector) x = block.forward(t, x, g, injection);
    out.latent = x;
    out.grid = g;
    out.pooled = t.mean_rows(x);
    out.class_logits = token_sem.forward(t, x, g);
    return out;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    patch_embed.collect(out);
    for (int s = 0; s < 3; ++s) {
      for (auto& b : stages[static_cast<size_t>(s)]) b.collect(out);
      merges[static_cast<size_t>(s)].collect(out);
    }
    for (auto& b : connector) b.collect(out);
    token_sem.collect(out);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    collect(out);
    return out;
  }
};

template <typename T>
struct DecoderStage {
  PatchExpand<T> expand;
  Linear<T> fuse;
  std::vector<SwinBlock<T>> blocks;

  DecoderStage() = default;
  DecoderStage(const std::string& name, int64_t in_ch, int64_t heads, int depth,
               int64_t window, Rng& rng)
      : expand(name + ".expand", in_ch, rng),
        fuse(name + ".fuse", in_ch, in_ch / 2, rng) {
    for (int bidx = 0; bidx < depth; ++bidx)
      blocks.emplace_back(name + ".block" + std::to_string(bidx), in_ch / 2, heads,
                          window, bidx % 2 == 1, rng);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    expand.collect(out);
    fuse.collect(out);
    for (auto& b : blocks) b.collect(out);
  }
};

// Intermediate node handles of one separation pass.
struct SeparationTrace {
  int class_logits = -1;
  int connector_latent = -1;
  int connector_pooled = -1;
  int est_bands = -1;
  int mask = -1;  // mask-mode only
  int waveform = -1;
  Grid connector_grid;
};

// The separation network: shared encoder + connector, query injections, and
// the symmetric decoder ending in the band-feature output head.
template <typename T>
class SeparatorModel {
 public:
  ModelConfig cfg;
  std::string prefix;
  std::shared_ptr<const dsp::BandMap> band_map;
  int64_t channel_features = 0;
  EncoderStack<T> encoder;
  Linear<T> conn_inj;
  std::array<Linear<T>, 3> dec_inj;
  std::vector<Linear<T>> enc_inj;  // present when cfg.inject_encoder
  std::array<DecoderStage<T>, 3> dec_stages;
  Linear<T> patch_up;
  Linear<T> head;

  SeparatorModel(const ModelConfig& c, uint64_t seed, std::string pfx = "sep")
      : cfg(c), prefix(std::move(pfx)) {
    cfg.validate();
    Rng rng(seed);
    band_map = dsp::make_band_map(cfg.stft_window / 2 + 1, cfg.n_bands, cfg.sample_rate);
    channel_features = 2 * band_map->max_width();
    encoder = EncoderStack<T>(cfg, channel_features, prefix + ".enc", rng);
    conn_inj = Linear<T>(prefix + ".inj.conn", cfg.embed_dim(), cfg.embed_dim(), rng);
    for (int s = 0; s < 3; ++s) {
      const int64_t ch = cfg.stage_channels(2 - s);  // decoder stage channels 4D,2D,D
      dec_inj[static_cast<size_t>(s)] =
          Linear<T>(prefix + ".inj.dec" + std::to_string(s), cfg.embed_dim(), ch, rng);
      dec_stages[static_cast<size_t>(s)] = DecoderStage<T>(
          prefix + ".dec.stage" + std::to_string(s), 2 * ch,
          cfg.heads[static_cast<size_t>(2 - s)], cfg.dec_depths[static_cast<size_t>(s)],
          cfg.window_tokens, rng);
    }
    if (cfg.inject_encoder)
      for (int s = 0; s < 3; ++s)
        enc_inj.emplace_back(prefix + ".inj.enc" + std::to_string(s), cfg.embed_dim(),
                             cfg.stage_channels(s), rng);
    patch_up = Linear<T>(prefix + ".dec.patch_up", cfg.latent_dim,
                         cfg.patch_size * cfg.patch_size * cfg.up_channels(), rng);
    // Zero init: an untrained mask-mode model passes exactly sigmoid(0)=0.5.
    head = Linear<T>(prefix + ".dec.head", cfg.up_channels(), channel_features, rng,
                     /*bias=*/true, /*zero_init=*/true);
  }

  void collect_params(std::vector<Parameter<T>*>& out) {
    encoder.collect(out);
    conn_inj.collect(out);
    for (auto& l : dec_inj) l.collect(out);
    for (auto& l : enc_inj) l.collect(out);
    for (auto& s : dec_stages) s.collect(out);
    patch_up.collect(out);
    head.collect(out);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    collect_params(out);
    return out;
  }

  // Decoder: three (expand -> concat skip -> fuse -> blocks) stages, patch-up
  // and the output head. Returns band features on the original (unpadded)
  // frame grid.
  int decoder_forward(Tape<T>& t, int latent, Grid latent_grid,
                      const std::array<int, 3>& skips,
                      const std::array<Grid, 3>& skip_grids, int query_node,
                      const Frontend& fe, SeparationTrace* trace = nullptr) {
    int x = latent;
    Grid g = latent_grid;
    for (int s = 0; s < 3; ++s) {
      auto [e, eg] = dec_stages[static_cast<size_t>(s)].expand.forward(t, x, g);
      const int skip = skips[static_cast<size_t>(2 - s)];
      if (!(skip_grids[static_cast<size_t>(2 - s)] == eg))
        throw std::invalid_argument("decoder skip grid mismatch");
      int cat = t.concat_cols(e, skip);
      x = dec_stages[static_cast<size_t>(s)].fuse.forward(t, cat);
      g = eg;
      const int inj = query_node >= 0
                          ? dec_inj[static_cast<size_t>(s)].forward(t, query_node)
                          : -1;
      for (auto& block : dec_stages[static_cast<size_t>(s)].blocks)
        x = block.forward(t, x, g, inj);
    }
    // patch-up back to cell resolution, crop padding, project to features.
    int up = patch_up.forward(t, x);
    Grid cells{g.h * cfg.patch_size, g.w * cfg.patch_size};
    int shuffled = t.gather(up, pixel_shuffle_map(g, cfg.patch_size, cfg.up_channels()),
                            cells.tokens(), cfg.up_channels());
    int cropped = t.gather(
        shuffled, crop_time_map(fe.t_frames, fe.t_padded, cfg.n_bands, cfg.up_channels()),
        fe.t_frames * cfg.n_bands, cfg.up_channels());
    int feat = head.forward(t, cropped);
    if (cfg.mask_mode) {
      int mask = t.sigmoid(feat);
      if (trace) trace->mask = mask;
      int mix = t.constant(band_tensor<T>(fe.bands));
      return t.mul(mask, mix);
    }
    return feat;
  }

  // Full pass: band features -> encoder -> connector -> decoder -> waveform.
  // query_node < 0 runs the network query-free.
  int build_separation(Tape<T>& t, const Frontend& fe, int query_node,
                       SeparationTrace* trace = nullptr) {
    int cells_node = t.constant(band_tensor_padded<T>(fe.bands, fe.t_padded));
    std::array<int, 3> einj{-1, -1, -1};
    if (cfg.inject_encoder && query_node >= 0)
      for (int s = 0; s < 3; ++s)
        einj[static_cast<size_t>(s)] = enc_inj[static_cast<size_t>(s)].forward(t, query_node);
    auto enc = encoder.encode(t, cells_node, fe.cells,
                              cfg.inject_encoder && query_node >= 0 ? &einj : nullptr);
    const int cinj = query_node >= 0 ? conn_inj.forward(t, query_node) : -1;
    auto conn = encoder.connector_forward(t, enc.bottleneck, enc.grid, cinj);
    if (trace) {
      trace->class_logits = conn.class_logits;
      trace->connector_latent = conn.latent;
      trace->connector_pooled = conn.pooled;
      trace->connector_grid = conn.grid;
    }
    int est_bands = decoder_forward(t, conn.latent, conn.grid, enc.skips, enc.skip_grids,
                                    query_node, fe, trace);
    if (trace) trace->est_bands = est_bands;
    int wave = bands_to_waveform(t, est_bands, fe);
    if (trace) trace->waveform = wave;
    return wave;
  }

  // Differentiable iSTFT chain: unsplit -> windowed inverse FFT -> overlap
  // add -> per-sample normalization -> crop.
  int bands_to_waveform(Tape<T>& t, int est_bands, const Frontend& fe) {
    const int64_t F = band_map->freq_bins;
    const int64_t T_frames = fe.t_frames;
    const int w = cfg.stft_window, hop = cfg.stft_hop;
    int spec = t.gather(est_bands, band_unsplit_graph_map(*band_map, T_frames, channel_features),
                        T_frames, 2 * F);
    auto window = window_vec();
    int frames = t.irfft_windowed(spec, w, window);

    const int64_t pad = w / 2;
    const int64_t padded_len = (T_frames - 1) * hop + w;
    auto dst = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(T_frames * w));
    for (int64_t fr = 0; fr < T_frames; ++fr)
      for (int64_t n = 0; n < w; ++n)
        (*dst)[static_cast<size_t>(fr * w + n)] = fr * hop + n;
    int acc = t.scatter_add(frames, dst, 1, padded_len);

    Tensor<T> inv(1, padded_len);
    {
      std::vector<double> wsum(static_cast<size_t>(padded_len), 0.0);
      auto wd = dsp::hann_window(w);
      for (int64_t fr = 0; fr < T_frames; ++fr)
        for (int64_t n = 0; n < w; ++n)
          wsum[static_cast<size_t>(fr * hop + n)] += wd[static_cast<size_t>(n)] * wd[static_cast<size_t>(n)];
      for (int64_t i = 0; i < padded_len; ++i)
        inv[i] = wsum[static_cast<size_t>(i)] > 0.0
                     ? static_cast<T>(1.0 / wsum[static_cast<size_t>(i)])
                     : T(0);
    }
    int norm = t.mul(acc, t.constant(std::move(inv)));

    auto crop = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(fe.out_length));
    for (int64_t i = 0; i < fe.out_length; ++i) (*crop)[static_cast<size_t>(i)] = pad + i;
    return t.gather(norm, crop, 1, fe.out_length);
  }

  // Materialized intermediate values of one inference pass.
  struct Outputs {
    std::vector<double> connector_pooled;
    std::vector<double> class_logits;
  };

  // Inference entry point per the system contract.
  AudioClip separate(const AudioClip& mixture, const QueryEmbedding& query,
                     Outputs* outputs = nullptr) {
    if (static_cast<int>(query.values.size()) != cfg.embed_dim())
      throw std::invalid_argument("query length != 8D");
    Tape<T> t(false);
    Frontend fe = make_frontend(mixture, cfg);
    Tensor<T> q(1, cfg.embed_dim());
    for (int64_t i = 0; i < q.size(); ++i)
      q[i] = static_cast<T>(query.values[static_cast<size_t>(i)]);
    SeparationTrace trace;
    int wave = build_separation(t, fe, t.constant(std::move(q)), &trace);
    if (outputs) {
      const auto& pooled = t.val(trace.connector_pooled);
      outputs->connector_pooled.assign(pooled.data(), pooled.data() + pooled.size());
      const auto& logits = t.val(trace.class_logits);
      outputs->class_logits.assign(logits.data(), logits.data() + logits.size());
    }
    AudioClip out;
    out.sample_rate = mixture.sample_rate;
    out.clip_id = mixture.clip_id + ".sep";
    out.samples.resize(static_cast<size_t>(fe.out_length));
    const auto& v = t.val(wave);
    for (int64_t i = 0; i < fe.out_length; ++i)
      out.samples[static_cast<size_t>(i)] = static_cast<double>(v[i]);
    return out;
  }

  std::shared_ptr<const std::vector<T>> window_vec() const {
    auto wd = dsp::hann_window(cfg.stft_window);
    auto out = std::make_shared<std::vector<T>>(wd.size());
    for (size_t i = 0; i < wd.size(); ++i) (*out)[i] = static_cast<T>(wd[i]);
    return out;
  }
};

// Pooled connector output of a query-free pass: the query-embedding graph.
template <typename T>
int build_query_graph(Tape<T>& t, EncoderStack<T>& enc, const Frontend& fe) {
  int cells_node = t.constant(band_tensor_padded<T>(fe.bands, fe.t_padded));
  auto e = enc.encode(t, cells_node, fe.cells);
  auto conn = enc.connector_forward(t, e.bottleneck, e.grid);
  return conn.pooled;
}

// Class logits of a query-free pass: the tagging/classifier graph.
template <typename T>
int build_classifier_graph(Tape<T>& t, EncoderStack<T>& enc, const Frontend& fe) {
  int cells_node = t.constant(band_tensor_padded<T>(fe.bands, fe.t_padded));
  auto e = enc.encode(t, cells_node, fe.cells);
  auto conn = enc.connector_forward(t, e.bottleneck, e.grid);
  return conn.class_logits;
}

// Materialized classifier scores for one clip.
template <typename T>
std::vector<double> classifier_logits(EncoderStack<T>& enc, const AudioClip& clip) {
  Tape<T> t(false);
  auto fe = make_frontend(clip, enc.cfg);
  int id = build_classifier_graph(t, enc, fe);
  const auto& v = t.val(id);
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace nn
}  // namespace caresep
