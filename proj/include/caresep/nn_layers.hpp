#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "caresep/rng.hpp"
#include "caresep/tape.hpp"

namespace caresep::nn {

struct Grid {
  int64_t h = 0;
  int64_t w = 0;
  int64_t tokens() const { return h * w; }
  bool operator==(const Grid&) const = default;
};

template <typename T>
Tensor<T> normal_init(int64_t r, int64_t c, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(r, c);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
Tensor<T> const_init(int64_t r, int64_t c, T v) {
  Tensor<T> t(r, c);
  t.fill(v);
  return t;
}

template <typename T>
struct Linear {
  Parameter<T> w, b;
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, int64_t in, int64_t out, Rng& rng, bool bias = true,
         bool zero_init = false)
      : w(name + ".w", zero_init ? const_init<T>(in, out, T(0)) : normal_init<T>(in, out, rng)),
        b(name + ".b", const_init<T>(1, out, T(0))),
        has_bias(bias) {}

  int forward(Tape<T>& t, int x) {
    int y = t.matmul(x, t.param(w));
    return has_bias ? t.add_rowvec(y, t.param(b)) : y;
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gain, bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int64_t dim)
      : gain(name + ".g", const_init<T>(1, dim, T(1))),
        bias(name + ".b", const_init<T>(1, dim, T(0))) {}

  int forward(Tape<T>& t, int x) { return t.layer_norm(x, t.param(gain), t.param(bias)); }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

// ---- token-grid index maps (row-major [h*w, C] layout) ----------------------

using IndexVec = std::shared_ptr<const std::vector<int64_t>>;

// Cyclic shift by -shift combined with window partitioning: output rows are
// window-major groups of window*window tokens.
inline IndexVec window_partition_map(Grid g, int64_t window, int64_t shift, int64_t ch) {
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(g.tokens() * ch));
  const int64_t wh = g.h / window, ww = g.w / window;
  int64_t out = 0;
  for (int64_t a = 0; a < wh; ++a)
    for (int64_t b = 0; b < ww; ++b)
      for (int64_t i = 0; i < window; ++i)
        for (int64_t j = 0; j < window; ++j) {
          const int64_t sh = (a * window + i + shift) % g.h;
          const int64_t sw = (b * window + j + shift) % g.w;
          const int64_t src_row = sh * g.w + sw;
          for (int64_t c = 0; c < ch; ++c)
            (*idx)[static_cast<size_t>(out++)] = src_row * ch + c;
        }
  return idx;
}

// Inverse of window_partition_map (including the shift).
inline IndexVec window_unpartition_map(Grid g, int64_t window, int64_t shift, int64_t ch) {
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(g.tokens() * ch));
  const int64_t ww = g.w / window;
  const int64_t S = window * window;
  int64_t out = 0;
  for (int64_t h = 0; h < g.h; ++h)
    for (int64_t w = 0; w < g.w; ++w) {
      const int64_t a = (h - shift % g.h + g.h) % g.h;
      const int64_t b = (w - shift % g.w + g.w) % g.w;
      const int64_t src_row = (a / window * ww + b / window) * S +
                              (a % window) * window + (b % window);
      for (int64_t c = 0; c < ch; ++c)
        (*idx)[static_cast<size_t>(out++)] = src_row * ch + c;
    }
  return idx;
}

// Additive attention mask forbidding cross-region pairs in shifted windows.
// Regions follow the standard three-slice construction on the rolled canvas.
template <typename T>
std::shared_ptr<Tensor<T>> shifted_window_mask(Grid g, int64_t window, int64_t shift) {
  const int64_t S = window * window;
  const int64_t n_windows = (g.h / window) * (g.w / window);
  std::vector<int> region(static_cast<size_t>(g.tokens()));
  auto slice_id = [&](int64_t x, int64_t extent) {
    if (x < extent - window) return 0;
    if (x < extent - shift) return 1;
    return 2;
  };
  for (int64_t h = 0; h < g.h; ++h)
    for (int64_t w = 0; w < g.w; ++w)
      region[static_cast<size_t>(h * g.w + w)] = slice_id(h, g.h) * 3 + slice_id(w, g.w);

  auto mask = std::make_shared<Tensor<T>>(n_windows * S, S);
  const int64_t ww = g.w / window;
  for (int64_t a = 0; a < g.h / window; ++a)
    for (int64_t b = 0; b < ww; ++b) {
      const int64_t win = a * ww + b;
      for (int64_t i = 0; i < S; ++i) {
        const int64_t hi = a * window + i / window, wi = b * window + i % window;
        for (int64_t j = 0; j < S; ++j) {
          const int64_t hj = a * window + j / window, wj = b * window + j % window;
          if (region[static_cast<size_t>(hi * g.w + wi)] !=
              region[static_cast<size_t>(hj * g.w + wj)])
            (*mask)(win * S + i, j) = T(-1e9);
        }
      }
    }
  return mask;
}

// Relative-position index into a (2*nominal-1)^2 bias table; valid for any
// effective window <= nominal.
inline std::shared_ptr<const std::vector<int32_t>> relative_index(int64_t window,
                                                                  int64_t nominal) {
  const int64_t S = window * window;
  auto idx = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(S * S));
  const int64_t span = 2 * nominal - 1;
  for (int64_t i = 0; i < S; ++i)
    for (int64_t j = 0; j < S; ++j) {
      const int64_t dh = i / window - j / window + nominal - 1;
      const int64_t dw = i % window - j % window + nominal - 1;
      (*idx)[static_cast<size_t>(i * S + j)] = static_cast<int32_t>(dh * span + dw);
    }
  return idx;
}

// 2x2 token neighborhoods -> one token with 4C channels.
inline IndexVec patch_merge_map(Grid g, int64_t ch) {
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(g.tokens() * ch));
  int64_t out = 0;
  for (int64_t h = 0; h < g.h / 2; ++h)
    for (int64_t w = 0; w < g.w / 2; ++w)
      for (int64_t q = 0; q < 4; ++q) {
        const int64_t src_row = (2 * h + q / 2) * g.w + (2 * w + q % 2);
        for (int64_t c = 0; c < ch; ++c)
          (*idx)[static_cast<size_t>(out++)] = src_row * ch + c;
      }
  return idx;
}

// Token with factor^2 * ch channels -> factor x factor tokens with ch channels.
inline IndexVec pixel_shuffle_map(Grid g, int64_t factor, int64_t ch_out) {
  auto idx = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(g.tokens() * factor * factor * ch_out));
  const int64_t ch_in = factor * factor * ch_out;
  int64_t out = 0;
  for (int64_t h = 0; h < g.h * factor; ++h)
    for (int64_t w = 0; w < g.w * factor; ++w) {
      const int64_t src_row = (h / factor) * g.w + (w / factor);
      const int64_t q = (h % factor) * factor + (w % factor);
      for (int64_t c = 0; c < ch_out; ++c)
        (*idx)[static_cast<size_t>(out++)] = src_row * ch_in + q * ch_out + c;
    }
  return idx;
}

// im2col over the w (band) axis with zero padding, kernel k.
inline IndexVec band_conv_map(Grid g, int64_t ch, int64_t k) {
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(g.tokens() * k * ch));
  const int64_t half = k / 2;
  int64_t out = 0;
  for (int64_t h = 0; h < g.h; ++h)
    for (int64_t w = 0; w < g.w; ++w)
      for (int64_t o = -half; o <= half; ++o) {
        const int64_t wb = w + o;
        for (int64_t c = 0; c < ch; ++c)
          (*idx)[static_cast<size_t>(out++)] =
              (wb >= 0 && wb < g.w) ? (h * g.w + wb) * ch + c : -1;
      }
  return idx;
}

// Non-overlapping patch x patch cells -> tokens with patch^2 * ch channels.
inline IndexVec patchify_map(Grid cells, int64_t patch, int64_t ch) {
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(cells.tokens() * ch));
  int64_t out = 0;
  for (int64_t h = 0; h < cells.h / patch; ++h)
    for (int64_t w = 0; w < cells.w / patch; ++w)
      for (int64_t i = 0; i < patch; ++i)
        for (int64_t j = 0; j < patch; ++j) {
          const int64_t src_row = (h * patch + i) * cells.w + (w * patch + j);
          for (int64_t c = 0; c < ch; ++c)
            (*idx)[static_cast<size_t>(out++)] = src_row * ch + c;
        }
  return idx;
}

// ---- layers -----------------------------------------------------------------

// Pre-norm transformer block with windowed attention, alternating plain and
// cyclically shifted windows by block parity. An optional injection vector is
// broadcast-added before the block body.
template <typename T>
struct SwinBlock {
  int64_t channels = 0;
  int64_t heads = 0;
  int64_t nominal_window = 0;
  bool shifted = false;
  LayerNorm<T> norm1, norm2;
  Linear<T> qkv, proj, fc1, fc2;
  Parameter<T> rel_bias;

  SwinBlock() = default;
  SwinBlock(const std::string& name, int64_t ch, int64_t n_heads, int64_t window,
            bool shift, Rng& rng)
      : channels(ch),
        heads(n_heads),
        nominal_window(window),
        shifted(shift),
        norm1(name + ".norm1", ch),
        norm2(name + ".norm2", ch),
        qkv(name + ".qkv", ch, 3 * ch, rng),
        proj(name + ".proj", ch, ch, rng),
        fc1(name + ".fc1", ch, 4 * ch, rng),
        fc2(name + ".fc2", 4 * ch, ch, rng),
        rel_bias(name + ".rel_bias",
                 normal_init<T>((2 * window - 1) * (2 * window - 1), n_heads, rng)) {
    if (ch % n_heads != 0) throw std::invalid_argument("channels not divisible by heads");
  }

  int forward(Tape<T>& t, int x, Grid g, int injection = -1,
              std::shared_ptr<Tensor<T>> probs_capture = nullptr) {
    const int64_t eff = std::min<int64_t>(nominal_window, std::min(g.h, g.w));
    if (g.h % eff != 0 || g.w % eff != 0)
      throw std::invalid_argument("token grid not divisible by window");
    const int64_t shift = (shifted && eff > 1 && eff < std::min(g.h, g.w)) ? eff / 2 : 0;

    if (injection >= 0) x = t.add_rowvec(x, injection);

    int h = norm1.forward(t, x);
    auto part = window_partition_map(g, eff, shift, channels);
    int win = t.gather(h, part, g.tokens(), channels);
    int qkv_out = qkv.forward(t, win);

    typename Tape<T>::AttnMeta meta;
    meta.n_windows = (g.h / eff) * (g.w / eff);
    meta.window_tokens = eff * eff;
    meta.heads = heads;
    meta.head_dim = channels / heads;
    meta.rel_index = relative_index(eff, nominal_window);
    if (shift > 0) meta.mask = shifted_window_mask<T>(g, eff, shift);
    meta.probs_capture = std::move(probs_capture);

    int att = t.window_attention(qkv_out, t.param(rel_bias), meta);
    int un = t.gather(att, window_unpartition_map(g, eff, shift, channels), g.tokens(),
                      channels);
    x = t.add(x, proj.forward(t, un));

    int f = norm2.forward(t, x);
    f = fc2.forward(t, t.gelu(fc1.forward(t, f)));
    return t.add(x, f);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    norm1.collect(out);
    norm2.collect(out);
    qkv.collect(out);
    proj.collect(out);
    fc1.collect(out);
    fc2.collect(out);
    out.push_back(&rel_bias);
  }
};

}  // namespace caresep::nn
