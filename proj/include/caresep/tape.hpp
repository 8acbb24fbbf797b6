#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "caresep/fft.hpp"
#include "caresep/tensor.hpp"

namespace caresep::nn {

// Named trainable array. Gradients accumulate across Tape::backward calls
// until zero_grad.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.zero(); }
};

// Reverse-mode autodiff over 2-D tensors. Nodes are recorded in evaluation
// order; backward() walks the tape in reverse and accumulates parameter
// gradients. A tape built with grad_enabled=false records values only.
template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&, Node&)> backward;
    bool needs_grad = false;
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor<T>& grad_of(int id) { return ensure_grad(nodes_[static_cast<size_t>(id)]); }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  // ---- leafs -------------------------------------------------------------

  int constant(Tensor<T> v) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = false;
    return push(std::move(n));
  }

  int param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    Node n;
    n.value = p.value;
    n.needs_grad = grad_enabled_;
    int id = push(std::move(n));
    param_nodes_.emplace(&p, id);
    param_order_.push_back(&p);
    return id;
  }

  // Detached copy: value flows, gradient does not.
  int stop_gradient(int x) { return constant(val(x)); }

  // ---- linear algebra ----------------------------------------------------

  int matmul(int x, int w) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    if (xv.cols() != wv.rows()) throw std::invalid_argument("matmul shape mismatch");
    Tensor<T> out(xv.rows(), wv.cols());
    out.mat().noalias() = xv.mat() * wv.mat();
    return record(std::move(out), {x, w}, [x, w](Tape& t, Node& n) {
      const auto& g = n.grad;
      if (t.needs_grad(x))
        t.grad_of(x).mat().noalias() += g.mat() * t.val(w).mat().transpose();
      if (t.needs_grad(w))
        t.grad_of(w).mat().noalias() += t.val(x).mat().transpose() * g.mat();
    });
  }

  // y = x + b, b broadcast over rows (bias or injected query vector).
  int add_rowvec(int x, int b) {
    const auto& xv = val(x);
    const auto& bv = val(b);
    if (bv.rows() != 1 || bv.cols() != xv.cols())
      throw std::invalid_argument("add_rowvec shape mismatch");
    Tensor<T> out = xv;
    for (int64_t r = 0; r < out.rows(); ++r)
      for (int64_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
    return record(std::move(out), {x, b}, [x, b](Tape& t, Node& n) {
      if (t.needs_grad(x)) t.grad_of(x).add_inplace(n.grad);
      if (t.needs_grad(b)) {
        auto& gb = t.grad_of(b);
        for (int64_t r = 0; r < n.grad.rows(); ++r)
          for (int64_t c = 0; c < n.grad.cols(); ++c) gb(0, c) += n.grad(r, c);
      }
    });
  }

  int add(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("add shape mismatch");
    Tensor<T> out = av;
    out.add_inplace(bv);
    return record(std::move(out), {a, b}, [a, b](Tape& t, Node& n) {
      if (t.needs_grad(a)) t.grad_of(a).add_inplace(n.grad);
      if (t.needs_grad(b)) t.grad_of(b).add_inplace(n.grad);
    });
  }

  int sub(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("sub shape mismatch");
    Tensor<T> out = av;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return record(std::move(out), {a, b}, [a, b](Tape& t, Node& n) {
      if (t.needs_grad(a)) t.grad_of(a).add_inplace(n.grad);
      if (t.needs_grad(b)) {
        auto& gb = t.grad_of(b);
        for (int64_t i = 0; i < n.grad.size(); ++i) gb[i] -= n.grad[i];
      }
    });
  }

  int mul(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("mul shape mismatch");
    Tensor<T> out = av;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return record(std::move(out), {a, b}, [a, b](Tape& t, Node& n) {
      if (t.needs_grad(a)) {
        auto& ga = t.grad_of(a);
        const auto& bv2 = t.val(b);
        for (int64_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * bv2[i];
      }
      if (t.needs_grad(b)) {
        auto& gb = t.grad_of(b);
        const auto& av2 = t.val(a);
        for (int64_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i] * av2[i];
      }
    });
  }

  int concat_cols(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols row mismatch");
    Tensor<T> out(av.rows(), av.cols() + bv.cols());
    for (int64_t r = 0; r < av.rows(); ++r) {
      for (int64_t c = 0; c < av.cols(); ++c) out(r, c) = av(r, c);
      for (int64_t c = 0; c < bv.cols(); ++c) out(r, av.cols() + c) = bv(r, c);
    }
    const int64_t ac = av.cols();
    return record(std::move(out), {a, b}, [a, b, ac](Tape& t, Node& n) {
      if (t.needs_grad(a)) {
        auto& ga = t.grad_of(a);
        for (int64_t r = 0; r < ga.rows(); ++r)
          for (int64_t c = 0; c < ga.cols(); ++c) ga(r, c) += n.grad(r, c);
      }
      if (t.needs_grad(b)) {
        auto& gb = t.grad_of(b);
        for (int64_t r = 0; r < gb.rows(); ++r)
          for (int64_t c = 0; c < gb.cols(); ++c) gb(r, c) += n.grad(r, ac + c);
      }
    });
  }

  int scale(int x, T s) {
    Tensor<T> out = val(x);
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    return record(std::move(out), {x}, [x, s](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (int64_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] * s;
    });
  }

  int add_scalar(int x, T s) {
    Tensor<T> out = val(x);
    for (int64_t i = 0; i < out.size(); ++i) out[i] += s;
    return record(std::move(out), {x}, [x](Tape& t, Node& n) {
      if (t.needs_grad(x)) t.grad_of(x).add_inplace(n.grad);
    });
  }

  // ---- data movement -----------------------------------------------------

  // y.flat[i] = src[i] >= 0 ? x.flat[src[i]] : 0. Covers padding, cropping,
  // window partitioning, patch rearranges and band unsplit.
  int gather(int x, std::shared_ptr<const std::vector<int64_t>> src, int64_t rows,
             int64_t cols) {
    const auto& xv = val(x);
    if (static_cast<int64_t>(src->size()) != rows * cols)
      throw std::invalid_argument("gather index size mismatch");
    Tensor<T> out(rows, cols);
    const auto& idx = *src;
    for (int64_t i = 0; i < out.size(); ++i)
      out[i] = idx[static_cast<size_t>(i)] >= 0 ? xv[idx[static_cast<size_t>(i)]] : T(0);
    return record(std::move(out), {x}, [x, src](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& idx = *src;
      for (int64_t i = 0; i < n.grad.size(); ++i)
        if (idx[static_cast<size_t>(i)] >= 0) gx[idx[static_cast<size_t>(i)]] += n.grad[i];
    });
  }

  // y.flat[dst[i]] += x.flat[i] (overlap-add style). dst entries must be valid.
  int scatter_add(int x, std::shared_ptr<const std::vector<int64_t>> dst, int64_t rows,
                  int64_t cols) {
    const auto& xv = val(x);
    if (static_cast<int64_t>(dst->size()) != xv.size())
      throw std::invalid_argument("scatter index size mismatch");
    Tensor<T> out(rows, cols);
    const auto& idx = *dst;
    for (int64_t i = 0; i < xv.size(); ++i) out[idx[static_cast<size_t>(i)]] += xv[i];
    return record(std::move(out), {x}, [x, dst](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& idx = *dst;
      for (int64_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[idx[static_cast<size_t>(i)]];
    });
  }

  // ---- nonlinearities and norms -------------------------------------------

  int layer_norm(int x, int gain, int bias, T eps = T(1e-5)) {
    const auto& xv = val(x);
    const int64_t rows = xv.rows(), cols = xv.cols();
    auto xhat = std::make_shared<Tensor<T>>(rows, cols);
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    Tensor<T> out(rows, cols);
    const auto& gv = val(gain);
    const auto& bv = val(bias);
    for (int64_t r = 0; r < rows; ++r) {
      T mean = 0;
      for (int64_t c = 0; c < cols; ++c) mean += xv(r, c);
      mean /= static_cast<T>(cols);
      T var = 0;
      for (int64_t c = 0; c < cols; ++c) {
        T d = xv(r, c) - mean;
        var += d * d;
      }
      var /= static_cast<T>(cols);
      T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(r)] = is;
      for (int64_t c = 0; c < cols; ++c) {
        T h = (xv(r, c) - mean) * is;
        (*xhat)(r, c) = h;
        out(r, c) = h * gv(0, c) + bv(0, c);
      }
    }
    return record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat, inv_std](Tape& t, Node& n) {
                    const int64_t rows = n.grad.rows(), cols = n.grad.cols();
                    const auto& gv = t.val(gain);
                    for (int64_t r = 0; r < rows; ++r) {
                      T sum_gh = 0, sum_ghh = 0;
                      for (int64_t c = 0; c < cols; ++c) {
                        T gh = n.grad(r, c) * gv(0, c);
                        sum_gh += gh;
                        sum_ghh += gh * (*xhat)(r, c);
                      }
                      if (t.needs_grad(x)) {
                        auto& gx = t.grad_of(x);
                        const T is = (*inv_std)[static_cast<size_t>(r)];
                        for (int64_t c = 0; c < cols; ++c) {
                          T gh = n.grad(r, c) * gv(0, c);
                          gx(r, c) += is * (gh - (sum_gh + (*xhat)(r, c) * sum_ghh) /
                                                     static_cast<T>(cols));
                        }
                      }
                    }
                    if (t.needs_grad(gain)) {
                      auto& gg = t.grad_of(gain);
                      for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < cols; ++c)
                          gg(0, c) += n.grad(r, c) * (*xhat)(r, c);
                    }
                    if (t.needs_grad(bias)) {
                      auto& gb = t.grad_of(bias);
                      for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < cols; ++c) gb(0, c) += n.grad(r, c);
                    }
                  });
  }

  int gelu(int x) {
    const auto& xv = val(x);
    Tensor<T> out = xv;
    for (int64_t i = 0; i < out.size(); ++i) {
      T v = xv[i];
      out[i] = T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2)));
    }
    return record(std::move(out), {x}, [x](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& xv2 = t.val(x);
      constexpr T kInvSqrt2Pi = T(0.3989422804014327);
      for (int64_t i = 0; i < n.grad.size(); ++i) {
        T v = xv2[i];
        T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
        T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
        gx[i] += n.grad[i] * (cdf + v * pdf);
      }
    });
  }

  int sigmoid(int x) {
    const auto& xv = val(x);
    auto y = std::make_shared<Tensor<T>>(xv.rows(), xv.cols());
    for (int64_t i = 0; i < xv.size(); ++i) (*y)[i] = T(1) / (T(1) + std::exp(-xv[i]));
    Tensor<T> out = *y;
    return record(std::move(out), {x}, [x, y](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (int64_t i = 0; i < n.grad.size(); ++i) {
        T s = (*y)[i];
        gx[i] += n.grad[i] * s * (T(1) - s);
      }
    });
  }

  int softmax_rows(int x) {
    const auto& xv = val(x);
    auto y = std::make_shared<Tensor<T>>(xv.rows(), xv.cols());
    for (int64_t r = 0; r < xv.rows(); ++r) {
      T mx = xv(r, 0);
      for (int64_t c = 1; c < xv.cols(); ++c) mx = std::max(mx, xv(r, c));
      T sum = 0;
      for (int64_t c = 0; c < xv.cols(); ++c) {
        T e = std::exp(xv(r, c) - mx);
        (*y)(r, c) = e;
        sum += e;
      }
      for (int64_t c = 0; c < xv.cols(); ++c) (*y)(r, c) /= sum;
    }
    Tensor<T> out = *y;
    return record(std::move(out), {x}, [x, y](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (int64_t r = 0; r < n.grad.rows(); ++r) {
        T dot = 0;
        for (int64_t c = 0; c < n.grad.cols(); ++c) dot += n.grad(r, c) * (*y)(r, c);
        for (int64_t c = 0; c < n.grad.cols(); ++c)
          gx(r, c) += (*y)(r, c) * (n.grad(r, c) - dot);
      }
    });
  }

  // ---- reductions and scalar math ----------------------------------------

  int mean_rows(int x) {
    const auto& xv = val(x);
    Tensor<T> out(1, xv.cols());
    for (int64_t r = 0; r < xv.rows(); ++r)
      for (int64_t c = 0; c < xv.cols(); ++c) out(0, c) += xv(r, c);
    for (int64_t c = 0; c < xv.cols(); ++c) out(0, c) /= static_cast<T>(xv.rows());
    const int64_t rows = xv.rows();
    return record(std::move(out), {x}, [x, rows](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < n.grad.cols(); ++c)
          gx(r, c) += n.grad(0, c) / static_cast<T>(rows);
    });
  }

  int sum_all(int x) {
    const auto& xv = val(x);
    T s = 0;
    for (int64_t i = 0; i < xv.size(); ++i) s += xv[i];
    return record(Tensor<T>::scalar(s), {x}, [x](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      for (int64_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[0];
    });
  }

  int mean_all(int x) {
    const int64_t count = val(x).size();
    return scale(sum_all(x), T(1) / static_cast<T>(count));
  }

  int abs(int x) {
    const auto& xv = val(x);
    Tensor<T> out = xv;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::abs(out[i]);
    return record(std::move(out), {x}, [x](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& xv2 = t.val(x);
      for (int64_t i = 0; i < n.grad.size(); ++i)
        gx[i] += n.grad[i] * (xv2[i] > T(0) ? T(1) : xv2[i] < T(0) ? T(-1) : T(0));
    });
  }

  // Natural log, elementwise (used on strictly positive scalars).
  int log(int x) {
    const auto& xv = val(x);
    Tensor<T> out = xv;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
    return record(std::move(out), {x}, [x](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& xv2 = t.val(x);
      for (int64_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] / xv2[i];
    });
  }

  int clamp(int x, T lo, T hi) {
    const auto& xv = val(x);
    Tensor<T> out = xv;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
    return record(std::move(out), {x}, [x, lo, hi](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      const auto& xv2 = t.val(x);
      for (int64_t i = 0; i < n.grad.size(); ++i)
        if (xv2[i] >= lo && xv2[i] <= hi) gx[i] += n.grad[i];
    });
  }

  // Mean binary cross-entropy with logits (stable log-sum-exp form).
  int bce_with_logits(int logits, const Tensor<T>& targets) {
    const auto& zv = val(logits);
    if (!zv.same_shape(targets)) throw std::invalid_argument("bce shape mismatch");
    T loss = 0;
    for (int64_t i = 0; i < zv.size(); ++i) {
      T z = zv[i];
      loss += std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<T>(zv.size());
    auto tgt = std::make_shared<Tensor<T>>(targets);
    return record(Tensor<T>::scalar(loss), {logits}, [logits, tgt](Tape& t, Node& n) {
      if (!t.needs_grad(logits)) return;
      auto& gz = t.grad_of(logits);
      const auto& zv2 = t.val(logits);
      const T inv = T(1) / static_cast<T>(zv2.size());
      for (int64_t i = 0; i < zv2.size(); ++i) {
        T s = T(1) / (T(1) + std::exp(-zv2[i]));
        gz[i] += n.grad[0] * (s - (*tgt)[i]) * inv;
      }
    });
  }

  // ---- fused windowed multi-head self-attention ----------------------------
  //
  // qkv rows are window-major: R = n_windows * window_tokens, columns hold
  // [q | k | v] each of width heads*head_dim. rel_index maps (i, j) within a
  // window to a row of the relative-position-bias table; mask (optional,
  // [R x window_tokens]) is added to the scores before the softmax.
  struct AttnMeta {
    int64_t n_windows = 0;
    int64_t window_tokens = 0;
    int64_t heads = 0;
    int64_t head_dim = 0;
    std::shared_ptr<const std::vector<int32_t>> rel_index;  // size S*S
    std::shared_ptr<const Tensor<T>> mask;                  // nullable
    std::shared_ptr<Tensor<T>> probs_capture;               // nullable, filled on forward
  };

  int window_attention(int qkv, int rel_bias, const AttnMeta& meta) {
    const auto& qv = val(qkv);
    const int64_t S = meta.window_tokens, H = meta.heads, D = meta.head_dim;
    const int64_t C = H * D;
    const int64_t R = meta.n_windows * S;
    if (qv.rows() != R || qv.cols() != 3 * C)
      throw std::invalid_argument("window_attention qkv shape mismatch");
    const auto& rb = val(rel_bias);
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(D));

    auto probs = std::make_shared<Tensor<T>>(meta.n_windows * H * S, S);
    Tensor<T> out(R, C);
    for (int64_t w = 0; w < meta.n_windows; ++w) {
      const int64_t row0 = w * S;
      for (int64_t h = 0; h < H; ++h) {
        const int64_t q_off = h * D, k_off = C + h * D, v_off = 2 * C + h * D;
        const int64_t p_row0 = (w * H + h) * S;
        for (int64_t i = 0; i < S; ++i) {
          T* prow = &(*probs)(p_row0 + i, 0);
          T mx = -std::numeric_limits<T>::infinity();
          for (int64_t j = 0; j < S; ++j) {
            T s = 0;
            for (int64_t d = 0; d < D; ++d)
              s += qv(row0 + i, q_off + d) * qv(row0 + j, k_off + d);
            s *= inv_sqrt_d;
            s += rb((*meta.rel_index)[static_cast<size_t>(i * S + j)], h);
            if (meta.mask) s += (*meta.mask)(row0 + i, j);
            prow[j] = s;
            mx = std::max(mx, s);
          }
          T sum = 0;
          for (int64_t j = 0; j < S; ++j) {
            prow[j] = std::exp(prow[j] - mx);
            sum += prow[j];
          }
          for (int64_t j = 0; j < S; ++j) prow[j] /= sum;
          for (int64_t d = 0; d < D; ++d) {
            T acc = 0;
            for (int64_t j = 0; j < S; ++j) acc += prow[j] * qv(row0 + j, v_off + d);
            out(row0 + i, h * D + d) = acc;
          }
        }
      }
    }
    if (meta.probs_capture) *meta.probs_capture = *probs;

    AttnMeta m = meta;
    return record(std::move(out), {qkv, rel_bias},
                  [qkv, rel_bias, m, probs, inv_sqrt_d](Tape& t, Node& n) {
                    const int64_t S = m.window_tokens, H = m.heads, D = m.head_dim;
                    const int64_t C = H * D;
                    const auto& qv = t.val(qkv);
                    const auto& g = n.grad;
                    const bool need_x = t.needs_grad(qkv);
                    const bool need_rb = t.needs_grad(rel_bias);
                    std::vector<T> dp(static_cast<size_t>(S)), ds(static_cast<size_t>(S));
                    for (int64_t w = 0; w < m.n_windows; ++w) {
                      const int64_t row0 = w * S;
                      for (int64_t h = 0; h < H; ++h) {
                        const int64_t q_off = h * D, k_off = C + h * D, v_off = 2 * C + h * D;
                        const int64_t p_row0 = (w * H + h) * S;
                        for (int64_t i = 0; i < S; ++i) {
                          const T* prow = &(*probs)(p_row0 + i, 0);
                          // dp_j = dy_i . v_j ; row-softmax backward.
                          T dot = 0;
                          for (int64_t j = 0; j < S; ++j) {
                            T a = 0;
                            for (int64_t d = 0; d < D; ++d)
                              a += g(row0 + i, h * D + d) * qv(row0 + j, v_off + d);
                            dp[static_cast<size_t>(j)] = a;
                            dot += a * prow[j];
                          }
                          for (int64_t j = 0; j < S; ++j)
                            ds[static_cast<size_t>(j)] =
                                prow[j] * (dp[static_cast<size_t>(j)] - dot);
                          if (need_rb) {
                            auto& grb = t.grad_of(rel_bias);
                            for (int64_t j = 0; j < S; ++j)
                              grb((*m.rel_index)[static_cast<size_t>(i * S + j)], h) +=
                                  ds[static_cast<size_t>(j)];
                          }
                          if (need_x) {
                            auto& gx = t.grad_of(qkv);
                            for (int64_t j = 0; j < S; ++j) {
                              const T dsj = ds[static_cast<size_t>(j)] * inv_sqrt_d;
                              for (int64_t d = 0; d < D; ++d) {
                                gx(row0 + i, q_off + d) += dsj * qv(row0 + j, k_off + d);
                                gx(row0 + j, k_off + d) += dsj * qv(row0 + i, q_off + d);
                              }
                              // dv_j += p_ij * dy_i
                              for (int64_t d = 0; d < D; ++d)
                                gx(row0 + j, v_off + d) += prow[j] * g(row0 + i, h * D + d);
                            }
                          }
                        }
                      }
                    }
                  });
  }

  // ---- inverse STFT as differentiable ops ----------------------------------

  // x rows are frames of interleaved one-sided bins [re0 im0 re1 im1 ...];
  // output rows are windowed time-domain frames of length fft_size. The
  // imaginary parts of bins 0 and N/2 do not reach the real output, so their
  // gradients are zero.
  int irfft_windowed(int x, int fft_size, std::shared_ptr<const std::vector<T>> window) {
    const auto& xv = val(x);
    const int64_t bins = fft_size / 2 + 1;
    if (xv.cols() != 2 * bins) throw std::invalid_argument("irfft bin count mismatch");
    Tensor<T> out(xv.rows(), fft_size);
    std::vector<std::complex<T>> spec(static_cast<size_t>(bins));
    std::vector<T> frame(static_cast<size_t>(fft_size));
    for (int64_t r = 0; r < xv.rows(); ++r) {
      for (int64_t k = 0; k < bins; ++k)
        spec[static_cast<size_t>(k)] = std::complex<T>(xv(r, 2 * k), xv(r, 2 * k + 1));
      spec[0].imag(T(0));
      spec[static_cast<size_t>(bins - 1)].imag(T(0));
      irfft(spec.data(), fft_size, frame.data());
      for (int64_t i = 0; i < fft_size; ++i)
        out(r, i) = frame[static_cast<size_t>(i)] * (*window)[static_cast<size_t>(i)];
    }
    return record(std::move(out), {x}, [x, fft_size, window](Tape& t, Node& n) {
      if (!t.needs_grad(x)) return;
      auto& gx = t.grad_of(x);
      const int64_t bins = fft_size / 2 + 1;
      std::vector<T> gw(static_cast<size_t>(fft_size));
      std::vector<std::complex<T>> G(static_cast<size_t>(bins));
      const T two_over_n = T(2) / static_cast<T>(fft_size);
      const T one_over_n = T(1) / static_cast<T>(fft_size);
      for (int64_t r = 0; r < n.grad.rows(); ++r) {
        for (int64_t i = 0; i < fft_size; ++i)
          gw[static_cast<size_t>(i)] = n.grad(r, i) * (*window)[static_cast<size_t>(i)];
        rfft(gw.data(), fft_size, G.data());
        for (int64_t k = 0; k < bins; ++k) {
          const bool edge = (k == 0 || k == bins - 1);
          gx(r, 2 * k) += (edge ? one_over_n : two_over_n) * G[static_cast<size_t>(k)].real();
          if (!edge) gx(r, 2 * k + 1) += two_over_n * G[static_cast<size_t>(k)].imag();
        }
      }
    });
  }

  // ---- backward ------------------------------------------------------------

  void backward(int loss) {
    if (!grad_enabled_) throw std::logic_error("backward on a no-grad tape");
    auto& ln = nodes_[static_cast<size_t>(loss)];
    if (ln.value.size() != 1) throw std::invalid_argument("backward expects a scalar loss");
    ensure_grad(ln)[0] = T(1);
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.backward && !n.grad.empty()) n.backward(*this, n);
    }
    for (auto* p : param_order_) {
      auto& node = nodes_[static_cast<size_t>(param_nodes_[p])];
      if (!node.grad.empty()) p->grad.add_inplace(node.grad);
    }
  }

 private:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int record(Tensor<T> value, std::initializer_list<int> parents,
             std::function<void(Tape&, Node&)> back) {
    Node n;
    n.value = std::move(value);
    for (int p : parents) n.needs_grad = n.needs_grad || nodes_[static_cast<size_t>(p)].needs_grad;
    n.needs_grad = n.needs_grad && grad_enabled_;
    if (n.needs_grad) n.backward = std::move(back);
    return push(std::move(n));
  }

  Tensor<T>& ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter<T>*, int> param_nodes_;
  std::vector<Parameter<T>*> param_order_;
};

}  // namespace caresep::nn
