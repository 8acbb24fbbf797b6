#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace caresep {

// Deterministic RNG with pinned output. std::mt19937_64 is specified
// bit-for-bit by the standard; the distribution transforms are our own so
// generated streams never depend on library internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return state_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(state_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n), rejection-sampled to avoid modulo bias.
  uint64_t below(uint64_t n) {
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = state_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (fixed evaluation order, no caching).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Stable seed derivation for per-item streams (splitmix64 finalizer).
  static uint64_t derive(uint64_t root, uint64_t stream, uint64_t item = 0) {
    uint64_t z = root + 0x9e3779b97f4a7c15ULL * (stream + 1) +
                 0xbf58476d1ce4e5b9ULL * (item + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 state_;
};

}  // namespace caresep
