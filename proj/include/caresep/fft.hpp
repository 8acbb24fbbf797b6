#pragma once

#include <complex>
#include <stdexcept>
#include <vector>

namespace caresep {

inline bool is_power_of_two(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 complex FFT. Sizes here are small (<= 4096) so
// a plan-free implementation is plenty; keeping it local also pins the
// numerics for byte-stable artifacts.
template <typename T>
void fft_inplace(std::vector<std::complex<T>>& a, bool inverse) {
  const size_t n = a.size();
  if (!is_power_of_two(static_cast<int64_t>(n)))
    throw std::invalid_argument("fft size must be a power of two");
  // Bit-reversal permutation.
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const T sign = inverse ? T(1) : T(-1);
  for (size_t len = 2; len <= n; len <<= 1) {
    const T ang = sign * T(2) * T(3.14159265358979323846L) / static_cast<T>(len);
    const std::complex<T> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<T> w(1);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<T> u = a[i + k];
        std::complex<T> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const T inv_n = T(1) / static_cast<T>(n);
    for (auto& x : a) x *= inv_n;
  }
}

// Forward real FFT: n real samples -> n/2+1 complex bins (unnormalized).
template <typename T>
void rfft(const T* x, int64_t n, std::complex<T>* bins) {
  std::vector<std::complex<T>> buf(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] = std::complex<T>(x[i], T(0));
  fft_inplace(buf, false);
  for (int64_t k = 0; k <= n / 2; ++k) bins[k] = buf[static_cast<size_t>(k)];
}

// Inverse of rfft: n/2+1 bins -> n real samples (includes the 1/n factor).
template <typename T>
void irfft(const std::complex<T>* bins, int64_t n, T* x) {
  std::vector<std::complex<T>> buf(static_cast<size_t>(n));
  for (int64_t k = 0; k <= n / 2; ++k) buf[static_cast<size_t>(k)] = bins[k];
  for (int64_t k = n / 2 + 1; k < n; ++k)
    buf[static_cast<size_t>(k)] = std::conj(bins[n - k]);
  fft_inplace(buf, true);
  for (int64_t i = 0; i < n; ++i) x[i] = buf[static_cast<size_t>(i)].real();
}

}  // namespace caresep
