#pragma once

#include <complex>
#include <memory>
#include <tuple>
#include <vector>

#include "caresep/audio.hpp"

namespace caresep::dsp {

// Spectrogram frames of a centered STFT. values is row-major
// [time_frames x freq_bins] with freq_bins == window_size/2 + 1.
struct ComplexSpec {
  std::vector<std::complex<double>> values;
  int64_t time_frames = 0;
  int64_t freq_bins = 0;
  int window_size = 0;
  int hop_size = 0;

  std::complex<double>& at(int64_t t, int64_t f) {
    return values[static_cast<size_t>(t * freq_bins + f)];
  }
  std::complex<double> at(int64_t t, int64_t f) const {
    return values[static_cast<size_t>(t * freq_bins + f)];
  }
};

// Contiguous partition of frequency bins into mel-spaced bands.
// start[b]..start[b+1] are the bins of band b; widths are non-decreasing.
struct BandMap {
  std::vector<int64_t> start;  // size n_bands + 1, start[0]=0, back()=freq_bins
  std::vector<int64_t> bin_to_band;
  int64_t freq_bins = 0;
  int sample_rate = 0;

  int64_t n_bands() const { return static_cast<int64_t>(start.size()) - 1; }
  int64_t width(int64_t b) const { return start[static_cast<size_t>(b + 1)] - start[static_cast<size_t>(b)]; }
  int64_t max_width() const;
};

// Band-split features: real array [time_frames x n_bands x channel_features]
// where channel_features = 2 * max band width (re/im per bin slot, zero
// padded to the widest band). valid[b*ch + c] marks live slots of band b.
struct BandSpec {
  std::vector<double> values;
  int64_t time_frames = 0;
  int64_t n_bands = 0;
  int64_t channel_features = 0;
  std::shared_ptr<const BandMap> band_map;
  int window_size = 0;
  int hop_size = 0;

  double& at(int64_t t, int64_t b, int64_t c) {
    return values[static_cast<size_t>((t * n_bands + b) * channel_features + c)];
  }
  double at(int64_t t, int64_t b, int64_t c) const {
    return values[static_cast<size_t>((t * n_bands + b) * channel_features + c)];
  }
};

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Periodic Hann analysis window.
std::vector<double> hann_window(int window_size);

// Expected frame count of the centered framing: floor(length/hop) + 1.
int64_t stft_frame_count(int64_t length, int hop_size);

// Centered STFT with reflection padding of window/2 on each side.
// Requires power-of-two window >= 2*hop and clip length >= window.
ComplexSpec stft(const AudioClip& clip, int window_size, int hop_size);

// Exact inverse of stft (per-sample window-square normalization), cropped to
// out_length which must be consistent with the frame count.
AudioClip istft(const ComplexSpec& spec, int64_t out_length, int sample_rate);

// Partition of bins into n_bands contiguous groups with boundaries equally
// spaced on the mel scale, every band non-empty, widths non-decreasing.
std::shared_ptr<const BandMap> make_band_map(int64_t freq_bins, int64_t n_bands,
                                             int sample_rate);

BandSpec mel_band_split(const ComplexSpec& spec, int64_t n_bands, int sample_rate);

// Exact inverse of mel_band_split on its image (padding slots discarded).
ComplexSpec band_unsplit(const BandSpec& bands);

struct MixResult {
  AudioClip mixture;
  AudioClip scaled_a1;
  AudioClip scaled_a2;
};

// Scales a2 to a1's energy, sums, and applies a joint peak guard at 0.999 so
// mixture == scaled_a1 + scaled_a2 always holds sample-wise. Unequal lengths
// are cropped to the shorter clip. The seed is reserved for future gain
// augmentation and does not affect the current outputs.
MixResult mix_with_energy_norm(const AudioClip& a1, const AudioClip& a2,
                               uint64_t seed);

}  // namespace caresep::dsp
