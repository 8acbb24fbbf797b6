#include "caresep/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "caresep/fft.hpp"

namespace caresep::dsp {

namespace {

// Reflection (symmetric, edge excluded) index into [0, n).
int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

void check_framing(int window_size, int hop_size) {
  if (window_size <= 0 || hop_size <= 0 || !is_power_of_two(window_size) ||
      window_size < 2 * hop_size)
    throw std::invalid_argument("invalid framing");
}

}  // namespace

int64_t BandMap::max_width() const {
  int64_t w = 0;
  for (int64_t b = 0; b < n_bands(); ++b) w = std::max(w, width(b));
  return w;
}

std::vector<double> hann_window(int window_size) {
  std::vector<double> w(static_cast<size_t>(window_size));
  for (int n = 0; n < window_size; ++n)
    w[static_cast<size_t>(n)] =
        0.5 * (1.0 - std::cos(2.0 * M_PI * n / window_size));
  return w;
}

int64_t stft_frame_count(int64_t length, int hop_size) {
  return length / hop_size + 1;
}

ComplexSpec stft(const AudioClip& clip, int window_size, int hop_size) {
  check_framing(window_size, hop_size);
  const int64_t len = clip.length();
  if (len < window_size) throw std::invalid_argument("input too short");

  const int64_t pad = window_size / 2;
  const int64_t frames = stft_frame_count(len, hop_size);
  const int64_t bins = window_size / 2 + 1;
  const std::vector<double> window = hann_window(window_size);

  ComplexSpec spec;
  spec.values.resize(static_cast<size_t>(frames * bins));
  spec.time_frames = frames;
  spec.freq_bins = bins;
  spec.window_size = window_size;
  spec.hop_size = hop_size;

  std::vector<double> frame(static_cast<size_t>(window_size));
  for (int64_t t = 0; t < frames; ++t) {
    const int64_t start = t * hop_size - pad;
    for (int64_t n = 0; n < window_size; ++n) {
      const double s = clip.samples[static_cast<size_t>(reflect_index(start + n, len))];
      frame[static_cast<size_t>(n)] = s * window[static_cast<size_t>(n)];
    }
    rfft(frame.data(), window_size, &spec.values[static_cast<size_t>(t * bins)]);
  }
  return spec;
}

AudioClip istft(const ComplexSpec& spec, int64_t out_length, int sample_rate) {
  check_framing(spec.window_size, spec.hop_size);
  if (spec.time_frames <= 0) throw std::invalid_argument("istft: empty spectrogram");
  if (stft_frame_count(out_length, spec.hop_size) != spec.time_frames)
    throw std::invalid_argument("istft: out_length inconsistent with frame count");

  const int64_t w = spec.window_size;
  const int64_t pad = w / 2;
  const std::vector<double> window = hann_window(spec.window_size);

  std::vector<double> acc(static_cast<size_t>(out_length + 2 * pad), 0.0);
  std::vector<double> wsum(acc.size(), 0.0);
  std::vector<double> frame(static_cast<size_t>(w));
  for (int64_t t = 0; t < spec.time_frames; ++t) {
    irfft(&spec.values[static_cast<size_t>(t * spec.freq_bins)], w, frame.data());
    const int64_t start = t * spec.hop_size;  // in padded coordinates
    for (int64_t n = 0; n < w; ++n) {
      const double win = window[static_cast<size_t>(n)];
      acc[static_cast<size_t>(start + n)] += frame[static_cast<size_t>(n)] * win;
      wsum[static_cast<size_t>(start + n)] += win * win;
    }
  }

  AudioClip out;
  out.sample_rate = sample_rate;
  out.samples.resize(static_cast<size_t>(out_length));
  for (int64_t i = 0; i < out_length; ++i) {
    const double s = wsum[static_cast<size_t>(i + pad)];
    out.samples[static_cast<size_t>(i)] =
        s > 0.0 ? acc[static_cast<size_t>(i + pad)] / s : 0.0;
  }
  return out;
}

std::shared_ptr<const BandMap> make_band_map(int64_t freq_bins, int64_t n_bands,
                                             int sample_rate) {
  if (n_bands < 1) throw std::invalid_argument("band split: n_bands must be >= 1");
  if (n_bands > freq_bins)
    throw std::invalid_argument("band split: n_bands exceeds freq_bins");
  if (sample_rate <= 0) throw std::invalid_argument("band split: bad sample rate");

  // Ideal (real-valued) band widths in bins from equal spacing on the mel
  // axis over [0, sr/2]. Allocation: one bin minimum per band, remainder by
  // largest fractional part, then a non-decreasing sort (mel widths already
  // grow with frequency; the sort absorbs integer-rounding jitter).
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  const double bin_hz = (sample_rate / 2.0) / static_cast<double>(freq_bins - 1 > 0 ? freq_bins - 1 : 1);
  std::vector<double> ideal(static_cast<size_t>(n_bands));
  double prev_edge_bin = 0.0;
  for (int64_t b = 1; b <= n_bands; ++b) {
    const double edge_hz = mel_to_hz(mel_hi * static_cast<double>(b) / static_cast<double>(n_bands));
    const double edge_bin = b == n_bands ? static_cast<double>(freq_bins) : edge_hz / bin_hz;
    ideal[static_cast<size_t>(b - 1)] = edge_bin - prev_edge_bin;
    prev_edge_bin = edge_bin;
  }

  std::vector<int64_t> widths(static_cast<size_t>(n_bands), 1);
  int64_t remaining = freq_bins - n_bands;
  std::vector<double> frac(static_cast<size_t>(n_bands));
  for (int64_t b = 0; b < n_bands; ++b) {
    const int64_t extra = std::max<int64_t>(0, static_cast<int64_t>(std::floor(ideal[static_cast<size_t>(b)])) - 1);
    const int64_t take = std::min(extra, remaining);
    widths[static_cast<size_t>(b)] += take;
    remaining -= take;
    frac[static_cast<size_t>(b)] = ideal[static_cast<size_t>(b)] - std::floor(ideal[static_cast<size_t>(b)]);
  }
  // Distribute the remainder to the largest fractional parts (ties toward
  // higher bands, matching the widening mel spacing).
  while (remaining > 0) {
    int64_t best = 0;
    for (int64_t b = 1; b < n_bands; ++b)
      if (frac[static_cast<size_t>(b)] >= frac[static_cast<size_t>(best)]) best = b;
    widths[static_cast<size_t>(best)] += 1;
    frac[static_cast<size_t>(best)] -= 1.0;
    --remaining;
  }
  std::sort(widths.begin(), widths.end());

  auto map = std::make_shared<BandMap>();
  map->freq_bins = freq_bins;
  map->sample_rate = sample_rate;
  map->start.resize(static_cast<size_t>(n_bands + 1));
  map->start[0] = 0;
  for (int64_t b = 0; b < n_bands; ++b)
    map->start[static_cast<size_t>(b + 1)] =
        map->start[static_cast<size_t>(b)] + widths[static_cast<size_t>(b)];
  map->bin_to_band.resize(static_cast<size_t>(freq_bins));
  for (int64_t b = 0; b < n_bands; ++b)
    for (int64_t k = map->start[static_cast<size_t>(b)]; k < map->start[static_cast<size_t>(b + 1)]; ++k)
      map->bin_to_band[static_cast<size_t>(k)] = b;
  return map;
}

BandSpec mel_band_split(const ComplexSpec& spec, int64_t n_bands, int sample_rate) {
  auto map = make_band_map(spec.freq_bins, n_bands, sample_rate);
  const int64_t ch = 2 * map->max_width();

  BandSpec bands;
  bands.time_frames = spec.time_frames;
  bands.n_bands = n_bands;
  bands.channel_features = ch;
  bands.band_map = map;
  bands.window_size = spec.window_size;
  bands.hop_size = spec.hop_size;
  bands.values.assign(static_cast<size_t>(spec.time_frames * n_bands * ch), 0.0);

  for (int64_t t = 0; t < spec.time_frames; ++t) {
    for (int64_t b = 0; b < n_bands; ++b) {
      const int64_t s = map->start[static_cast<size_t>(b)];
      const int64_t w = map->width(b);
      for (int64_t j = 0; j < w; ++j) {
        const std::complex<double> v = spec.at(t, s + j);
        bands.at(t, b, 2 * j) = v.real();
        bands.at(t, b, 2 * j + 1) = v.imag();
      }
    }
  }
  return bands;
}

ComplexSpec band_unsplit(const BandSpec& bands) {
  if (!bands.band_map) throw std::invalid_argument("band_unsplit: missing band map");
  const BandMap& map = *bands.band_map;
  if (map.n_bands() != bands.n_bands)
    throw std::invalid_argument("band_unsplit: band map mismatch");

  ComplexSpec spec;
  spec.time_frames = bands.time_frames;
  spec.freq_bins = map.freq_bins;
  spec.window_size = bands.window_size;
  spec.hop_size = bands.hop_size;
  spec.values.resize(static_cast<size_t>(spec.time_frames * spec.freq_bins));
  for (int64_t t = 0; t < spec.time_frames; ++t) {
    for (int64_t b = 0; b < bands.n_bands; ++b) {
      const int64_t s = map.start[static_cast<size_t>(b)];
      const int64_t w = map.width(b);
      for (int64_t j = 0; j < w; ++j)
        spec.at(t, s + j) =
            std::complex<double>(bands.at(t, b, 2 * j), bands.at(t, b, 2 * j + 1));
    }
  }
  return spec;
}

MixResult mix_with_energy_norm(const AudioClip& a1, const AudioClip& a2,
                               uint64_t /*seed*/) {
  if (a1.sample_rate != a2.sample_rate)
    throw std::invalid_argument("mix: sample rate mismatch");
  const int64_t len = std::min(a1.length(), a2.length());
  if (len == 0) throw std::invalid_argument("mix: empty source");

  MixResult r;
  r.scaled_a1 = a1;
  r.scaled_a1.samples.resize(static_cast<size_t>(len));
  r.scaled_a2 = a2;
  r.scaled_a2.samples.resize(static_cast<size_t>(len));

  const double e1 = r.scaled_a1.energy();
  const double e2 = r.scaled_a2.energy();
  if (e1 <= 0.0 || e2 <= 0.0) throw std::invalid_argument("silent source");

  // Match the second source's energy to the first.
  const double scale2 = std::sqrt(e1 / e2);
  for (auto& s : r.scaled_a2.samples) s *= scale2;

  r.mixture.sample_rate = a1.sample_rate;
  r.mixture.clip_id = a1.clip_id + "+" + a2.clip_id;
  r.mixture.samples.resize(static_cast<size_t>(len));
  double peak = 0.0;
  for (int64_t i = 0; i < len; ++i) {
    const double m = r.scaled_a1.samples[static_cast<size_t>(i)] +
                     r.scaled_a2.samples[static_cast<size_t>(i)];
    r.mixture.samples[static_cast<size_t>(i)] = m;
    peak = std::max(peak, std::abs(m));
  }

  // Joint peak guard keeps mixture == s1 + s2 exactly.
  constexpr double kPeakLimit = 0.999;
  if (peak > kPeakLimit) {
    const double g = kPeakLimit / peak;
    for (int64_t i = 0; i < len; ++i) {
      r.mixture.samples[static_cast<size_t>(i)] *= g;
      r.scaled_a1.samples[static_cast<size_t>(i)] *= g;
      r.scaled_a2.samples[static_cast<size_t>(i)] *= g;
    }
  }
  return r;
}

}  // namespace caresep::dsp
