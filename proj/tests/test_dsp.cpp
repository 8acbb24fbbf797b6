#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "caresep/audio.hpp"
#include "caresep/dsp.hpp"
#include "caresep/rng.hpp"

using namespace caresep;
using namespace caresep::dsp;

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

AudioClip sine_clip(int64_t len, int sr, double freq, double amp = 0.5) {
  AudioClip c;
  c.sample_rate = sr;
  c.samples.resize(static_cast<size_t>(len));
  for (int64_t n = 0; n < len; ++n)
    c.samples[static_cast<size_t>(n)] = amp * std::sin(2.0 * M_PI * freq * n / sr);
  c.clip_id = "sine";
  return c;
}

double rel_l2_error(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i];
  }
  return std::sqrt(num / (den > 0 ? den : 1.0));
}

// Energy of a one-sided spectrum row with conjugate-symmetry weights.
double spec_row_energy(const ComplexSpec& s, int64_t t) {
  double e = std::norm(s.at(t, 0)) + std::norm(s.at(t, s.freq_bins - 1));
  for (int64_t k = 1; k < s.freq_bins - 1; ++k) e += 2.0 * std::norm(s.at(t, k));
  return e;
}

}  // namespace

TEST_CASE("stft zero input gives zero spectrogram with expected bins") {
  AudioClip c;
  c.sample_rate = 16000;
  c.samples.assign(16000, 0.0);
  auto spec = stft(c, 1024, 320);
  CHECK(spec.freq_bins == 513);
  double maxabs = 0.0;
  for (auto& v : spec.values) maxabs = std::max(maxabs, std::abs(v));
  CHECK(maxabs == 0.0);
}

TEST_CASE("stft frame count matches start-index enumeration") {
  // Oracle: count frame starts t*hop - pad whose window fits the padded clip.
  auto enumerate_frames = [](int64_t len, int window, int hop) {
    int64_t pad = window / 2;
    int64_t padded = len + 2 * pad;
    int64_t count = 0;
    for (int64_t start = 0; start + window <= padded; start += hop) ++count;
    return count;
  };
  for (auto [len, window, hop] : {std::tuple<int64_t, int, int>{16000, 1024, 320},
                                  {16000, 256, 64},
                                  {960, 256, 64},
                                  {4096, 512, 128}}) {
    auto c = noise_clip(len, 16000, 7);
    auto spec = stft(c, window, hop);
    CHECK(spec.time_frames == enumerate_frames(len, window, hop));
    CHECK(spec.time_frames == len / hop + 1);
  }
}

TEST_CASE("stft of a bin-centered sine matches a direct DFT and concentrates energy") {
  const int window = 1024, hop = 320, sr = 16000;
  const int k = 100;
  const double freq = static_cast<double>(k) * sr / window;
  auto c = sine_clip(16000, sr, freq);
  auto spec = stft(c, window, hop);

  // Direct DFT oracle on one interior frame (away from reflection padding).
  const int64_t t = spec.time_frames / 2;
  const int64_t start = t * hop - window / 2;
  auto win = hann_window(window);
  for (int64_t bin : {int64_t(k - 2), int64_t(k), int64_t(k + 2)}) {
    std::complex<double> acc(0, 0);
    for (int64_t n = 0; n < window; ++n) {
      double x = c.samples[static_cast<size_t>(start + n)] * win[static_cast<size_t>(n)];
      double ang = -2.0 * M_PI * static_cast<double>(bin) * static_cast<double>(n) / window;
      acc += x * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    CHECK(std::abs(acc - spec.at(t, bin)) < 1e-9 * (1.0 + std::abs(acc)));
  }

  // >= 95% of the energy within k +- 1 on interior frames.
  double total = 0.0, near = 0.0;
  for (int64_t tt = 2; tt < spec.time_frames - 2; ++tt) {
    for (int64_t f = 0; f < spec.freq_bins; ++f) {
      double e = std::norm(spec.at(tt, f)) * (f == 0 || f == spec.freq_bins - 1 ? 1.0 : 2.0);
      total += e;
      if (std::abs(f - k) <= 1) near += e;
    }
  }
  CHECK(near / total >= 0.95);
}

TEST_CASE("stft errors") {
  auto c = noise_clip(500, 16000, 3);
  CHECK_THROWS_WITH_AS(stft(c, 1024, 320), "input too short", std::invalid_argument);
  auto c2 = noise_clip(4000, 16000, 3);
  CHECK_THROWS_WITH_AS(stft(c2, 1000, 250), "invalid framing", std::invalid_argument);  // not power of two
  CHECK_THROWS_WITH_AS(stft(c2, 256, 200), "invalid framing", std::invalid_argument);   // hop > window/2
}

TEST_CASE("istft round trip: white noise, sine, zero") {
  for (auto [window, hop] : {std::pair<int, int>{1024, 320}, {256, 64}}) {
    auto c = noise_clip(16000, 16000, 11);
    auto spec = stft(c, window, hop);
    auto back = istft(spec, c.length(), c.sample_rate);
    CHECK(rel_l2_error(c.samples, back.samples) <= 1e-6);
  }
  auto s = sine_clip(16000, 16000, 440.0);
  auto back = istft(stft(s, 1024, 320), s.length(), s.sample_rate);
  CHECK(rel_l2_error(s.samples, back.samples) <= 1e-6);

  ComplexSpec zero;
  zero.window_size = 256;
  zero.hop_size = 64;
  zero.freq_bins = 129;
  zero.time_frames = stft_frame_count(960, 64);
  zero.values.assign(static_cast<size_t>(zero.time_frames * zero.freq_bins), {0.0, 0.0});
  auto w = istft(zero, 960, 16000);
  for (double v : w.samples) CHECK(v == 0.0);
}

TEST_CASE("istft rejects inconsistent output length") {
  auto c = noise_clip(4096, 16000, 5);
  auto spec = stft(c, 256, 64);
  CHECK_THROWS_AS(istft(spec, 8192, 16000), std::invalid_argument);
}

TEST_CASE("round trip property over random lengths") {
  Rng rng(99);
  for (int it = 0; it < 8; ++it) {
    int64_t len = 512 + static_cast<int64_t>(rng.below(6000));
    auto c = noise_clip(len, 8000, 1000 + it);
    auto spec = stft(c, 256, 64);
    auto back = istft(spec, len, 8000);
    CHECK(rel_l2_error(c.samples, back.samples) <= 1e-6);
  }
}

TEST_CASE("stft linearity") {
  auto x = noise_clip(4000, 16000, 21);
  auto y = noise_clip(4000, 16000, 22);
  const double alpha = 0.7, beta = -1.3;
  AudioClip z = x;
  for (size_t i = 0; i < z.samples.size(); ++i)
    z.samples[i] = alpha * x.samples[i] + beta * y.samples[i];
  auto sx = stft(x, 256, 64), sy = stft(y, 256, 64), sz = stft(z, 256, 64);
  double err = 0.0, scale = 0.0;
  for (size_t i = 0; i < sz.values.size(); ++i) {
    err = std::max(err, std::abs(sz.values[i] - (alpha * sx.values[i] + beta * sy.values[i])));
    scale = std::max(scale, std::abs(sz.values[i]));
  }
  CHECK(err <= 1e-10 * scale);
}

TEST_CASE("Parseval consistency per frame") {
  auto c = noise_clip(4000, 16000, 31);
  const int window = 256, hop = 64;
  auto spec = stft(c, window, hop);
  auto win = hann_window(window);
  for (int64_t t : {int64_t(0), spec.time_frames / 2, spec.time_frames - 1}) {
    // Windowed-frame energy computed from the padded signal directly.
    const int64_t start = t * hop - window / 2;
    double we = 0.0;
    for (int64_t n = 0; n < window; ++n) {
      int64_t idx = start + n;
      int64_t len = c.length();
      int64_t period = 2 * (len - 1);
      int64_t m = ((idx % period) + period) % period;
      double s = c.samples[static_cast<size_t>(m < len ? m : period - m)];
      double v = s * win[static_cast<size_t>(n)];
      we += v * v;
    }
    const double se = spec_row_energy(spec, t) / window;
    CHECK(std::abs(se - we) <= 1e-6 * std::max(we, 1e-12));
  }
}

TEST_CASE("band map partitions bins with mel-tracked boundaries") {
  auto map = make_band_map(513, 64, 16000);
  CHECK(map->n_bands() == 64);
  CHECK(map->start.front() == 0);
  CHECK(map->start.back() == 513);
  // Every bin in exactly one band, widths non-empty non-decreasing.
  std::vector<int> seen(513, 0);
  for (int64_t b = 0; b < 64; ++b) {
    CHECK(map->width(b) >= 1);
    if (b > 0) CHECK(map->width(b) >= map->width(b - 1));
    for (int64_t k = map->start[static_cast<size_t>(b)]; k < map->start[static_cast<size_t>(b + 1)]; ++k)
      seen[static_cast<size_t>(k)]++;
  }
  for (int v : seen) CHECK(v == 1);

  // Oracle: boundaries follow mel(f) = 2595 log10(1 + f/700) spacing to
  // within the integer rounding of the allocation (2 bins here).
  const double mel_hi = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  const double bin_hz = 8000.0 / 512.0;
  for (int64_t b = 1; b < 64; ++b) {
    double mel_edge = mel_hi * static_cast<double>(b) / 64.0;
    double ideal_bin = 700.0 * (std::pow(10.0, mel_edge / 2595.0) - 1.0) / bin_hz;
    CHECK(std::abs(static_cast<double>(map->start[static_cast<size_t>(b)]) - ideal_bin) <= 2.0);
  }
}

TEST_CASE("band map identity when bands == bins") {
  auto map = make_band_map(8, 8, 16000);
  for (int64_t b = 0; b < 8; ++b) {
    CHECK(map->width(b) == 1);
    CHECK(map->bin_to_band[static_cast<size_t>(b)] == b);
  }
}

TEST_CASE("band split errors when n_bands exceeds bins") {
  auto c = noise_clip(2048, 16000, 41);
  auto spec = stft(c, 256, 64);
  CHECK_THROWS_AS(mel_band_split(spec, 200, 16000), std::invalid_argument);
}

TEST_CASE("band split / unsplit is an exact round trip") {
  auto c = noise_clip(4000, 16000, 51);
  auto spec = stft(c, 1024, 320);
  auto bands = mel_band_split(spec, 64, 16000);
  CHECK(bands.n_bands == 64);
  auto back = band_unsplit(bands);
  REQUIRE(back.values.size() == spec.values.size());
  for (size_t i = 0; i < spec.values.size(); ++i) CHECK(back.values[i] == spec.values[i]);

  BandSpec no_map = bands;
  no_map.band_map = nullptr;
  CHECK_THROWS_AS(band_unsplit(no_map), std::invalid_argument);
}

TEST_CASE("band partition property over random shapes") {
  Rng rng(61);
  for (int it = 0; it < 10; ++it) {
    int64_t bins = 8 + static_cast<int64_t>(rng.below(600));
    int64_t nb = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(bins)));
    auto map = make_band_map(bins, nb, 16000);
    CHECK(map->start.back() == bins);
    int64_t covered = 0;
    for (int64_t b = 0; b < nb; ++b) {
      CHECK(map->width(b) >= 1);
      covered += map->width(b);
    }
    CHECK(covered == bins);
  }
}

TEST_CASE("mix_with_energy_norm equal-energy algebra") {
  auto a1 = noise_clip(4000, 16000, 71, 0.2);
  // Scale a1 to energy 4 and a2 to energy 1.
  double e1 = a1.energy();
  for (auto& s : a1.samples) s *= std::sqrt(4.0 / e1);
  auto a2 = noise_clip(4000, 16000, 72, 0.2);
  double e2 = a2.energy();
  for (auto& s : a2.samples) s *= std::sqrt(1.0 / e2);

  auto r = mix_with_energy_norm(a1, a2, 0);
  CHECK(std::abs(r.scaled_a1.energy() - 4.0) < 1e-9);
  CHECK(std::abs(r.scaled_a2.energy() - 4.0) < 1e-9);
  // a2 scaled by 2.0 exactly.
  CHECK(std::abs(r.scaled_a2.samples[7] / a2.samples[7] - 2.0) < 1e-12);
  for (size_t i = 0; i < r.mixture.samples.size(); ++i)
    CHECK(r.mixture.samples[i] ==
          r.scaled_a1.samples[i] + r.scaled_a2.samples[i]);
}

TEST_CASE("mix of a clip with itself applies joint peak guard") {
  auto a = sine_clip(2000, 16000, 440.0, 0.8);
  auto r = mix_with_energy_norm(a, a, 0);
  // Scale factors 1.0 before the guard; mixture would peak at 1.6 so the
  // joint guard rescales everything while preserving the sum structure.
  double peak = 0.0;
  for (double s : r.mixture.samples) peak = std::max(peak, std::abs(s));
  CHECK(peak <= 0.999 + 1e-12);
  CHECK(peak > 0.99);
  for (size_t i = 0; i < r.mixture.samples.size(); ++i) {
    CHECK(r.mixture.samples[i] == r.scaled_a1.samples[i] + r.scaled_a2.samples[i]);
    CHECK(std::abs(r.scaled_a1.samples[i] - r.scaled_a2.samples[i]) < 1e-12);
  }
}

TEST_CASE("mix energy includes the cross term") {
  auto a1 = noise_clip(8000, 16000, 81, 0.1);
  auto a2 = noise_clip(8000, 16000, 82, 0.1);
  double e1 = a1.energy();
  for (auto& s : a1.samples) s *= std::sqrt(1.0 / e1);
  double e2 = a2.energy();
  for (auto& s : a2.samples) s *= std::sqrt(1.0 / e2);
  auto r = mix_with_energy_norm(a1, a2, 0);
  double cross = std::inner_product(r.scaled_a1.samples.begin(), r.scaled_a1.samples.end(),
                                    r.scaled_a2.samples.begin(), 0.0);
  CHECK(std::abs(r.mixture.energy() - (2.0 + 2.0 * cross)) < 1e-9);
  CHECK(std::abs(cross) < 0.1);  // near-orthogonal noise
}

TEST_CASE("mix rejects silent sources") {
  AudioClip silent;
  silent.sample_rate = 16000;
  silent.samples.assign(1000, 0.0);
  auto a = noise_clip(1000, 16000, 91);
  CHECK_THROWS_WITH_AS(mix_with_energy_norm(a, silent, 0), "silent source",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(mix_with_energy_norm(silent, a, 0), "silent source",
                       std::invalid_argument);
}

TEST_CASE("energy norm property over random pairs") {
  Rng rng(101);
  for (int it = 0; it < 6; ++it) {
    auto a1 = noise_clip(3000, 16000, 200 + it, rng.uniform(0.05, 0.6));
    auto a2 = noise_clip(3000, 16000, 300 + it, rng.uniform(0.05, 0.6));
    auto r = mix_with_energy_norm(a1, a2, it);
    double s1 = r.scaled_a1.energy(), s2 = r.scaled_a2.energy();
    CHECK(std::abs(s1 - s2) <= 1e-9 * s1);
  }
}

TEST_CASE("wav round trip float32 and pcm16") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "caresep_dsp_test";
  fs::create_directories(dir);
  auto c = noise_clip(2000, 16000, 111, 0.5);

  auto fpath = (dir / "f32.wav").string();
  save_wav(fpath, c, WavFormat::kFloat32);
  auto back = load_wav(fpath, 16000);
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == c.samples.size());
  for (size_t i = 0; i < c.samples.size(); ++i)
    CHECK(std::abs(back.samples[i] - c.samples[i]) < 1e-6);

  auto ppath = (dir / "p16.wav").string();
  save_wav(ppath, c, WavFormat::kPcm16);
  auto back16 = load_wav(ppath);
  for (size_t i = 0; i < c.samples.size(); ++i)
    CHECK(std::abs(back16.samples[i] - c.samples[i]) < 1e-4);

  CHECK_THROWS_AS(load_wav(fpath, 8000), std::runtime_error);
  fs::remove_all(dir);
}
