#pragma once

#include <optional>
#include <string>
#include <vector>

namespace caresep {

// Mono waveform with optional multi-hot labels. Samples are nominally in
// [-1, 1]; sample_rate in Hz.
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 0;
  std::optional<std::vector<uint8_t>> labels;  // multi-hot over n_classes
  std::string clip_id;

  int64_t length() const { return static_cast<int64_t>(samples.size()); }
  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
  double energy() const {
    double e = 0.0;
    for (double s : samples) e += s * s;
    return e;
  }
  bool silent() const { return energy() <= 0.0; }
};

enum class WavFormat { kPcm16, kFloat32 };

// Mono WAV only; multi-channel files are rejected. If expected_rate > 0 a
// mismatching file is an error (no silent resampling).
void save_wav(const std::string& path, const AudioClip& clip,
              WavFormat format = WavFormat::kFloat32);
AudioClip load_wav(const std::string& path, int expected_rate = -1);

}  // namespace caresep
