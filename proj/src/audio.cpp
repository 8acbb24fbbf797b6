#include "caresep/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace caresep {

namespace {

void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& s, uint16_t v) {
  for (int i = 0; i < 2; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t get_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

void save_wav(const std::string& path, const AudioClip& clip, WavFormat format) {
  if (clip.samples.empty()) throw std::invalid_argument("save_wav: empty clip");
  if (clip.sample_rate <= 0) throw std::invalid_argument("save_wav: bad sample rate");

  const uint16_t channels = 1;
  const uint16_t bits = format == WavFormat::kPcm16 ? 16 : 32;
  const uint16_t fmt_tag = format == WavFormat::kPcm16 ? 1 : 3;  // PCM / IEEE float
  const uint32_t byte_rate = static_cast<uint32_t>(clip.sample_rate) * channels * bits / 8;
  const uint32_t data_len = static_cast<uint32_t>(clip.samples.size()) * bits / 8;

  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, fmt_tag);
  put_u16(out, channels);
  put_u32(out, static_cast<uint32_t>(clip.sample_rate));
  put_u32(out, byte_rate);
  put_u16(out, channels * bits / 8);
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_len);

  if (format == WavFormat::kPcm16) {
    for (double s : clip.samples) {
      double clipped = std::clamp(s, -1.0, 1.0);
      auto v = static_cast<int16_t>(std::lrint(clipped * 32767.0));
      put_u16(out, static_cast<uint16_t>(v));
    }
  } else {
    for (double s : clip.samples) {
      float f = static_cast<float>(s);
      uint32_t bitsrep;
      std::memcpy(&bitsrep, &f, 4);
      put_u32(out, bitsrep);
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_wav: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_wav: write failed for " + path);
}

AudioClip load_wav(const std::string& path, int expected_rate) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_wav: cannot open " + path);
  std::vector<uint8_t> raw((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  if (raw.size() < 44 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
      std::memcmp(raw.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("load_wav: not a RIFF/WAVE file: " + path);

  uint16_t fmt_tag = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  size_t data_off = 0, data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= raw.size()) {
    uint32_t chunk_len = get_u32(raw.data() + pos + 4);
    if (std::memcmp(raw.data() + pos, "fmt ", 4) == 0 && chunk_len >= 16) {
      fmt_tag = get_u16(raw.data() + pos + 8);
      channels = get_u16(raw.data() + pos + 10);
      sample_rate = get_u32(raw.data() + pos + 12);
      bits = get_u16(raw.data() + pos + 22);
    } else if (std::memcmp(raw.data() + pos, "data", 4) == 0) {
      data_off = pos + 8;
      data_len = std::min<size_t>(chunk_len, raw.size() - data_off);
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (data_off == 0) throw std::runtime_error("load_wav: no data chunk in " + path);
  if (channels != 1)
    throw std::runtime_error("load_wav: only mono supported, got " +
                             std::to_string(channels) + " channels in " + path);
  if (expected_rate > 0 && static_cast<int>(sample_rate) != expected_rate)
    throw std::runtime_error("load_wav: sample rate mismatch in " + path + ": got " +
                             std::to_string(sample_rate) + ", expected " +
                             std::to_string(expected_rate));

  AudioClip clip;
  clip.sample_rate = static_cast<int>(sample_rate);
  if (fmt_tag == 1 && bits == 16) {
    size_t n = data_len / 2;
    clip.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      auto v = static_cast<int16_t>(get_u16(raw.data() + data_off + 2 * i));
      clip.samples[i] = static_cast<double>(v) / 32767.0;
    }
  } else if (fmt_tag == 3 && bits == 32) {
    size_t n = data_len / 4;
    clip.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      uint32_t b = get_u32(raw.data() + data_off + 4 * i);
      float v;
      std::memcpy(&v, &b, 4);
      clip.samples[i] = static_cast<double>(v);
    }
  } else {
    throw std::runtime_error("load_wav: unsupported format (tag " +
                             std::to_string(fmt_tag) + ", " + std::to_string(bits) +
                             " bits) in " + path);
  }
  if (clip.samples.empty()) throw std::runtime_error("load_wav: empty data in " + path);
  return clip;
}

}  // namespace caresep
