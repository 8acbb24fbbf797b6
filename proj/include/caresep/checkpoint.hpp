#pragma once

#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "caresep/model.hpp"
#include "caresep/tape.hpp"

namespace caresep {

using Json = nlohmann::json;

inline void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"latent_dim", c.latent_dim},
           {"patch_size", c.patch_size},
           {"window_tokens", c.window_tokens},
           {"enc_depths", c.enc_depths},
           {"connector_depth", c.connector_depth},
           {"dec_depths", c.dec_depths},
           {"heads", c.heads},
           {"n_classes", c.n_classes},
           {"stft_window", c.stft_window},
           {"stft_hop", c.stft_hop},
           {"n_bands", c.n_bands},
           {"sample_rate", c.sample_rate},
           {"mask_mode", c.mask_mode},
           {"inject_encoder", c.inject_encoder},
           {"token_sem_kernel", c.token_sem_kernel}};
}

inline void from_json(const Json& j, ModelConfig& c) {
  j.at("latent_dim").get_to(c.latent_dim);
  j.at("patch_size").get_to(c.patch_size);
  j.at("window_tokens").get_to(c.window_tokens);
  j.at("enc_depths").get_to(c.enc_depths);
  j.at("connector_depth").get_to(c.connector_depth);
  j.at("dec_depths").get_to(c.dec_depths);
  j.at("heads").get_to(c.heads);
  j.at("n_classes").get_to(c.n_classes);
  j.at("stft_window").get_to(c.stft_window);
  j.at("stft_hop").get_to(c.stft_hop);
  j.at("n_bands").get_to(c.n_bands);
  j.at("sample_rate").get_to(c.sample_rate);
  j.at("mask_mode").get_to(c.mask_mode);
  j.at("inject_encoder").get_to(c.inject_encoder);
  j.at("token_sem_kernel").get_to(c.token_sem_kernel);
}

namespace ckpt {

inline constexpr char kMagic[8] = {'C', 'S', 'E', 'P', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

// Versioned container: JSON header (config, meta, named shapes/offsets)
// followed by raw little-endian parameter data. Byte-stable for identical
// inputs: keys are sorted by the JSON library and offsets follow the stable
// parameter registry order.
template <typename T>
void save(const std::string& path, const std::vector<nn::Parameter<T>*>& params,
          const Json& meta) {
  Json header;
  header["format_version"] = kVersion;
  header["dtype"] = dtype_name<T>();
  header["meta"] = meta;
  Json plist = Json::array();
  uint64_t offset = 0;
  for (const auto* p : params) {
    plist.push_back(Json{{"name", p->name},
                         {"rows", p->value.rows()},
                         {"cols", p->value.cols()},
                         {"offset", offset}});
    offset += static_cast<uint64_t>(p->value.size()) * sizeof(T);
  }
  header["params"] = plist;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint save: cannot open " + path);
  f.write(kMagic, 8);
  uint32_t ver = kVersion;
  f.write(reinterpret_cast<const char*>(&ver), 4);
  uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto* p : params)
    f.write(reinterpret_cast<const char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(T)));
  if (!f) throw std::runtime_error("checkpoint save: write failed for " + path);
}

template <typename T>
struct Loaded {
  Json meta;
  std::map<std::string, Tensor<T>> arrays;
};

template <typename T>
Loaded<T> load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint load: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint load: bad magic in " + path);
  uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  if (ver != kVersion)
    throw std::runtime_error("checkpoint load: unsupported version in " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  Json header = Json::parse(hs);
  if (header.at("dtype").get<std::string>() != dtype_name<T>())
    throw std::runtime_error("checkpoint load: dtype mismatch in " + path);

  Loaded<T> out;
  out.meta = header.at("meta");
  for (const auto& pj : header.at("params")) {
    const auto name = pj.at("name").get<std::string>();
    Tensor<T> t(pj.at("rows").get<int64_t>(), pj.at("cols").get<int64_t>());
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
    out.arrays.emplace(name, std::move(t));
  }
  if (!f) throw std::runtime_error("checkpoint load: truncated file " + path);
  return out;
}

// Assign loaded arrays into params by exact name; every param must be present
// with a matching shape.
template <typename T>
void assign(const std::vector<nn::Parameter<T>*>& params,
            const std::map<std::string, Tensor<T>>& arrays) {
  for (auto* p : params) {
    auto it = arrays.find(p->name);
    if (it == arrays.end())
      throw std::runtime_error("checkpoint: missing parameter " + p->name);
    if (!p->value.same_shape(it->second))
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name);
    p->value = it->second;
  }
}

// Assign by name with the leading "<prefix>." stripped on both sides, so an
// encoder checkpoint written by one stack loads into another.
template <typename T>
void assign_stripped(const std::vector<nn::Parameter<T>*>& params,
                     const std::string& param_prefix,
                     const std::map<std::string, Tensor<T>>& arrays,
                     const std::string& array_prefix) {
  auto strip = [](const std::string& s, const std::string& pfx) {
    if (s.rfind(pfx + ".", 0) != 0)
      throw std::runtime_error("checkpoint: name " + s + " lacks prefix " + pfx);
    return s.substr(pfx.size() + 1);
  };
  std::map<std::string, const Tensor<T>*> by_rel;
  for (const auto& [name, t] : arrays) by_rel.emplace(strip(name, array_prefix), &t);
  for (auto* p : params) {
    const std::string rel = strip(p->name, param_prefix);
    auto it = by_rel.find(rel);
    if (it == by_rel.end())
      throw std::runtime_error("checkpoint: missing parameter " + rel);
    if (!p->value.same_shape(*it->second))
      throw std::runtime_error("checkpoint: shape mismatch for " + rel);
    p->value = *it->second;
  }
}

}  // namespace ckpt
}  // namespace caresep
