#include "caresep/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "caresep/rng.hpp"

namespace fs = std::filesystem;

namespace caresep::data {

namespace {

void apply_envelope_and_level(std::vector<double>& x, int sample_rate, double rms_target) {
  // 10 ms raised-cosine fades against clicks at the clip edges.
  const int ramp = std::min<int>(sample_rate / 100, static_cast<int>(x.size()) / 4);
  for (int i = 0; i < ramp; ++i) {
    const double g = 0.5 * (1.0 - std::cos(M_PI * i / ramp));
    x[static_cast<size_t>(i)] *= g;
    x[x.size() - 1 - static_cast<size_t>(i)] *= g;
  }
  double e = 0.0;
  for (double v : x) e += v * v;
  const double rms = std::sqrt(e / static_cast<double>(x.size()));
  if (rms <= 0.0) return;
  double g = rms_target / rms;
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v * g));
  if (peak > 0.95) g *= 0.95 / peak;
  for (auto& v : x) v *= g;
}

double pick(Rng& rng, const Range& r) { return r.defined() ? rng.uniform(r.lo, r.hi) : r.lo; }

}  // namespace

std::vector<SoundClassSpec> default_desk_classes() {
  std::vector<SoundClassSpec> specs(4);
  specs[0].class_id = 0;
  specs[0].family = SoundClassSpec::Family::kHarmonicTone;
  specs[0].fundamental_hz = {200.0, 400.0};

  specs[1].class_id = 1;
  specs[1].family = SoundClassSpec::Family::kBandNoise;
  specs[1].bandwidth_hz = {2000.0, 4000.0};

  specs[2].class_id = 2;
  specs[2].family = SoundClassSpec::Family::kAmNoise;
  specs[2].bandwidth_hz = {5000.0, 7000.0};
  specs[2].am_rate_hz = {6.0, 10.0};

  specs[3].class_id = 3;
  specs[3].family = SoundClassSpec::Family::kClickTrain;
  specs[3].click_rate_hz = {15.0, 25.0};
  specs[3].fundamental_hz = {1000.0, 3000.0};
  return specs;
}

AudioClip render_clip(const SoundClassSpec& spec, uint64_t seed, double clip_seconds,
                      int sample_rate) {
  Rng rng(seed);
  const int64_t n = static_cast<int64_t>(clip_seconds * sample_rate);
  std::vector<double> x(static_cast<size_t>(n), 0.0);
  const double dt = 1.0 / sample_rate;

  switch (spec.family) {
    case SoundClassSpec::Family::kHarmonicTone: {
      const double f0 = pick(rng, spec.fundamental_hz);
      const double amps[3] = {1.0, 0.5 * rng.uniform(0.6, 1.0), 0.25 * rng.uniform(0.4, 1.0)};
      double phases[3] = {rng.uniform(0, 2 * M_PI), rng.uniform(0, 2 * M_PI),
                          rng.uniform(0, 2 * M_PI)};
      for (int64_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (int h = 0; h < 3; ++h)
          v += amps[h] * std::sin(2 * M_PI * f0 * (h + 1) * i * dt + phases[h]);
        x[static_cast<size_t>(i)] = v;
      }
      break;
    }
    case SoundClassSpec::Family::kBandNoise:
    case SoundClassSpec::Family::kAmNoise: {
      // Dense random-phase sinusoids approximate stationary band noise while
      // staying a pure function of the seed.
      constexpr int kPartials = 96;
      std::vector<double> freqs(kPartials), phases(kPartials);
      for (int k = 0; k < kPartials; ++k) {
        freqs[static_cast<size_t>(k)] = pick(rng, spec.bandwidth_hz);
        phases[static_cast<size_t>(k)] = rng.uniform(0, 2 * M_PI);
      }
      const bool am = spec.family == SoundClassSpec::Family::kAmNoise;
      const double am_rate = am ? pick(rng, spec.am_rate_hz) : 0.0;
      const double am_depth = am ? rng.uniform(0.7, 0.95) : 0.0;
      const double am_phase = am ? rng.uniform(0, 2 * M_PI) : 0.0;
      for (int64_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (int k = 0; k < kPartials; ++k)
          v += std::sin(2 * M_PI * freqs[static_cast<size_t>(k)] * i * dt +
                        phases[static_cast<size_t>(k)]);
        v /= std::sqrt(static_cast<double>(kPartials));
        if (am)
          v *= (1.0 + am_depth * std::sin(2 * M_PI * am_rate * i * dt + am_phase)) /
               (1.0 + am_depth);
        x[static_cast<size_t>(i)] = v;
      }
      break;
    }
    case SoundClassSpec::Family::kChirp: {
      const double f0 = pick(rng, spec.fundamental_hz);
      const double slope = pick(rng, spec.chirp_slope_hz_s);
      double phase = rng.uniform(0, 2 * M_PI);
      for (int64_t i = 0; i < n; ++i) {
        const double t = i * dt;
        x[static_cast<size_t>(i)] = std::sin(2 * M_PI * (f0 * t + 0.5 * slope * t * t) + phase);
      }
      break;
    }
    case SoundClassSpec::Family::kClickTrain: {
      const double rate = pick(rng, spec.click_rate_hz);
      const double res = pick(rng, spec.fundamental_hz);
      const double period = sample_rate / rate;
      const double offset = rng.uniform(0.0, period);
      const int click_len = sample_rate / 250;  // 4 ms damped burst
      const double decay = 1.0 / (0.0008 * sample_rate);
      const double cphase = rng.uniform(0, 2 * M_PI);
      for (double pos = offset; pos < static_cast<double>(n); pos += period) {
        const int64_t start = static_cast<int64_t>(pos);
        for (int k = 0; k < click_len && start + k < n; ++k)
          x[static_cast<size_t>(start + k)] +=
              std::exp(-decay * k) * std::sin(2 * M_PI * res * k * dt + cphase);
      }
      break;
    }
    case SoundClassSpec::Family::kFmTone: {
      const double f0 = pick(rng, spec.fundamental_hz);
      const double rate = pick(rng, spec.am_rate_hz);
      const double dev = 0.1 * f0;
      double phase = rng.uniform(0, 2 * M_PI);
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        acc += 2 * M_PI * (f0 + dev * std::sin(2 * M_PI * rate * i * dt)) * dt;
        x[static_cast<size_t>(i)] = std::sin(acc + phase);
      }
      break;
    }
  }

  apply_envelope_and_level(x, sample_rate, 0.15 * rng.uniform(0.8, 1.2));

  AudioClip clip;
  clip.samples = std::move(x);
  clip.sample_rate = sample_rate;
  return clip;
}

std::vector<const ManifestEntry*> DatasetManifest::split_entries(
    const std::string& split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(&e);
  return out;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write manifest " + path);
  f << "#caresep-manifest v1\n";
  f << "#sample_rate " << m.sample_rate << "\n";
  f << "#clip_seconds " << m.clip_seconds << "\n";
  f << "#n_classes " << m.n_classes << "\n";
  f << "clip_id\tpath\tlabels\tsplit\tseed\n";
  for (const auto& e : m.entries) {
    f << e.clip_id << "\t" << e.path << "\t";
    for (size_t i = 0; i < e.labels.size(); ++i) f << (i ? ";" : "") << e.labels[i];
    f << "\t" << e.split << "\t" << e.seed << "\n";
  }
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read manifest " + path);
  DatasetManifest m;
  std::string line;
  bool header_seen = false;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream is(line.substr(1));
      std::string key;
      is >> key;
      if (key == "sample_rate") is >> m.sample_rate;
      else if (key == "clip_seconds") is >> m.clip_seconds;
      else if (key == "n_classes") is >> m.n_classes;
      continue;
    }
    if (!header_seen) {  // column header row
      header_seen = true;
      continue;
    }
    std::istringstream is(line);
    ManifestEntry e;
    std::string labels;
    std::getline(is, e.clip_id, '\t');
    std::getline(is, e.path, '\t');
    std::getline(is, labels, '\t');
    std::getline(is, e.split, '\t');
    std::string seed;
    std::getline(is, seed, '\t');
    e.seed = seed.empty() ? 0 : std::stoull(seed);
    std::istringstream ls(labels);
    std::string tok;
    while (std::getline(ls, tok, ';'))
      if (!tok.empty()) e.labels.push_back(std::stoi(tok));
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetManifest synth_dataset(const std::vector<SoundClassSpec>& specs, int n_per_class,
                              double clip_seconds, int sample_rate, uint64_t seed,
                              const std::string& out_dir) {
  if (specs.size() < 2) throw std::invalid_argument("synth_dataset: need >= 2 classes");
  if (n_per_class < 4) throw std::invalid_argument("synth_dataset: need >= 4 clips per class");
  // Same-family classes must be distinguishable by at least one range.
  for (size_t a = 0; a < specs.size(); ++a)
    for (size_t b = a + 1; b < specs.size(); ++b) {
      const auto& sa = specs[a];
      const auto& sb = specs[b];
      if (sa.family != sb.family) continue;
      const bool all_overlap = (!sa.fundamental_hz.defined() ||
                                sa.fundamental_hz.overlaps(sb.fundamental_hz)) &&
                               (!sa.bandwidth_hz.defined() ||
                                sa.bandwidth_hz.overlaps(sb.bandwidth_hz)) &&
                               (!sa.am_rate_hz.defined() ||
                                sa.am_rate_hz.overlaps(sb.am_rate_hz)) &&
                               (!sa.chirp_slope_hz_s.defined() ||
                                sa.chirp_slope_hz_s.overlaps(sb.chirp_slope_hz_s)) &&
                               (!sa.click_rate_hz.defined() ||
                                sa.click_rate_hz.overlaps(sb.click_rate_hz));
      if (all_overlap)
        throw std::invalid_argument("synth_dataset: overlapping parameter ranges for classes " +
                                    std::to_string(sa.class_id) + " and " +
                                    std::to_string(sb.class_id));
    }

  fs::create_directories(fs::path(out_dir) / "wavs");
  DatasetManifest m;
  m.sample_rate = sample_rate;
  m.clip_seconds = clip_seconds;
  m.n_classes = static_cast<int>(specs.size());
  const int n_train = n_per_class * 4 / 5;
  for (const auto& spec : specs) {
    for (int i = 0; i < n_per_class; ++i) {
      ManifestEntry e;
      char idbuf[64];
      std::snprintf(idbuf, sizeof(idbuf), "c%d_%03d", spec.class_id, i);
      e.clip_id = idbuf;
      e.path = std::string("wavs/") + idbuf + ".wav";
      e.labels = {spec.class_id};
      e.split = i < n_train ? "train" : "eval";
      e.seed = Rng::derive(seed, static_cast<uint64_t>(spec.class_id),
                           static_cast<uint64_t>(i));
      AudioClip clip = render_clip(spec, e.seed, clip_seconds, sample_rate);
      clip.clip_id = e.clip_id;
      save_wav((fs::path(out_dir) / e.path).string(), clip, WavFormat::kFloat32);
      m.entries.push_back(std::move(e));
    }
  }
  save_manifest(m, (fs::path(out_dir) / "manifest.tsv").string());
  return m;
}

std::vector<MixPair> make_mixture_eval_set(const DatasetManifest& manifest, int n_pairs,
                                           uint64_t seed) {
  auto eval = manifest.split_entries("eval");
  if (eval.empty()) throw std::invalid_argument("make_mixture_eval_set: empty eval split");
  std::set<int> classes;
  for (const auto* e : eval) classes.insert(e->labels.begin(), e->labels.end());
  if (classes.size() < 2)
    throw std::invalid_argument("make_mixture_eval_set: need >= 2 classes in eval split");

  const int total = n_pairs > 0 ? n_pairs : static_cast<int>(eval.size());
  std::vector<MixPair> pairs;
  pairs.reserve(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) {
    const ManifestEntry* a = eval[static_cast<size_t>(i) % eval.size()];
    std::vector<const ManifestEntry*> others;
    for (const auto* e : eval) {
      bool shared = false;
      for (int la : a->labels)
        for (int lb : e->labels)
          if (la == lb) shared = true;
      if (!shared) others.push_back(e);
    }
    Rng rng(Rng::derive(seed, 0x70616972, static_cast<uint64_t>(i)));
    const ManifestEntry* b = others[static_cast<size_t>(rng.below(others.size()))];
    pairs.push_back(MixPair{a->clip_id, b->clip_id,
                            Rng::derive(seed, 0x6d697873, static_cast<uint64_t>(i))});
  }
  return pairs;
}

IngestResult ingest_wav_folder(const std::string& root, FolderLayout layout,
                               double min_clip_seconds) {
  IngestResult out;
  DatasetManifest& m = out.manifest;
  struct Item {
    std::string path;
    std::string class_name;
    std::string split;
  };
  std::vector<Item> items;
  std::vector<std::string> class_names;

  if (layout == FolderLayout::kFolderPerClass) {
    std::vector<std::string> dirs;
    for (const auto& d : fs::directory_iterator(root))
      if (d.is_directory()) dirs.push_back(d.path().filename().string());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
      std::vector<std::string> wavs;
      for (const auto& f : fs::directory_iterator(fs::path(root) / dir))
        if (f.path().extension() == ".wav") wavs.push_back(f.path().filename().string());
      if (wavs.empty()) throw std::runtime_error("ingest: empty class folder " + dir);
      std::sort(wavs.begin(), wavs.end());
      class_names.push_back(dir);
      for (const auto& w : wavs) items.push_back({dir + "/" + w, dir, ""});
    }
  } else {
    std::ifstream f(fs::path(root) / "manifest.csv");
    if (!f) throw std::runtime_error("ingest: missing manifest.csv under " + root);
    std::string line;
    int row = 0;
    while (std::getline(f, line)) {
      ++row;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream is(line);
      Item it;
      std::getline(is, it.path, ',');
      std::getline(is, it.class_name, ',');
      std::getline(is, it.split, ',');
      if (it.path.empty() || it.class_name.empty())
        throw std::runtime_error("ingest: malformed csv row " + std::to_string(row));
      if (!fs::exists(fs::path(root) / it.path))
        throw std::runtime_error("ingest: missing file at csv row " + std::to_string(row) +
                                 ": " + it.path);
      if (std::find(class_names.begin(), class_names.end(), it.class_name) ==
          class_names.end())
        class_names.push_back(it.class_name);
      items.push_back(std::move(it));
    }
    std::sort(class_names.begin(), class_names.end());
  }

  int sample_rate = 0;
  std::vector<std::string> rate_offenders;
  std::map<std::string, int> split_counter;
  for (const auto& it : items) {
    AudioClip clip = load_wav((fs::path(root) / it.path).string());
    if (sample_rate == 0) sample_rate = clip.sample_rate;
    if (clip.sample_rate != sample_rate) {
      rate_offenders.push_back(it.path + " (" + std::to_string(clip.sample_rate) + " Hz)");
      continue;
    }
    if (clip.duration_s() < min_clip_seconds) {
      out.rejected.push_back(it.path + ": shorter than " +
                             std::to_string(min_clip_seconds) + " s");
      continue;
    }
    ManifestEntry e;
    e.clip_id = it.path;
    e.path = it.path;
    const int cls = static_cast<int>(
        std::find(class_names.begin(), class_names.end(), it.class_name) -
        class_names.begin());
    e.labels = {cls};
    if (!it.split.empty()) {
      e.split = it.split;
    } else {
      const int k = split_counter[it.class_name]++;
      e.split = k % 5 == 4 ? "eval" : "train";
    }
    m.entries.push_back(std::move(e));
  }
  if (!rate_offenders.empty()) {
    std::string msg = "ingest: mixed sample rates:";
    for (const auto& o : rate_offenders) msg += "\n  " + o;
    throw std::runtime_error(msg);
  }
  m.sample_rate = sample_rate;
  m.n_classes = static_cast<int>(class_names.size());
  m.clip_seconds = min_clip_seconds;
  return out;
}

Dataset Dataset::load(const DatasetManifest& m, const std::string& base_dir) {
  Dataset ds;
  ds.n_classes = m.n_classes;
  ds.sample_rate = m.sample_rate;
  for (const auto& e : m.entries) {
    AudioClip clip = load_wav((fs::path(base_dir) / e.path).string(), m.sample_rate);
    clip.clip_id = e.clip_id;
    std::vector<uint8_t> hot(static_cast<size_t>(m.n_classes), 0);
    for (int l : e.labels) hot[static_cast<size_t>(l)] = 1;
    clip.labels = std::move(hot);
    if (e.split == "train")
      ds.train_idx.push_back(ds.clips.size());
    else
      ds.eval_idx.push_back(ds.clips.size());
    ds.clips.push_back(std::move(clip));
  }
  return ds;
}

const AudioClip* Dataset::find(const std::string& clip_id) const {
  for (const auto& c : clips)
    if (c.clip_id == clip_id) return &c;
  return nullptr;
}

std::vector<const AudioClip*> Dataset::eval_pool() const {
  std::vector<const AudioClip*> out;
  for (size_t i : eval_idx) out.push_back(&clips[i]);
  return out;
}

int Dataset::class_of(size_t idx) const {
  const auto& labels = *clips[idx].labels;
  for (size_t c = 0; c < labels.size(); ++c)
    if (labels[c]) return static_cast<int>(c);
  return -1;
}

}  // namespace caresep::data
