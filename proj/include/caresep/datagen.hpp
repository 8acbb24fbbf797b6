#pragma once

#include <string>
#include <vector>

#include "caresep/audio.hpp"

namespace caresep::data {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool defined() const { return hi > lo; }
  bool overlaps(const Range& o) const {
    return defined() && o.defined() && lo < o.hi && o.lo < hi;
  }
};

// Parametric generator for one synthetic sound class. Classes of the same
// family must be disjoint in at least one range so they stay separable.
struct SoundClassSpec {
  enum class Family { kHarmonicTone, kBandNoise, kAmNoise, kChirp, kClickTrain, kFmTone };
  int class_id = 0;
  Family family = Family::kHarmonicTone;
  Range fundamental_hz;   // tones / chirp start / click resonance
  Range bandwidth_hz;     // noise band (absolute low..high edge)
  Range am_rate_hz;
  Range chirp_slope_hz_s;
  Range click_rate_hz;
};

// The default desk set: four acoustically disjoint classes.
std::vector<SoundClassSpec> default_desk_classes();

// Deterministic rendering of one clip (pure function of spec + seed).
AudioClip render_clip(const SoundClassSpec& spec, uint64_t seed, double clip_seconds,
                      int sample_rate);

struct ManifestEntry {
  std::string clip_id;
  std::string path;  // relative to the manifest directory
  std::vector<int> labels;  // class indices
  std::string split;        // "train" | "eval"
  uint64_t seed = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int sample_rate = 16000;
  double clip_seconds = 1.0;
  int n_classes = 0;

  std::vector<const ManifestEntry*> split_entries(const std::string& split) const;
};

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// Renders n_per_class clips per class to <out_dir>/wavs and writes
// <out_dir>/manifest.tsv with a per-class 80/20 train/eval split.
DatasetManifest synth_dataset(const std::vector<SoundClassSpec>& specs, int n_per_class,
                              double clip_seconds, int sample_rate, uint64_t seed,
                              const std::string& out_dir);

struct MixPair {
  std::string clip_a;  // eval clip
  std::string clip_b;  // cross-class partner
  uint64_t mix_seed = 0;
};

// One cross-class partner per sampled eval clip; n_pairs == 0 means one pair
// per eval clip (the ESC-50 protocol shape).
std::vector<MixPair> make_mixture_eval_set(const DatasetManifest& manifest,
                                           int n_pairs, uint64_t seed);

enum class FolderLayout { kFolderPerClass, kCsvManifest };

struct IngestResult {
  DatasetManifest manifest;
  std::vector<std::string> rejected;  // per-file reports
};

// Labeled-wav-folder loader. folder-per-class: one subdirectory per class.
// csv-manifest: lines of path,class_name[,split] relative to root.
IngestResult ingest_wav_folder(const std::string& root, FolderLayout layout,
                               double min_clip_seconds = 0.0);

// In-memory dataset with loaded waveforms and multi-hot labels.
struct Dataset {
  std::vector<AudioClip> clips;
  std::vector<size_t> train_idx;
  std::vector<size_t> eval_idx;
  int n_classes = 0;
  int sample_rate = 16000;

  static Dataset load(const DatasetManifest& m, const std::string& base_dir);
  const AudioClip* find(const std::string& clip_id) const;
  std::vector<const AudioClip*> eval_pool() const;
  int class_of(size_t idx) const;  // first label
};

}  // namespace caresep::data
