#pragma once

// Procedural glyph corpus standing in for the geometron alphabet: binary letters drawn
// from stroke skeletons and a texture-encrypted variant where only orientation carries
// the shape.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "dragonfly/random.hpp"
#include "dragonfly/tensor.hpp"

namespace dragonfly {

struct JitterSpec {
  double max_rotation_deg = 15.0;
  double scale_min = 0.8;
  double scale_max = 1.1;
  double max_translation = 0.1;  ///< fraction of the image side

  static JitterSpec none() { return {0.0, 1.0, 1.0, 0.0}; }
};

struct TextureParams {
  double foreground_angle_deg = 45.0;
  double background_angle_deg = 135.0;
  double angle_spread_deg = 10.0;
  double freq_lo = 0.12;  ///< cycles per pixel
  double freq_hi = 0.25;
  int components = 24;
};

/// Letters with a stroke skeleton.
const std::string& glyph_alphabet();

/// Binary [1, size, size] image of `letter` in {0, 1}. Draws jitter from `rng`.
Tensor<double> render_glyph(char letter, Index size, const JitterSpec& jitter, Rng& rng);

/// Texture-encrypts a binary [1, H, W] image; output in [0, 1] with equal region means.
Tensor<double> encrypt_sva(const Tensor<double>& binary, const TextureParams& params, Rng& rng);

struct ExperimentPreset {
  int id;
  std::string name;
  std::string letters;
  bool encrypted;
};

/// 1: binary {I, O}; 2: binary {B, D, O, Q}; 3: encrypted {I, O}.
const ExperimentPreset& experiment_preset(int id);

struct SplitCounts {
  Index train = 200;  ///< per class
  Index val = 40;
  Index test = 40;
  bool operator==(const SplitCounts&) const = default;
};

struct SynthConfig {
  int experiment = 1;
  SplitCounts counts;
  std::uint64_t seed = 1;
  Index image_size = 32;
  JitterSpec jitter;
  TextureParams texture;
  Index previews_per_class = 2;
};

nlohmann::json to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct Split {
  Tensor<double> images;        ///< [N, 1, H, W]
  Tensor<std::int32_t> labels;  ///< [N]
  Index size() const { return labels.empty() ? 0 : labels.size(); }
};

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names = {"train", "val", "test"};
  return names;
}

struct Dataset {
  SynthConfig config;
  std::vector<std::string> classes;
  Split train, val, test;

  const Split& split(const std::string& name) const;
  Index class_count() const { return static_cast<Index>(classes.size()); }
};

/// One sample; its pixels depend only on (seed, split, class, index).
Tensor<double> synth_sample(const SynthConfig& config, int split_id, Index class_index, Index sample_index);

/// In-memory dataset; class-interleaved order within each split.
Dataset generate_dataset(const SynthConfig& config);

/// Writes DFT1 shards, PGM previews and manifest.json under `out`; returns the manifest.
nlohmann::json synth_dataset(const SynthConfig& config, const std::filesystem::path& out);

/// Loads a dataset written by synth_dataset, verifying shard hashes.
Dataset load_dataset(const std::filesystem::path& dir);

/// Accuracy (%) of a nearest-centroid classifier fitted on train and scored on test.
double reference_accuracy(const Dataset& data);

}  // namespace dragonfly
