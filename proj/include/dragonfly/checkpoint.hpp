#pragma once

// Checkpoint directory: one DFT1 file per tensor plus index.json with the ensemble
// spec, the training config and a content hash for every file.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "dragonfly/models.hpp"
#include "dragonfly/train.hpp"

namespace dragonfly {

struct Checkpoint {
  EnsembleSpec spec;
  TrainConfig config;
  std::vector<std::string> classes;
  ParameterStore<double> params;
  nlohmann::json extra;  ///< free-form metadata (trial result, dataset hash, ...)
};

/// Writes `dir`/index.json, `dir`/tensors/*.dft1 and `dir`/stats/*.dft1; returns the index.
nlohmann::json save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);

/// Reads a checkpoint, verifying every hash; IoError naming the offending file.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dragonfly
