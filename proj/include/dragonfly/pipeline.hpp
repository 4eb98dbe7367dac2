#pragma once

// Declarative experiment configs and the synth -> train -> montecarlo -> perf -> sld
// orchestration behind the command-line tool.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dragonfly/checkpoint.hpp"
#include "dragonfly/synth.hpp"
#include "dragonfly/train.hpp"

namespace dragonfly {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;

struct ExperimentConfig {
  int experiment = 1;
  SynthConfig dataset;
  TrainConfig train;
  int trials = 5;
  std::vector<double> learning_rates = {0.001, 0.005, 0.01};
  int workers = 1;
  std::string split = "test";  ///< split analysed by the sld stage
  int histogram_bins = 20;
  std::vector<BranchSpec> branches;  ///< resolved N1..N12
};

/// Defaults for a preset, branches resolved from the canonical table.
ExperimentConfig default_config(int experiment);

/// Fully defaulted form, including the per-branch notation lists.
nlohmann::json to_json(const ExperimentConfig& config);

/// Ensemble the config trains.
EnsembleSpec experiment_spec(const ExperimentConfig& config);

struct ConfigIssue {
  std::string key;  ///< dotted path, e.g. "branches[0].final_max"
  int line = 0;     ///< 1-based line of the key in the source text, 0 when absent
  std::string message;

  std::string describe() const;
};

struct ConfigValidation {
  std::optional<ExperimentConfig> config;
  std::vector<ConfigIssue> issues;
  bool ok() const { return issues.empty(); }
};

/// Parses (comments allowed), fills defaults and checks every section, collecting all issues.
ConfigValidation validate_config_text(const std::string& text);
ConfigValidation validate_config(const std::filesystem::path& path);

/// Commented template holding every key at its default.
std::string config_template(int experiment = 1);

// ---- stage helpers shared by the subcommands ------------------------------------

/// Trains one model and writes `dir`/checkpoint plus `dir`/result.json; returns the result JSON.
nlohmann::json train_to_directory(const Dataset& data, const TrainConfig& config, const std::vector<BranchSpec>& branches,
                                  const std::filesystem::path& dir);

/// Dataset a checkpoint was trained on: loaded from `data_dir` when given, otherwise
/// regenerated from the synth config stored in the checkpoint.
Dataset dataset_for_checkpoint(const Checkpoint& checkpoint, const std::optional<std::filesystem::path>& data_dir);

/// evaluation.json with accuracies and confusion matrices of every head on `splits`.
nlohmann::json write_evaluation(const std::filesystem::path& out, const Checkpoint& checkpoint, const Dataset& data,
                                const std::vector<std::string>& splits);

/// perf.csv (pooled Z per head), perf_by_lr.csv and perf.json from a trials document.
nlohmann::json write_perf(const std::filesystem::path& out, const nlohmann::json& montecarlo, const std::string& experiment);

/// report.csv, report.json, histograms/*.svg, failures.json and failures/*.svg.
nlohmann::json write_sld(const std::filesystem::path& out, const Checkpoint& checkpoint, const Dataset& data,
                         const std::string& split, int bins);

// ---- orchestration -----------------------------------------------------------------

struct StageStatus {
  std::string name;
  std::string hash;
  bool skipped = false;
  double seconds = 0;
};

struct PipelineResult {
  int exit_code = kExitOk;
  std::string failed_stage;
  std::string message;
  std::vector<StageStatus> stages;
  nlohmann::json index;

  nlohmann::json to_json() const;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Runs every stage into `out`, skipping stages whose input hash matches the previous run.
/// Stage failures return kExitStage naming the stage; finished artifacts stay on disk.
PipelineResult run_pipeline(const ExperimentConfig& config, const std::filesystem::path& out,
                            const ProgressFn& progress = {});

}  // namespace dragonfly
