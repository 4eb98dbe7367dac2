#pragma once

// Minibatch SGD-with-momentum training of the ensemble under the N17 objective,
// evaluation, and Monte-Carlo trials over initializations.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "dragonfly/models.hpp"
#include "dragonfly/synth.hpp"

namespace dragonfly {

/// PlainLog replaces softlog with the unprotected logarithm; it exists for the stress run.
enum class LossMode { Softlog, PlainLog };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& text);

struct TrainConfig {
  double learning_rate = 0.005;
  double momentum = 0.9;
  Index batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
  double width_scale = 0.125;
  LossMode loss = LossMode::Softlog;
  bool auxiliary_loss = false;  ///< add equal-weight losses on N13..N16
  PaddingMode padding = PaddingMode::Same;
  IntegratorMode integrator_mode = IntegratorMode::Dense;
  int head = 17;  ///< head whose test accuracy feeds Z

  /// Human-readable violations, empty when valid. A zero learning rate is allowed
  /// (it freezes the learnable parameters).
  std::vector<std::string> errors() const;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; invalid values raise std::invalid_argument.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Spec of the ensemble trained on `data` with `config`'s architecture options.
/// A non-empty `branches` replaces the canonical branch table.
EnsembleSpec ensemble_for(const Dataset& data, const TrainConfig& config, const std::vector<BranchSpec>& branches = {});

/// Deterministic parameter draw for `seed`.
ParameterStore<double> init_params(const Ensemble<double>& model, std::uint64_t seed);

using HeadArray = std::array<double, kNetworkCount>;

struct TrialResult {
  std::uint64_t seed = 0;
  double learning_rate = 0;
  std::map<std::string, HeadArray> accuracy;  ///< split -> per-head accuracy in %
  std::vector<double> loss_curve;             ///< mean loss per completed epoch
  double wall_seconds = 0;
  bool diverged = false;
  std::optional<long> diverged_step;
  std::string divergence_op;
  std::string error;  ///< non-empty when the trial failed outright

  bool ok() const { return error.empty() && !diverged; }
};

nlohmann::json to_json(const TrialResult& result);

struct TrainOutcome {
  TrialResult result;
  ParameterStore<double> params;
};

/// Trains from `init_params(model, config.seed)` and scores every head on all splits.
/// A non-finite loss stops training and sets the divergence flag with the step index.
TrainOutcome train(const Ensemble<double>& model, const Dataset& data, const TrainConfig& config);

/// Same as above but starting from the given parameters.
TrainOutcome train_from(const Ensemble<double>& model, const Dataset& data, const TrainConfig& config,
                        ParameterStore<double> params);

/// Per-head [N, K] outputs in inference mode, computed in batches of `batch`.
std::array<Tensor<double>, kNetworkCount> predict_split(const Ensemble<double>& model, const ParameterStore<double>& params,
                                                        const Tensor<double>& images, Index batch = 64);

/// Index of the largest entry of each row; ties go to the lowest class.
std::vector<Index> argmax_rows(const Tensor<double>& probs);

struct HeadEvaluation {
  double accuracy = 0;        ///< %
  Eigen::MatrixXi confusion;  ///< rows true class, columns predicted class
};

struct Evaluation {
  Index count = 0;
  std::array<HeadEvaluation, kNetworkCount> heads;
};

Evaluation evaluate_outputs(const std::array<Tensor<double>, kNetworkCount>& outputs, const Tensor<std::int32_t>& labels,
                            Index classes);
Evaluation evaluate(const Ensemble<double>& model, const ParameterStore<double>& params, const Split& split,
                    Index classes);

nlohmann::json to_json(const Evaluation& eval);

struct MonteCarloConfig {
  TrainConfig base;
  int trials = 5;
  std::vector<double> learning_rates = {0.001, 0.005, 0.01};
  int workers = 1;  ///< further capped by DRAGONFLY_WORKERS
  std::vector<BranchSpec> branches;  ///< empty keeps the canonical table
};

struct MonteCarloResult {
  /// Learning-rate major, trial minor, independent of the completion order.
  std::vector<TrialResult> trials;
  std::map<double, std::vector<double>> z_per_lr;
  std::vector<double> z_pooled;
  int head = 17;
  std::vector<std::string> failures;
};

nlohmann::json to_json(const MonteCarloResult& result);

/// Seed of trial `t`; the same across learning rates so each rate starts from the same draws.
std::uint64_t trial_seed(std::uint64_t base_seed, int trial);

/// Worker count after applying the DRAGONFLY_WORKERS cap.
int effective_workers(int requested);

/// Called once per finished trial (from the worker thread, serialized by a mutex).
using TrialCallback = std::function<void(const TrialResult&, const TrainOutcome*)>;

/// Runs trials * |lrs| independent trainings. Failures are recorded, not fatal.
MonteCarloResult monte_carlo(const Dataset& data, const MonteCarloConfig& config, const TrialCallback& on_trial = {});

/// Runs a single Monte-Carlo cell; monte_carlo is a loop over these.
TrialResult run_trial(const Dataset& data, const TrainConfig& base, int trial, double learning_rate,
                      const std::vector<BranchSpec>& branches = {});

struct StressReport {
  LossMode mode = LossMode::Softlog;
  int steps_requested = 0;
  int steps_completed = 0;
  bool non_finite = false;
  std::string op;  ///< op that produced the first non-finite value
  std::vector<double> losses;
};

/// Two-level softmax cascade on logits of magnitude >= 1e4 whose labels sit on the
/// underflowing class, trained for `steps` SGD steps.
StressReport stress_run(LossMode mode, int steps = 100, std::uint64_t seed = 1);

}  // namespace dragonfly
