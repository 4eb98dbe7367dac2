#pragma once

// Frustum branches N1..N12 and the integrator networks N13..N17.

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dragonfly/layers.hpp"
#include "dragonfly/params.hpp"

namespace dragonfly {

enum class FrustumShape { CylindricWide, CylindricElongated, Contractive, Hyperbolic, Ovoid, Expansive };

std::string to_string(FrustumShape shape);
FrustumShape parse_frustum_shape(const std::string& text);

/// Channel list of the frustum scaled by `width_scale`, rounded to nearest, minimum 1.
std::vector<Index> canonical_frustum(FrustumShape shape, double width_scale);

enum class ConvKind { Conv2D, Dsc };

/// How convolutions and pools treat borders. Same keeps ceil(in / stride) extents so
/// three-block branches fit small images; Valid is the unpadded floor rule.
enum class PaddingMode { Same, Valid };

std::string to_string(ConvKind kind);
std::string to_string(PaddingMode mode);
PaddingMode parse_padding_mode(const std::string& text);

struct PoolStage {
  Index window;
  Index stride;
  bool operator==(const PoolStage&) const = default;
};

struct BranchSpec {
  int index = 1;  ///< network number 1..12
  ConvKind conv = ConvKind::Conv2D;
  FrustumShape shape = FrustumShape::CylindricWide;
  PoolStage final_avg{5, 1};
  PoolStage final_max{5, 2};
  double width_scale = 1.0;
  Index kernel = 3;
  PoolStage block_pool{5, 2};  ///< max pool inside every non-final block
};

/// Table of the twelve branches at the given width scale.
BranchSpec canonical_branch(int index, double width_scale);

/// Pool token such as "F5[v1]" (average) or "G5[v2]" (max); ParseError otherwise.
PoolStage parse_pool_stage(const std::string& token, bool average);

/// Overlays the keys present in `j` (conv, shape, kernel, width_scale, pool tokens) on `base`.
BranchSpec branch_from_json(const nlohmann::json& j, BranchSpec base);

struct InputDims {
  Index height = 32;
  Index width = 32;
  Index channels = 1;
  bool operator==(const InputDims&) const = default;
};

struct IntegratorWiring {
  int index;                 ///< 13..17
  std::vector<int> inputs;   ///< network numbers feeding it
};

/// Fixed community wiring: N13<-(1,2), N14<-(3..6), N15<-(7,8), N16<-(9..12), N17<-(1..16).
const std::vector<IntegratorWiring>& dragonfly_wiring();

struct EnsembleSpec {
  Index classes = 2;
  InputDims input;
  double width_scale = 0.125;
  PaddingMode padding = PaddingMode::Same;
  IntegratorMode integrator_mode = IntegratorMode::Dense;
  std::vector<BranchSpec> branches;
  std::vector<IntegratorWiring> integrators;
};

nlohmann::json to_json(const EnsembleSpec& spec);
EnsembleSpec ensemble_from_json(const nlohmann::json& j);

/// One executable stage of a branch with the extent it produces.
struct Stage {
  LayerSpec layer;
  std::string name;  ///< parameter prefix, e.g. "N3.block1.conv"
  Shape output;      ///< per-example C x H x W (or K for the head)
};

/// Resolved branch: channels, stage list with propagated extents, parameter shapes.
struct BranchPlan {
  BranchSpec spec;
  Index classes = 0;
  InputDims input;
  PaddingMode padding = PaddingMode::Same;
  std::vector<Index> channels;
  std::vector<Stage> stages;
  Index feature_length = 0;
  std::map<std::string, Shape> parameter_shapes;

  Index parameter_count() const;
  /// Scalars held by convolution weights only.
  Index conv_parameter_count() const;
  std::vector<std::string> notation() const;
};

/// Resolves a branch; ShapeError naming the stage when an extent drops below 1.
BranchPlan build_branch(const BranchSpec& spec, Index classes, InputDims input, PaddingMode padding = PaddingMode::Same);

EnsembleSpec dragonfly_spec(Index classes, InputDims input, double width_scale,
                            PaddingMode padding = PaddingMode::Same,
                            IntegratorMode integrator_mode = IntegratorMode::Dense);

inline constexpr int kNetworkCount = 17;
inline constexpr int kBranchCount = 12;

/// Per-network [batch, K] distributions, index 0 holding N1.
template <typename Scalar>
using HeadOutputs = std::array<Var<Scalar>, kNetworkCount>;

/// Executable DRAGONFLY graph. Holds no parameter values, only the resolved plan;
/// values live in a ParameterStore so trials and checkpoints stay independent.
template <typename Scalar>
class Ensemble {
 public:
  explicit Ensemble(EnsembleSpec spec);

  const EnsembleSpec& spec() const noexcept { return spec_; }
  const std::vector<BranchPlan>& branches() const noexcept { return plans_; }

  /// Registers every parameter with He-uniform weights, unit BN scale, zero BN shift,
  /// running statistics (0, 1) and the integrator initialization.
  ParameterStore<Scalar> init_parameters(Rng& rng) const;

  /// One pass producing all 17 heads. `x` is [batch, C, H, W].
  /// training=true normalizes with batch statistics; `running` (if given) is updated.
  HeadOutputs<Scalar> forward(Tape<Scalar>& tape, const ParameterStore<Scalar>& params, Var<Scalar> x,
                              bool training = false,
                              std::map<std::string, RunningStats<Scalar>>* running = nullptr) const;

  /// forward on a non-recording tape, returning per-head [batch, K] probability tensors.
  std::array<Tensor<Scalar>, kNetworkCount> predict(const ParameterStore<Scalar>& params, const Tensor<Scalar>& batch) const;

  Index parameter_count() const;

 private:
  Var<Scalar> branch_forward(const BranchPlan& plan, Tape<Scalar>& tape, const ParameterStore<Scalar>& params,
                             Var<Scalar> x, bool training,
                             std::map<std::string, RunningStats<Scalar>>* running) const;

  EnsembleSpec spec_;
  std::vector<BranchPlan> plans_;
};

}  // namespace dragonfly
