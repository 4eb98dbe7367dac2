#pragma once

// Layer vocabulary of the frustum networks and the softlog-softmax integrator.
//
// Notation tokens: C3[128] (2-D convolution, 3x3, 128 filters), D3[96] (depthwise
// separable), F7[v3] (average pool 7x7 stride 3), G5[v2] (max pool 5x5 stride 2),
// plus the keywords BN, ReLU, DCN, Softmax and Integrator[1,2,...].

#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dragonfly/autodiff.hpp"
#include "dragonfly/random.hpp"
#include "dragonfly/softlog.hpp"

namespace dragonfly {

struct Conv2DLayer {
  Index kernel;
  Index filters;
  bool operator==(const Conv2DLayer&) const = default;
};

struct DscLayer {
  Index kernel;
  Index filters;
  bool operator==(const DscLayer&) const = default;
};

struct BatchNormLayer {
  bool operator==(const BatchNormLayer&) const = default;
};

struct ReluLayer {
  bool operator==(const ReluLayer&) const = default;
};

struct MaxPoolLayer {
  Index window;
  Index stride;
  bool operator==(const MaxPoolLayer&) const = default;
};

struct AvgPoolLayer {
  Index window;
  Index stride;
  bool operator==(const AvgPoolLayer&) const = default;
};

struct DcnLayer {
  bool operator==(const DcnLayer&) const = default;
};

struct SoftmaxLayer {
  bool operator==(const SoftmaxLayer&) const = default;
};

struct IntegratorLayer {
  std::vector<int> branches;  ///< 1-based network numbers feeding the integrator
  bool operator==(const IntegratorLayer&) const = default;
};

using LayerSpec = std::variant<Conv2DLayer, DscLayer, BatchNormLayer, ReluLayer, MaxPoolLayer, AvgPoolLayer, DcnLayer,
                               SoftmaxLayer, IntegratorLayer>;

/// Parses one token. Throws ParseError carrying the offending character offset.
LayerSpec parse_layer_notation(std::string_view text);

/// Inverse of parse_layer_notation.
std::string format_layer(const LayerSpec& layer);

enum class IntegratorMode { Scalar, Dense };

std::string to_string(IntegratorMode mode);
IntegratorMode parse_integrator_mode(const std::string& text);

/// Integrator parameters: one weight per branch (Scalar) or a K x (B*K) matrix (Dense).
template <typename Scalar>
struct IntegratorWeights {
  IntegratorMode mode = IntegratorMode::Dense;
  Tensor<Scalar> weights;

  static Shape expected_shape(IntegratorMode mode, Index branches, Index classes) {
    if (mode == IntegratorMode::Scalar) return {branches};
    return {classes, branches * classes};
  }

  void validate(Index branches, Index classes) const {
    if (weights.shape() != expected_shape(mode, branches, classes)) {
      throw ShapeError("integrator weights " + shape_string(weights.shape()) + " do not match " +
                       std::to_string(branches) + " branches of " + std::to_string(classes) + " classes (" +
                       to_string(mode) + " mode expects " + shape_string(expected_shape(mode, branches, classes)) +
                       ")");
    }
  }
};

/// Centered uniform with bound sqrt(6 / fan_in).
template <typename Scalar>
Tensor<Scalar> he_uniform(Shape shape, Index fan_in, Rng& rng);

/// Scalar mode draws alpha_b ~ U[0.5, 1.5] / B. Dense mode places those same per-branch
/// scalars on identity blocks, so both modes start from the same function.
template <typename Scalar>
IntegratorWeights<Scalar> init_integrator(IntegratorMode mode, Index branches, Index classes, Rng& rng);

/// Vectorizes each example of `features` and applies the K x N matrix, no bias: [B, K] logits.
template <typename Scalar>
Var<Scalar> dcn_apply(Var<Scalar> features, Var<Scalar> dcn);

/// softmax of the per-class combination of softlog(branch_probs[b]). Inputs are [B, K] batches.
/// Scalar mode: weights [branches]. Dense mode: weights [K, branches * K] over the concatenation.
template <typename Scalar>
Var<Scalar> softlog_softmax_integrator(const std::vector<Var<Scalar>>& branch_probs, Var<Scalar> weights,
                                       IntegratorMode mode);

/// Same map on plain distributions, evaluated directly without a tape.
template <typename Scalar>
ProbVec<Scalar> softlog_softmax_integrator(const std::vector<ProbVec<Scalar>>& branch_probs,
                                           const IntegratorWeights<Scalar>& weights);

}  // namespace dragonfly
