#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dragonfly/tensor.hpp"

namespace dragonfly {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, Index id) : tape_(tape), id_(id) {}

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape<Scalar>& tape() const { return *tape_; }
  Index id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  Index id_ = -1;
};

template <typename Scalar>
using GradientMap = std::map<std::string, Tensor<Scalar>>;

/// What a forward op does when it produces NaN/Inf.
enum class FiniteCheck {
  Throw,   ///< raise NonFiniteError naming the op immediately
  Record,  ///< remember the first offending op; backward() raises it
};

/// Execution record for reverse-mode differentiation. Confined to one thread.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<Scalar>& out_grad)>;

  struct Node {
    std::string op;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    std::vector<Index> inputs;
    BackwardFn backward;
    std::string parameter;
    bool requires_grad = false;
  };

  explicit Tape(bool recording = true, FiniteCheck check = FiniteCheck::Throw)
      : recording_(recording), check_(check) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value, std::string op = "constant");
  /// Registers a named parameter; a second call with the same name returns the first handle.
  Var<Scalar> parameter(const std::string& name, const Tensor<Scalar>& value);
  Var<Scalar> record(std::string op, Tensor<Scalar> value, std::vector<Index> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar loss. Every registered parameter gets one entry;
  /// parameters the loss does not reach get zeros.
  GradientMap<Scalar> backward(Var<Scalar> loss);

  /// Zero-initialized gradient accumulator of a node.
  Tensor<Scalar>& grad_buffer(Index node);
  bool needs_grad(Index node) const { return nodes_[static_cast<std::size_t>(node)].requires_grad; }

  bool recording() const noexcept { return recording_; }
  const Node& node(Index id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  Index size() const noexcept { return static_cast<Index>(nodes_.size()); }
  std::vector<std::string> parameter_names() const;
  std::optional<Var<Scalar>> find_parameter(const std::string& name);

  /// Node ids whose backward function ran during the last backward(), in call order.
  const std::vector<Index>& last_backward_order() const noexcept { return backward_order_; }
  const std::optional<std::string>& first_non_finite_op() const noexcept { return first_non_finite_; }

 private:
  std::vector<Node> nodes_;
  std::map<std::string, Index> parameters_;
  std::vector<Index> backward_order_;
  std::optional<std::string> first_non_finite_;
  bool recording_;
  FiniteCheck check_;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape_->node(id_).value;
}

// ---- options ---------------------------------------------------------------

struct ConvOptions {
  Index stride = 1;
  Index pad = 0;  ///< zero padding on every spatial border
};

struct PoolOptions {
  Index window = 1;
  Index stride = 1;
  Index pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;
};

/// floor((in + pad_before + pad_after - window) / stride) + 1; ShapeError when below 1.
Index output_extent(Index in, Index window, Index stride, Index pad_before, Index pad_after, const std::string& op);

/// Padding (before, after) that makes a window/stride pass produce ceil(in / stride) outputs.
std::pair<Index, Index> same_padding(Index in, Index window, Index stride);

template <typename Scalar>
struct RunningStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
};

struct BatchNormOptions {
  bool training = true;
  bool update_running = true;
  double eps = 1e-5;
  double momentum = 0.9;  ///< running = momentum * running + (1 - momentum) * batch
};

// ---- ops -------------------------------------------------------------------

/// [M,N] x [N,P] -> [M,P]
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);

/// x [B,N] times the transpose of w [K,N] -> [B,K]; no bias.
template <typename Scalar>
Var<Scalar> dense(Var<Scalar> x, Var<Scalar> w);

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor);

/// Sum of all entries -> [1]
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a);

/// factor * sum(a * weights) with constant weights -> [1]
template <typename Scalar>
Var<Scalar> weighted_sum(Var<Scalar> a, const Tensor<Scalar>& weights, Scalar factor = Scalar(1));

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape);

/// Keeps the leading (batch) axis and flattens the rest.
template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> a);

/// x [N,C,H,W], w [O,C,L,L] -> [N,O,H',W']
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> w, ConvOptions options = {});

/// Channelwise spatial convolution: x [N,C,H,W], w [C,1,L,L] -> [N,C,H',W']
template <typename Scalar>
Var<Scalar> depthwise_conv2d(Var<Scalar> x, Var<Scalar> w, ConvOptions options = {});

/// 1x1 convolution: x [N,C,H,W], w [O,C] -> [N,O,H,W]
template <typename Scalar>
Var<Scalar> pointwise_conv(Var<Scalar> x, Var<Scalar> w);

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x);

/// Per-channel normalization of x [N,C,...] with learnable gamma/beta [C].
/// Training mode normalizes with batch statistics and (optionally) updates `stats`;
/// inference mode uses `stats`.
template <typename Scalar>
Var<Scalar> batchnorm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, RunningStats<Scalar>* stats,
                      BatchNormOptions options = {});

template <typename Scalar>
Var<Scalar> max_pool2d(Var<Scalar> x, PoolOptions options);

/// Average over the in-bounds cells of each window.
template <typename Scalar>
Var<Scalar> avg_pool2d(Var<Scalar> x, PoolOptions options);

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, Index axis);

/// sum_b weights[b] * inputs[b]; weights has one entry per input.
template <typename Scalar>
Var<Scalar> affine_combine(const std::vector<Var<Scalar>>& inputs, Var<Scalar> weights);

/// Row-wise softmax over the last axis of a rank-2 tensor (max-subtracted).
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x);

/// Elementwise softlog; DomainError outside [-1e-9, 1 + 1e-9].
template <typename Scalar>
Var<Scalar> softlog(Var<Scalar> x);

/// Elementwise natural log with no protection; log(0) yields -inf.
template <typename Scalar>
Var<Scalar> log(Var<Scalar> x);

}  // namespace dragonfly
