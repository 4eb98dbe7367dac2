#include "dragonfly/layers.hpp"

#include <cctype>
#include <charconv>
#include <cmath>

namespace dragonfly {

namespace {

class Cursor {
 public:
  explicit Cursor(std::string_view text) : text_(text) {}

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ >= text_.size(); }
  char peek() const { return done() ? '\0' : text_[pos_]; }

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("layer notation '" + std::string(text_) + "': " + what + " at position " + std::to_string(pos_),
                     pos_);
  }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  bool accept(char c) {
    if (peek() != c) return false;
    ++pos_;
    return true;
  }

  Index positive() {
    const std::size_t start = pos_;
    while (!done() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    if (start == pos_) fail("expected a positive integer");
    long long value = 0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, value);
    if (ec != std::errc() || value <= 0) {
      pos_ = start;
      fail("expected a positive integer");
    }
    return static_cast<Index>(value);
  }

  bool keyword(std::string_view word) {
    if (text_.substr(pos_, word.size()) != word) return false;
    pos_ += word.size();
    return true;
  }

  void finish() {
    if (!done()) fail("unexpected trailing text");
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

LayerSpec parse_layer_notation(std::string_view text) {
  Cursor cur(text);
  LayerSpec out;
  if (cur.keyword("BN")) {
    out = BatchNormLayer{};
  } else if (cur.keyword("ReLU")) {
    out = ReluLayer{};
  } else if (cur.keyword("DCN")) {
    out = DcnLayer{};
  } else if (cur.keyword("Softmax")) {
    out = SoftmaxLayer{};
  } else if (cur.keyword("Integrator")) {
    cur.expect('[');
    IntegratorLayer layer;
    do {
      layer.branches.push_back(static_cast<int>(cur.positive()));
    } while (cur.accept(','));
    cur.expect(']');
    out = layer;
  } else {
    const char kind = cur.peek();
    if (kind != 'C' && kind != 'D' && kind != 'F' && kind != 'G') cur.fail("unknown layer kind");
    cur.expect(kind);
    const Index size = cur.positive();
    cur.expect('[');
    if (kind == 'C' || kind == 'D') {
      const Index filters = cur.positive();
      cur.expect(']');
      out = kind == 'C' ? LayerSpec(Conv2DLayer{size, filters}) : LayerSpec(DscLayer{size, filters});
    } else {
      cur.expect('v');
      const Index stride = cur.positive();
      cur.expect(']');
      out = kind == 'F' ? LayerSpec(AvgPoolLayer{size, stride}) : LayerSpec(MaxPoolLayer{size, stride});
    }
  }
  cur.finish();
  return out;
}

std::string format_layer(const LayerSpec& layer) {
  struct Formatter {
    std::string operator()(const Conv2DLayer& l) const {
      return "C" + std::to_string(l.kernel) + "[" + std::to_string(l.filters) + "]";
    }
    std::string operator()(const DscLayer& l) const {
      return "D" + std::to_string(l.kernel) + "[" + std::to_string(l.filters) + "]";
    }
    std::string operator()(const BatchNormLayer&) const { return "BN"; }
    std::string operator()(const ReluLayer&) const { return "ReLU"; }
    std::string operator()(const MaxPoolLayer& l) const {
      return "G" + std::to_string(l.window) + "[v" + std::to_string(l.stride) + "]";
    }
    std::string operator()(const AvgPoolLayer& l) const {
      return "F" + std::to_string(l.window) + "[v" + std::to_string(l.stride) + "]";
    }
    std::string operator()(const DcnLayer&) const { return "DCN"; }
    std::string operator()(const SoftmaxLayer&) const { return "Softmax"; }
    std::string operator()(const IntegratorLayer& l) const {
      std::string s = "Integrator[";
      for (std::size_t i = 0; i < l.branches.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(l.branches[i]);
      }
      return s + "]";
    }
  };
  return std::visit(Formatter{}, layer);
}

std::string to_string(IntegratorMode mode) { return mode == IntegratorMode::Scalar ? "scalar" : "dense"; }

IntegratorMode parse_integrator_mode(const std::string& text) {
  if (text == "scalar") return IntegratorMode::Scalar;
  if (text == "dense") return IntegratorMode::Dense;
  throw ParseError("integrator mode must be 'scalar' or 'dense', got '" + text + "'", 0);
}

template <typename Scalar>
Tensor<Scalar> he_uniform(Shape shape, Index fan_in, Rng& rng) {
  if (fan_in < 1) throw ShapeError("he_uniform: fan_in must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return t;
}

template <typename Scalar>
IntegratorWeights<Scalar> init_integrator(IntegratorMode mode, Index branches, Index classes, Rng& rng) {
  IntegratorWeights<Scalar> w;
  w.mode = mode;
  w.weights = Tensor<Scalar>(IntegratorWeights<Scalar>::expected_shape(mode, branches, classes));
  for (Index b = 0; b < branches; ++b) {
    const auto alpha = static_cast<Scalar>(rng.uniform(0.5, 1.5) / static_cast<double>(branches));
    if (mode == IntegratorMode::Scalar) {
      w.weights[b] = alpha;
    } else {
      for (Index k = 0; k < classes; ++k) w.weights.at(k, b * classes + k) = alpha;
    }
  }
  return w;
}

template <typename Scalar>
Var<Scalar> dcn_apply(Var<Scalar> features, Var<Scalar> dcn) {
  if (features.value().rank() < 2) throw ShapeError("dcn_apply: features need a leading batch axis");
  Var<Scalar> flat = features.value().rank() == 2 ? features : flatten(features);
  if (dcn.value().rank() != 2 || dcn.value().dim(1) != flat.value().dim(1)) {
    throw ShapeError("dcn_apply: vectorized feature length " + std::to_string(flat.value().dim(1)) +
                     " does not match DCN " + shape_string(dcn.shape()));
  }
  return dense(flat, dcn);
}

template <typename Scalar>
Var<Scalar> softlog_softmax_integrator(const std::vector<Var<Scalar>>& branch_probs, Var<Scalar> weights,
                                       IntegratorMode mode) {
  if (branch_probs.empty()) throw ShapeError("softlog_softmax_integrator: no branches");
  const Shape first = branch_probs.front().shape();  // copy: recording below may reallocate tape nodes
  if (first.size() != 2) throw ShapeError("softlog_softmax_integrator: branch outputs must be [batch, K]");
  std::vector<Var<Scalar>> logs;
  for (const auto& p : branch_probs) {
    if (p.shape() != first) {
      throw ShapeError("softlog_softmax_integrator: branch shape " + shape_string(p.shape()) + " vs " +
                       shape_string(first));
    }
    logs.push_back(softlog(p));
  }
  const auto B = static_cast<Index>(branch_probs.size());
  if (weights.shape() != IntegratorWeights<Scalar>::expected_shape(mode, B, first[1])) {
    IntegratorWeights<Scalar>{mode, weights.value()}.validate(B, first[1]);
  }
  Var<Scalar> mixed = mode == IntegratorMode::Scalar ? affine_combine(logs, weights) : dense(concat(logs, 1), weights);
  return softmax(mixed);
}

template <typename Scalar>
ProbVec<Scalar> softlog_softmax_integrator(const std::vector<ProbVec<Scalar>>& branch_probs,
                                           const IntegratorWeights<Scalar>& weights) {
  if (branch_probs.empty()) throw ShapeError("softlog_softmax_integrator: no branches");
  const Index K = branch_probs.front().size();
  const auto B = static_cast<Index>(branch_probs.size());
  weights.validate(B, K);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> stacked(B * K);
  for (Index b = 0; b < B; ++b) {
    if (branch_probs[static_cast<std::size_t>(b)].size() != K) {
      throw ShapeError("softlog_softmax_integrator: class count mismatch across branches");
    }
    stacked.segment(b * K, K) = softlog(branch_probs[static_cast<std::size_t>(b)].array()).matrix();
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z;
  if (weights.mode == IntegratorMode::Scalar) {
    z = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(K);
    for (Index b = 0; b < B; ++b) z += weights.weights[b] * stacked.segment(b * K, K);
  } else {
    z = weights.weights.matrix() * stacked;
  }
  const Scalar top = z.maxCoeff();
  ProbVec<Scalar> p = (z.array() - top).exp().matrix();
  return p / p.sum();
}

#define DRAGONFLY_INSTANTIATE_LAYERS(T)                                                                   \
  template Tensor<T> he_uniform<T>(Shape, Index, Rng&);                                                   \
  template IntegratorWeights<T> init_integrator<T>(IntegratorMode, Index, Index, Rng&);                   \
  template Var<T> dcn_apply<T>(Var<T>, Var<T>);                                                           \
  template Var<T> softlog_softmax_integrator<T>(const std::vector<Var<T>>&, Var<T>, IntegratorMode);      \
  template ProbVec<T> softlog_softmax_integrator<T>(const std::vector<ProbVec<T>>&, const IntegratorWeights<T>&);

DRAGONFLY_INSTANTIATE_LAYERS(float)
DRAGONFLY_INSTANTIATE_LAYERS(double)

#undef DRAGONFLY_INSTANTIATE_LAYERS

}  // namespace dragonfly
