#include "dragonfly/autodiff.hpp"

#include <cmath>
#include <limits>

#include "dragonfly/softlog.hpp"

namespace dragonfly {

// ---- Tape --------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value, std::string op) {
  if (!value.all_finite()) {
    if (check_ == FiniteCheck::Throw) throw NonFiniteError(op, op + ": non-finite input values");
    if (!first_non_finite_) first_non_finite_ = op;
  }
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::parameter(const std::string& name, const Tensor<Scalar>& value) {
  if (auto it = parameters_.find(name); it != parameters_.end()) return Var<Scalar>(this, it->second);
  Node node;
  node.op = "parameter";
  node.value = value;
  node.parameter = name;
  node.requires_grad = recording_;
  nodes_.push_back(std::move(node));
  parameters_.emplace(name, size() - 1);
  return Var<Scalar>(this, size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(std::string op, Tensor<Scalar> value, std::vector<Index> inputs,
                                 BackwardFn backward) {
  if (!value.all_finite()) {
    if (check_ == FiniteCheck::Throw) throw NonFiniteError(op, op + ": produced non-finite values");
    if (!first_non_finite_) first_non_finite_ = op;
  }
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  bool any = false;
  for (Index id : inputs) any = any || nodes_.at(static_cast<std::size_t>(id)).requires_grad;
  node.requires_grad = recording_ && any;
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, size() - 1);
}

template <typename Scalar>
Tensor<Scalar>& Tape<Scalar>::grad_buffer(Index id) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape());
  return n.grad;
}

template <typename Scalar>
GradientMap<Scalar> Tape<Scalar>::backward(Var<Scalar> loss) {
  if (!loss.valid() || &loss.tape() != this) throw ShapeError("backward: loss was not produced on this tape");
  const Node& root = node(loss.id());
  if (root.value.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(root.value.shape()));
  if (first_non_finite_) {
    throw NonFiniteError(*first_non_finite_, "backward: non-finite value first produced by " + *first_non_finite_);
  }
  if (!root.value.all_finite()) throw NonFiniteError(root.op, "backward: non-finite loss from " + root.op);

  for (auto& n : nodes_) n.grad = Tensor<Scalar>();
  backward_order_.clear();
  grad_buffer(loss.id())[0] = Scalar(1);
  for (Index id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() || !n.backward) continue;
    if (!n.grad.all_finite()) throw NonFiniteError(n.op, "backward: non-finite gradient reaching " + n.op);
    backward_order_.push_back(id);
    n.backward(*this, n.grad);
  }

  GradientMap<Scalar> grads;
  for (const auto& [name, id] : parameters_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Tensor<Scalar> g = n.grad.empty() ? Tensor<Scalar>(n.value.shape()) : n.grad;
    if (!g.all_finite()) throw NonFiniteError(name, "backward: non-finite gradient for parameter " + name);
    grads.emplace(name, std::move(g));
  }
  return grads;
}

template <typename Scalar>
std::vector<std::string> Tape<Scalar>::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : parameters_) names.push_back(name);
  return names;
}

template <typename Scalar>
std::optional<Var<Scalar>> Tape<Scalar>::find_parameter(const std::string& name) {
  auto it = parameters_.find(name);
  if (it == parameters_.end()) return std::nullopt;
  return Var<Scalar>(this, it->second);
}

// ---- shape helpers -------------------------------------------------------------

Index output_extent(Index in, Index window, Index stride, Index pad_before, Index pad_after, const std::string& op) {
  if (window < 1 || stride < 1 || pad_before < 0 || pad_after < 0) {
    throw ShapeError(op + ": window and stride must be positive, padding non-negative");
  }
  const Index span = in + pad_before + pad_after - window;
  if (span < 0) {
    throw ShapeError(op + ": extent " + std::to_string(in) + " too small for window " + std::to_string(window));
  }
  return span / stride + 1;
}

std::pair<Index, Index> same_padding(Index in, Index window, Index stride) {
  const Index out = (in + stride - 1) / stride;
  const Index total = std::max<Index>((out - 1) * stride + window - in, 0);
  return {total / 2, total - total / 2};
}

namespace {

template <typename Scalar>
Tape<Scalar>& tape_of(std::initializer_list<Var<Scalar>> vars, const char* op) {
  Tape<Scalar>* tape = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw ShapeError(std::string(op) + ": invalid operand");
    if (tape && &v.tape() != tape) throw ShapeError(std::string(op) + ": operands recorded on different tapes");
    tape = &v.tape();
  }
  return *tape;
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a) {
  throw ShapeError(op + ": unsupported shape " + shape_string(a));
}

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;

}  // namespace

// ---- linear algebra ------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& tape = tape_of({a, b}, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) shape_fail("matmul", A.shape(), B.shape());
  Tensor<Scalar> C({A.dim(0), B.dim(1)});
  C.matrix().noalias() = A.matrix() * B.matrix();
  const Index ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(C), {ia, ib}, [ia, ib](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.needs_grad(ia)) t.grad_buffer(ia).matrix().noalias() += g.matrix() * t.node(ib).value.matrix().transpose();
    if (t.needs_grad(ib)) t.grad_buffer(ib).matrix().noalias() += t.node(ia).value.matrix().transpose() * g.matrix();
  });
}

template <typename Scalar>
Var<Scalar> dense(Var<Scalar> x, Var<Scalar> w) {
  auto& tape = tape_of({x, w}, "dense");
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1)) shape_fail("dense", X.shape(), W.shape());
  Tensor<Scalar> Y({X.dim(0), W.dim(0)});
  Y.matrix().noalias() = X.matrix() * W.matrix().transpose();
  const Index ix = x.id(), iw = w.id();
  return tape.record("dense", std::move(Y), {ix, iw}, [ix, iw](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.needs_grad(ix)) t.grad_buffer(ix).matrix().noalias() += g.matrix() * t.node(iw).value.matrix();
    if (t.needs_grad(iw)) t.grad_buffer(iw).matrix().noalias() += g.matrix().transpose() * t.node(ix).value.matrix();
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& tape = tape_of({a, b}, "add");
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  Tensor<Scalar> C(a.shape(), (a.value().values() + b.value().values()).eval());
  const Index ia = a.id(), ib = b.id();
  return tape.record("add", std::move(C), {ia, ib}, [ia, ib](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.needs_grad(ia)) t.grad_buffer(ia).values() += g.values();
    if (t.needs_grad(ib)) t.grad_buffer(ib).values() += g.values();
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor) {
  auto& tape = tape_of({a}, "scale");
  Tensor<Scalar> C(a.shape(), (a.value().values() * factor).eval());
  const Index ia = a.id();
  return tape.record("scale", std::move(C), {ia}, [ia, factor](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_buffer(ia).values() += factor * g.values();
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  auto& tape = tape_of({a}, "sum");
  Tensor<Scalar> s({1}, {a.value().values().sum()});
  const Index ia = a.id();
  return tape.record("sum", std::move(s), {ia}, [ia](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_buffer(ia).values() += g[0];
  });
}

template <typename Scalar>
Var<Scalar> weighted_sum(Var<Scalar> a, const Tensor<Scalar>& weights, Scalar factor) {
  auto& tape = tape_of({a}, "weighted_sum");
  if (a.shape() != weights.shape()) shape_fail("weighted_sum", a.shape(), weights.shape());
  Tensor<Scalar> s({1}, {factor * (a.value().values() * weights.values()).sum()});
  const Index ia = a.id();
  return tape.record("weighted_sum", std::move(s), {ia},
                     [ia, weights, factor](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                       t.grad_buffer(ia).values() += (g[0] * factor) * weights.values();
                     });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape) {
  auto& tape = tape_of({a}, "reshape");
  Tensor<Scalar> r = a.value().reshaped(std::move(shape));
  const Index ia = a.id();
  return tape.record("reshape", std::move(r), {ia}, [ia](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_buffer(ia).values() += g.values();
  });
}

template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> a) {
  const Index batch = a.value().dim(0);
  return reshape(a, Shape{batch, a.value().size() / batch});
}

// ---- convolutions --------------------------------------------------------------

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> w, ConvOptions opt) {
  auto& tape = tape_of({x, w}, "conv2d");
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 4 || W.rank() != 4 || W.dim(1) != X.dim(1) || W.dim(2) != W.dim(3)) {
    shape_fail("conv2d", X.shape(), W.shape());
  }
  const Index N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const Index O = W.dim(0), L = W.dim(2), s = opt.stride, pad = opt.pad;
  const Index Ho = output_extent(H, L, s, pad, pad, "conv2d");
  const Index Wo = output_extent(Wd, L, s, pad, pad, "conv2d");
  const Index P = Ho * Wo, CLL = C * L * L;

  RowMatrix<Scalar> col = RowMatrix<Scalar>::Zero(CLL, N * P);
  for (Index c = 0; c < C; ++c)
    for (Index ki = 0; ki < L; ++ki)
      for (Index kj = 0; kj < L; ++kj) {
        const Index row = (c * L + ki) * L + kj;
        for (Index n = 0; n < N; ++n)
          for (Index oh = 0; oh < Ho; ++oh) {
            const Index ih = oh * s - pad + ki;
            if (ih < 0 || ih >= H) continue;
            for (Index ow = 0; ow < Wo; ++ow) {
              const Index iw = ow * s - pad + kj;
              if (iw < 0 || iw >= Wd) continue;
              col(row, n * P + oh * Wo + ow) = X.at(n, c, ih, iw);
            }
          }
      }
  RowMatrix<Scalar> out(O, N * P);
  out.noalias() = W.matrix(O, CLL) * col;
  Tensor<Scalar> Y({N, O, Ho, Wo});
  for (Index n = 0; n < N; ++n)
    for (Index o = 0; o < O; ++o)
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(Y.data() + (n * O + o) * P, P) = out.block(o, n * P, 1, P);

  const Index ix = x.id(), iw = w.id();
  const bool keep = tape.recording();
  return tape.record(
      "conv2d", std::move(Y), {ix, iw},
      [ix, iw, col = keep ? std::move(col) : RowMatrix<Scalar>(), N, C, H, Wd, O, L, s, pad, Ho, Wo, P, CLL](
          Tape<Scalar>& t, const Tensor<Scalar>& g) {
        RowMatrix<Scalar> dout(O, N * P);
        for (Index n = 0; n < N; ++n)
          for (Index o = 0; o < O; ++o)
            dout.block(o, n * P, 1, P) = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(
                g.data() + (n * O + o) * P, P);
        if (t.needs_grad(iw)) t.grad_buffer(iw).matrix(O, CLL).noalias() += dout * col.transpose();
        if (t.needs_grad(ix)) {
          RowMatrix<Scalar> dcol(CLL, N * P);
          dcol.noalias() = t.node(iw).value.matrix(O, CLL).transpose() * dout;
          auto& dX = t.grad_buffer(ix);
          for (Index c = 0; c < C; ++c)
            for (Index ki = 0; ki < L; ++ki)
              for (Index kj = 0; kj < L; ++kj) {
                const Index row = (c * L + ki) * L + kj;
                for (Index n = 0; n < N; ++n)
                  for (Index oh = 0; oh < Ho; ++oh) {
                    const Index ih = oh * s - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    for (Index ow = 0; ow < Wo; ++ow) {
                      const Index iwc = ow * s - pad + kj;
                      if (iwc < 0 || iwc >= Wd) continue;
                      dX.at(n, c, ih, iwc) += dcol(row, n * P + oh * Wo + ow);
                    }
                  }
              }
        }
      });
}

template <typename Scalar>
Var<Scalar> depthwise_conv2d(Var<Scalar> x, Var<Scalar> w, ConvOptions opt) {
  auto& tape = tape_of({x, w}, "depthwise_conv2d");
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 4 || W.rank() != 4 || W.dim(0) != X.dim(1) || W.dim(1) != 1 || W.dim(2) != W.dim(3)) {
    shape_fail("depthwise_conv2d", X.shape(), W.shape());
  }
  const Index N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const Index L = W.dim(2), s = opt.stride, pad = opt.pad;
  const Index Ho = output_extent(H, L, s, pad, pad, "depthwise_conv2d");
  const Index Wo = output_extent(Wd, L, s, pad, pad, "depthwise_conv2d");
  Tensor<Scalar> Y({N, C, Ho, Wo});
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index oh = 0; oh < Ho; ++oh)
        for (Index ow = 0; ow < Wo; ++ow) {
          Scalar acc(0);
          for (Index ki = 0; ki < L; ++ki) {
            const Index ih = oh * s - pad + ki;
            if (ih < 0 || ih >= H) continue;
            for (Index kj = 0; kj < L; ++kj) {
              const Index iw = ow * s - pad + kj;
              if (iw < 0 || iw >= Wd) continue;
              acc += X.at(n, c, ih, iw) * W.at(c, 0, ki, kj);
            }
          }
          Y.at(n, c, oh, ow) = acc;
        }
  const Index ix = x.id(), iwt = w.id();
  return tape.record("depthwise_conv2d", std::move(Y), {ix, iwt},
                     [ix, iwt, N, C, H, Wd, L, s, pad, Ho, Wo](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                       const auto& Xv = t.node(ix).value;
                       const auto& Wv = t.node(iwt).value;
                       const bool gx = t.needs_grad(ix), gw = t.needs_grad(iwt);
                       Tensor<Scalar>* dX = gx ? &t.grad_buffer(ix) : nullptr;
                       Tensor<Scalar>* dW = gw ? &t.grad_buffer(iwt) : nullptr;
                       for (Index n = 0; n < N; ++n)
                         for (Index c = 0; c < C; ++c)
                           for (Index oh = 0; oh < Ho; ++oh)
                             for (Index ow = 0; ow < Wo; ++ow) {
                               const Scalar go = g.at(n, c, oh, ow);
                               for (Index ki = 0; ki < L; ++ki) {
                                 const Index ih = oh * s - pad + ki;
                                 if (ih < 0 || ih >= H) continue;
                                 for (Index kj = 0; kj < L; ++kj) {
                                   const Index iw = ow * s - pad + kj;
                                   if (iw < 0 || iw >= Wd) continue;
                                   if (dX) dX->at(n, c, ih, iw) += go * Wv.at(c, 0, ki, kj);
                                   if (dW) dW->at(c, 0, ki, kj) += go * Xv.at(n, c, ih, iw);
                                 }
                               }
                             }
                     });
}

template <typename Scalar>
Var<Scalar> pointwise_conv(Var<Scalar> x, Var<Scalar> w) {
  auto& tape = tape_of({x, w}, "pointwise_conv");
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 4 || W.rank() != 2 || W.dim(1) != X.dim(1)) shape_fail("pointwise_conv", X.shape(), W.shape());
  const Index N = X.dim(0), C = X.dim(1), P = X.dim(2) * X.dim(3), O = W.dim(0);
  Tensor<Scalar> Y({N, O, X.dim(2), X.dim(3)});
  using Map = typename Tensor<Scalar>::MatrixMap;
  using CMap = typename Tensor<Scalar>::ConstMatrixMap;
  for (Index n = 0; n < N; ++n) {
    Map(Y.data() + n * O * P, O, P).noalias() = W.matrix() * CMap(X.data() + n * C * P, C, P);
  }
  const Index ix = x.id(), iw = w.id();
  return tape.record("pointwise_conv", std::move(Y), {ix, iw}, [ix, iw, N, C, P, O](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& Xv = t.node(ix).value;
    const auto& Wv = t.node(iw).value;
    for (Index n = 0; n < N; ++n) {
      CMap gn(g.data() + n * O * P, O, P);
      if (t.needs_grad(iw)) t.grad_buffer(iw).matrix().noalias() += gn * CMap(Xv.data() + n * C * P, C, P).transpose();
      if (t.needs_grad(ix)) Map(t.grad_buffer(ix).data() + n * C * P, C, P).noalias() += Wv.matrix().transpose() * gn;
    }
  });
}

// ---- elementwise ---------------------------------------------------------------

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  auto& tape = tape_of({x}, "relu");
  Tensor<Scalar> Y(x.shape(), x.value().values().max(Scalar(0)).eval());
  const Index ix = x.id();
  return tape.record("relu", std::move(Y), {ix}, [ix](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& Xv = t.node(ix).value.values();
    t.grad_buffer(ix).values() += (Xv > Scalar(0)).select(g.values(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> softlog(Var<Scalar> x) {
  auto& tape = tape_of({x}, "softlog");
  Tensor<Scalar> Y(x.shape(), softlog(x.value().values()).eval());
  const Index ix = x.id();
  return tape.record("softlog", std::move(Y), {ix}, [ix](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& Xv = t.node(ix).value.values();
    auto& dX = t.grad_buffer(ix).values();
    for (Index i = 0; i < Xv.size(); ++i) dX[i] += g[i] * softlog_derivative(Xv[i]);
  });
}

template <typename Scalar>
Var<Scalar> log(Var<Scalar> x) {
  auto& tape = tape_of({x}, "log");
  Tensor<Scalar> Y(x.shape(), x.value().values().log().eval());
  const Index ix = x.id();
  return tape.record("log", std::move(Y), {ix}, [ix](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_buffer(ix).values() += g.values() / t.node(ix).value.values();
  });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x) {
  auto& tape = tape_of({x}, "softmax");
  const auto& X = x.value();
  if (X.rank() != 2) shape_fail("softmax", X.shape());
  Tensor<Scalar> Y(X.shape());
  auto Ym = Y.matrix();
  const auto Xm = X.matrix();
  for (Index r = 0; r < Xm.rows(); ++r) {
    Ym.row(r) = (Xm.row(r).array() - Xm.row(r).maxCoeff()).exp().matrix();
    Ym.row(r) /= Ym.row(r).sum();
  }
  const Index ix = x.id();
  const Index iy = tape.size();
  return tape.record("softmax", std::move(Y), {ix}, [ix, iy](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto P = t.node(iy).value.matrix();
    const auto G = g.matrix();
    auto dX = t.grad_buffer(ix).matrix();
    for (Index r = 0; r < P.rows(); ++r) {
      const Scalar inner = P.row(r).dot(G.row(r));
      dX.row(r).array() += P.row(r).array() * (G.row(r).array() - inner);
    }
  });
}

// ---- normalization -------------------------------------------------------------

template <typename Scalar>
Var<Scalar> batchnorm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, RunningStats<Scalar>* stats,
                      BatchNormOptions opt) {
  auto& tape = tape_of({x, gamma, beta}, "batchnorm");
  const auto& X = x.value();
  if (X.rank() < 2) shape_fail("batchnorm", X.shape());
  const Index N = X.dim(0), C = X.dim(1), S = X.size() / (N * C), m = N * S;
  if (gamma.value().size() != C || beta.value().size() != C) shape_fail("batchnorm", X.shape(), gamma.shape());
  if (!opt.training && (!stats || stats->mean.empty())) {
    throw ShapeError("batchnorm: inference mode requires running statistics");
  }
  if (stats && stats->mean.empty()) {
    stats->mean = Tensor<Scalar>({C}, Scalar(0));
    stats->var = Tensor<Scalar>({C}, Scalar(1));
  }
  const auto& G = gamma.value();
  const auto& B = beta.value();
  const Scalar eps = Scalar(opt.eps);

  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean(C), invstd(C);
  for (Index c = 0; c < C; ++c) {
    if (opt.training) {
      Scalar mu(0);
      for (Index n = 0; n < N; ++n)
        for (Index k = 0; k < S; ++k) mu += X[(n * C + c) * S + k];
      mu /= Scalar(m);
      Scalar var(0);
      for (Index n = 0; n < N; ++n)
        for (Index k = 0; k < S; ++k) {
          const Scalar d = X[(n * C + c) * S + k] - mu;
          var += d * d;
        }
      var /= Scalar(m);
      mean[c] = mu;
      invstd[c] = Scalar(1) / std::sqrt(var + eps);
      if (stats && opt.update_running) {
        const Scalar mom = Scalar(opt.momentum);
        stats->mean[c] = mom * stats->mean[c] + (Scalar(1) - mom) * mu;
        stats->var[c] = mom * stats->var[c] + (Scalar(1) - mom) * var;
      }
    } else {
      mean[c] = stats->mean[c];
      invstd[c] = Scalar(1) / std::sqrt(stats->var[c] + eps);
    }
  }

  Tensor<Scalar> xhat(X.shape());
  Tensor<Scalar> Y(X.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index k = 0; k < S; ++k) {
        const Index i = (n * C + c) * S + k;
        xhat[i] = (X[i] - mean[c]) * invstd[c];
        Y[i] = G[c] * xhat[i] + B[c];
      }

  const Index ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool training = opt.training;
  return tape.record(
      "batchnorm", std::move(Y), {ix, ig, ib},
      [ix, ig, ib, xhat = std::move(xhat), invstd, N, C, S, m, training](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const auto& Gv = t.node(ig).value;
        for (Index c = 0; c < C; ++c) {
          Scalar sum_g(0), sum_gx(0);
          for (Index n = 0; n < N; ++n)
            for (Index k = 0; k < S; ++k) {
              const Index i = (n * C + c) * S + k;
              sum_g += g[i];
              sum_gx += g[i] * xhat[i];
            }
          if (t.needs_grad(ib)) t.grad_buffer(ib)[c] += sum_g;
          if (t.needs_grad(ig)) t.grad_buffer(ig)[c] += sum_gx;
          if (!t.needs_grad(ix)) continue;
          auto& dX = t.grad_buffer(ix);
          const Scalar k0 = Gv[c] * invstd[c];
          for (Index n = 0; n < N; ++n)
            for (Index k = 0; k < S; ++k) {
              const Index i = (n * C + c) * S + k;
              if (training) {
                dX[i] += k0 / Scalar(m) * (Scalar(m) * g[i] - sum_g - xhat[i] * sum_gx);
              } else {
                dX[i] += k0 * g[i];
              }
            }
        }
      });
}

// ---- pooling -------------------------------------------------------------------

namespace {

template <typename Scalar, bool IsMax>
Var<Scalar> pool2d(Var<Scalar> x, PoolOptions opt, const char* name) {
  auto& tape = tape_of({x}, name);
  const auto& X = x.value();
  if (X.rank() != 4) shape_fail(name, X.shape());
  const Index N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const Index M = opt.window, s = opt.stride;
  const Index Ho = output_extent(H, M, s, opt.pad_top, opt.pad_bottom, name);
  const Index Wo = output_extent(Wd, M, s, opt.pad_left, opt.pad_right, name);
  Tensor<Scalar> Y({N, C, Ho, Wo});
  std::vector<Index> source;  // argmax (max) or unused (avg)
  std::vector<Index> counts;
  if constexpr (IsMax) source.resize(static_cast<std::size_t>(Y.size()));
  else counts.resize(static_cast<std::size_t>(Ho * Wo));

  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Index base = (n * C + c) * H * Wd;
      for (Index oh = 0; oh < Ho; ++oh)
        for (Index ow = 0; ow < Wo; ++ow) {
          const Index h0 = std::max<Index>(oh * s - opt.pad_top, 0);
          const Index h1 = std::min<Index>(oh * s - opt.pad_top + M, H);
          const Index w0 = std::max<Index>(ow * s - opt.pad_left, 0);
          const Index w1 = std::min<Index>(ow * s - opt.pad_left + M, Wd);
          const Index out = ((n * C + c) * Ho + oh) * Wo + ow;
          if constexpr (IsMax) {
            Index best = base + h0 * Wd + w0;
            for (Index ih = h0; ih < h1; ++ih)
              for (Index iw = w0; iw < w1; ++iw) {
                const Index i = base + ih * Wd + iw;
                if (X[i] > X[best]) best = i;
              }
            source[static_cast<std::size_t>(out)] = best;
            Y[out] = X[best];
          } else {
            Scalar acc(0);
            for (Index ih = h0; ih < h1; ++ih)
              for (Index iw = w0; iw < w1; ++iw) acc += X[base + ih * Wd + iw];
            const Index count = (h1 - h0) * (w1 - w0);
            counts[static_cast<std::size_t>(oh * Wo + ow)] = count;
            Y[out] = acc / Scalar(count);
          }
        }
    }

  const Index ix = x.id();
  return tape.record(name, std::move(Y), {ix},
                     [ix, source = std::move(source), counts = std::move(counts), opt, N, C, H, Wd, Ho, Wo](
                         Tape<Scalar>& t, const Tensor<Scalar>& g) {
                       auto& dX = t.grad_buffer(ix);
                       if constexpr (IsMax) {
                         for (Index i = 0; i < g.size(); ++i) dX[source[static_cast<std::size_t>(i)]] += g[i];
                       } else {
                         const Index s = opt.stride, M = opt.window;
                         for (Index n = 0; n < N; ++n)
                           for (Index c = 0; c < C; ++c) {
                             const Index base = (n * C + c) * H * Wd;
                             for (Index oh = 0; oh < Ho; ++oh)
                               for (Index ow = 0; ow < Wo; ++ow) {
                                 const Index h0 = std::max<Index>(oh * s - opt.pad_top, 0);
                                 const Index h1 = std::min<Index>(oh * s - opt.pad_top + M, H);
                                 const Index w0 = std::max<Index>(ow * s - opt.pad_left, 0);
                                 const Index w1 = std::min<Index>(ow * s - opt.pad_left + M, Wd);
                                 const Scalar share = g[((n * C + c) * Ho + oh) * Wo + ow] /
                                                      Scalar(counts[static_cast<std::size_t>(oh * Wo + ow)]);
                                 for (Index ih = h0; ih < h1; ++ih)
                                   for (Index iw = w0; iw < w1; ++iw) dX[base + ih * Wd + iw] += share;
                               }
                           }
                       }
                     });
}

}  // namespace

template <typename Scalar>
Var<Scalar> max_pool2d(Var<Scalar> x, PoolOptions options) {
  return pool2d<Scalar, true>(x, options, "max_pool2d");
}

template <typename Scalar>
Var<Scalar> avg_pool2d(Var<Scalar> x, PoolOptions options) {
  return pool2d<Scalar, false>(x, options, "avg_pool2d");
}

// ---- combination ---------------------------------------------------------------

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  auto& tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis < 0 || axis >= static_cast<Index>(first.size())) shape_fail("concat", first);
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= first[static_cast<std::size_t>(d)];
  for (Index d = axis + 1; d < static_cast<Index>(first.size()); ++d) inner *= first[static_cast<std::size_t>(d)];
  std::vector<Index> ids, widths;
  for (const auto& p : parts) {
    if (&p.tape() != &tape) throw ShapeError("concat: operands recorded on different tapes");
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) shape_fail("concat", first, p.shape());
    a[static_cast<std::size_t>(axis)] = b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) shape_fail("concat", first, p.shape());
    ids.push_back(p.id());
    widths.push_back(p.shape()[static_cast<std::size_t>(axis)] * inner);
    out_shape[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }
  Tensor<Scalar> Y(out_shape);
  const Index row = out_shape[static_cast<std::size_t>(axis)] * inner;
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& V = parts[k].value();
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < widths[k]; ++i) Y[o * row + offset + i] = V[o * widths[k] + i];
    offset += widths[k];
  }
  return tape.record("concat", std::move(Y), ids, [ids, widths, outer, row](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    Index off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        auto& d = t.grad_buffer(ids[k]);
        for (Index o = 0; o < outer; ++o)
          for (Index i = 0; i < widths[k]; ++i) d[o * widths[k] + i] += g[o * row + off + i];
      }
      off += widths[k];
    }
  });
}

template <typename Scalar>
Var<Scalar> affine_combine(const std::vector<Var<Scalar>>& inputs, Var<Scalar> weights) {
  if (inputs.empty()) throw ShapeError("affine_combine: no inputs");
  auto& tape = weights.tape();
  const auto& Wv = weights.value();
  if (Wv.size() != static_cast<Index>(inputs.size())) {
    throw ShapeError("affine_combine: " + std::to_string(Wv.size()) + " weights for " +
                     std::to_string(inputs.size()) + " inputs");
  }
  Tensor<Scalar> Y(inputs.front().shape());
  std::vector<Index> ids;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (&inputs[b].tape() != &tape) throw ShapeError("affine_combine: operands recorded on different tapes");
    if (inputs[b].shape() != Y.shape()) shape_fail("affine_combine", Y.shape(), inputs[b].shape());
    Y.values() += Wv[static_cast<Index>(b)] * inputs[b].value().values();
    ids.push_back(inputs[b].id());
  }
  const Index iw = weights.id();
  std::vector<Index> all = ids;
  all.push_back(iw);
  return tape.record("affine_combine", std::move(Y), all, [ids, iw](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& Wv = t.node(iw).value;
    for (std::size_t b = 0; b < ids.size(); ++b) {
      if (t.needs_grad(ids[b])) t.grad_buffer(ids[b]).values() += Wv[static_cast<Index>(b)] * g.values();
      if (t.needs_grad(iw)) t.grad_buffer(iw)[static_cast<Index>(b)] += (g.values() * t.node(ids[b]).value.values()).sum();
    }
  });
}

// ---- instantiation -------------------------------------------------------------

#define DRAGONFLY_INSTANTIATE_OPS(T)                                                          \
  template class Tape<T>;                                                                     \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                   \
  template Var<T> dense<T>(Var<T>, Var<T>);                                                    \
  template Var<T> add<T>(Var<T>, Var<T>);                                                      \
  template Var<T> scale<T>(Var<T>, T);                                                         \
  template Var<T> sum<T>(Var<T>);                                                              \
  template Var<T> weighted_sum<T>(Var<T>, const Tensor<T>&, T);                                \
  template Var<T> reshape<T>(Var<T>, Shape);                                                   \
  template Var<T> flatten<T>(Var<T>);                                                          \
  template Var<T> conv2d<T>(Var<T>, Var<T>, ConvOptions);                                      \
  template Var<T> depthwise_conv2d<T>(Var<T>, Var<T>, ConvOptions);                            \
  template Var<T> pointwise_conv<T>(Var<T>, Var<T>);                                           \
  template Var<T> relu<T>(Var<T>);                                                             \
  template Var<T> batchnorm<T>(Var<T>, Var<T>, Var<T>, RunningStats<T>*, BatchNormOptions);    \
  template Var<T> max_pool2d<T>(Var<T>, PoolOptions);                                          \
  template Var<T> avg_pool2d<T>(Var<T>, PoolOptions);                                          \
  template Var<T> concat<T>(const std::vector<Var<T>>&, Index);                                \
  template Var<T> affine_combine<T>(const std::vector<Var<T>>&, Var<T>);                       \
  template Var<T> softmax<T>(Var<T>);                                                          \
  template Var<T> softlog<T>(Var<T>);                                                          \
  template Var<T> log<T>(Var<T>);

DRAGONFLY_INSTANTIATE_OPS(float)
DRAGONFLY_INSTANTIATE_OPS(double)

#undef DRAGONFLY_INSTANTIATE_OPS

}  // namespace dragonfly
