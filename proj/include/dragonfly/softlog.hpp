#pragma once

// Softlog operator and the bounded information measures built on it.
//
// softlog(x) = log((e - 1/e) x + 1/e) maps [0,1] onto [-1,1] with exact endpoints, so
// every measure below stays finite on the closed simplex, zero entries included.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>
#include <type_traits>

#include "dragonfly/errors.hpp"

namespace dragonfly {

template <typename Scalar>
using ProbVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Tolerance band around [0,1] accepted (and clamped) before applying softlog.
inline constexpr double kUnitTolerance = 1e-9;

template <typename Scalar>
struct SoftlogConstants {
  Scalar e = std::exp(Scalar(1));
  Scalar inv_e = std::exp(Scalar(-1));
  Scalar alpha = std::exp(Scalar(1)) - std::exp(Scalar(-1));
  Scalar beta = std::exp(Scalar(-1));
  /// alpha / beta = e^2 - 1; the ratio form used by the relative entropy.
  Scalar gain = std::exp(Scalar(2)) - Scalar(1);
};

template <typename Scalar>
inline const SoftlogConstants<Scalar>& softlog_constants() {
  static const SoftlogConstants<Scalar> constants{};
  return constants;
}

template <typename Scalar>
struct SoftlogParams {
  Scalar alpha;
  Scalar beta;
};

/// Parametric logarithm log(alpha x + beta).
template <typename Scalar>
Scalar softlog_general(Scalar x, const SoftlogParams<Scalar>& params) {
  const Scalar arg = params.alpha * x + params.beta;
  if (!(arg > Scalar(0))) {
    throw DomainError("softlog_general: alpha*x + beta = " + std::to_string(double(arg)) + " is not positive");
  }
  return std::log(arg);
}

/// Checks x against [0,1] widened by kUnitTolerance and clamps into [0,1].
template <typename Scalar>
Scalar clamp_unit(Scalar x, const char* op = "softlog") {
  const Scalar tol = Scalar(kUnitTolerance);
  if (!(x >= -tol && x <= Scalar(1) + tol)) {
    throw DomainError(std::string(op) + ": input " + std::to_string(double(x)) + " outside [0,1]");
  }
  return std::clamp(x, Scalar(0), Scalar(1));
}

template <typename Scalar>
  requires std::is_floating_point_v<Scalar>
Scalar softlog(Scalar x) {
  const auto& c = softlog_constants<Scalar>();
  return std::log(c.alpha * clamp_unit(x) + c.beta);
}

/// d softlog / dx = alpha / (alpha x + beta); lies in [1 - e^-2, e^2 - 1] on [0,1].
template <typename Scalar>
Scalar softlog_derivative(Scalar x) {
  const auto& c = softlog_constants<Scalar>();
  return c.alpha / (c.alpha * clamp_unit(x) + c.beta);
}

/// Elementwise softlog of an Eigen expression.
template <typename Derived>
Eigen::Array<typename Derived::Scalar, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime> softlog(
    const Eigen::DenseBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.derived().unaryExpr([](Scalar v) { return softlog(v); });
}

namespace detail {

template <typename A, typename B>
void require_same_length(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": class count mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}

/// log((e^2 - 1) t + 1), the softlog shifted by +1.
template <typename Scalar>
Scalar log_gain(Scalar t) {
  return std::log1p(softlog_constants<Scalar>().gain * clamp_unit(t, "softlog divergence"));
}

}  // namespace detail

/// Batch cross-entropy with log replaced by softlog: -(1/S) sum_s sum_k q_sk softlog(p_sk).
/// Rows are examples, columns classes.
template <typename DP, typename DQ>
typename DP::Scalar safe_cross_entropy(const Eigen::MatrixBase<DP>& p, const Eigen::MatrixBase<DQ>& q) {
  using Scalar = typename DP::Scalar;
  if (p.rows() != q.rows() || p.cols() != q.cols()) {
    throw ShapeError("safe_cross_entropy: batch shape mismatch " + std::to_string(p.rows()) + "x" +
                     std::to_string(p.cols()) + " vs " + std::to_string(q.rows()) + "x" + std::to_string(q.cols()));
  }
  if (p.rows() < 1) throw ShapeError("safe_cross_entropy: empty batch");
  const Scalar total = (q.array() * softlog(p.array())).sum();
  return -total / Scalar(p.rows());
}

/// -sum_k p_k softlog(p_k); in [-1, 1].
template <typename D>
typename D::Scalar softlog_entropy(const Eigen::MatrixBase<D>& p) {
  return -(p.array() * softlog(p.array())).sum();
}

/// -sum_k p_i[k] softlog(p_j[k]); in [-1, 1].
template <typename DI, typename DJ>
typename DI::Scalar softlog_cross_entropy(const Eigen::MatrixBase<DI>& p_i, const Eigen::MatrixBase<DJ>& p_j) {
  detail::require_same_length(p_i, p_j, "softlog_cross_entropy");
  return -(p_i.array() * softlog(p_j.array())).sum();
}

/// Cross-entropy minus entropy in ratio form:
/// 1/2 sum_k p_i[k] log(((e^2-1) p_i[k] + 1) / ((e^2-1) p_j[k] + 1)).
/// Not symmetric and not asserted non-negative.
template <typename DI, typename DJ>
typename DI::Scalar softlog_relative_entropy(const Eigen::MatrixBase<DI>& p_i, const Eigen::MatrixBase<DJ>& p_j) {
  using Scalar = typename DI::Scalar;
  detail::require_same_length(p_i, p_j, "softlog_relative_entropy");
  Scalar total(0);
  for (Eigen::Index k = 0; k < p_i.size(); ++k) {
    total += p_i(k) * (detail::log_gain(p_i(k)) - detail::log_gain(p_j(k)));
  }
  return total / Scalar(2);
}

/// SoftLog-Divergence: the symmetrized relative entropy, bounded in [0, 1].
/// Evaluated as 1/4 sum_k (p_k - q_k)(log g(p_k) - log g(q_k)); each term is non-negative
/// and the expression is exactly symmetric in floating point.
template <typename DI, typename DJ>
typename DI::Scalar sld(const Eigen::MatrixBase<DI>& p_i, const Eigen::MatrixBase<DJ>& p_j) {
  using Scalar = typename DI::Scalar;
  detail::require_same_length(p_i, p_j, "sld");
  Scalar total(0);
  for (Eigen::Index k = 0; k < p_i.size(); ++k) {
    total += (p_i(k) - p_j(k)) * (detail::log_gain(p_i(k)) - detail::log_gain(p_j(k)));
  }
  return total / Scalar(4);
}

/// Average SLD over paired rows (one row per example).
template <typename DI, typename DJ>
typename DI::Scalar mean_sld(const Eigen::MatrixBase<DI>& outputs, const Eigen::MatrixBase<DJ>& reference) {
  using Scalar = typename DI::Scalar;
  if (outputs.rows() != reference.rows() || outputs.cols() != reference.cols()) {
    throw ShapeError("mean_sld: output lists differ in shape");
  }
  if (outputs.rows() == 0) throw ShapeError("mean_sld: empty example set");
  Scalar total(0);
  for (Eigen::Index s = 0; s < outputs.rows(); ++s) {
    total += sld(outputs.row(s).transpose(), reference.row(s).transpose());
  }
  return total / Scalar(outputs.rows());
}

/// Simplex membership: entries in [0,1] and sum within `tol` of 1.
template <typename D>
bool is_prob_vec(const Eigen::MatrixBase<D>& p, double tol = kUnitTolerance) {
  using Scalar = typename D::Scalar;
  if (p.size() == 0 || !p.allFinite()) return false;
  if ((p.array() < Scalar(-tol)).any() || (p.array() > Scalar(1 + tol)).any()) return false;
  return std::abs(double(p.sum()) - 1.0) <= tol;
}

}  // namespace dragonfly
