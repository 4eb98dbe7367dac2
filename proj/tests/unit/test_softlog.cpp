#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dragonfly/softlog.hpp"
#include "softlog_oracle.hpp"
#include "test_helpers.hpp"

using namespace dragonfly;
using dragonfly::testing::random_prob_vec;

namespace {

const double kE = std::exp(1.0);
const double kSoftlogHalf = static_cast<double>(oracle::softlog(oracle::Big(0.5)));

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(SoftlogGeneral, ParametersFromEndpointConditions) {
  const SoftlogParams<double> p{kE - 1 / kE, 1 / kE};
  EXPECT_NEAR(softlog_general(0.0, p), -1.0, 1e-14);
  EXPECT_NEAR(softlog_general(1.0, p), 1.0, 1e-14);
  EXPECT_EQ(softlog_general(1.0, SoftlogParams<double>{1.0, 0.0}), 0.0);
  EXPECT_THROW(softlog_general(0.0, SoftlogParams<double>{1.0, 0.0}), DomainError);
  EXPECT_THROW(softlog_general(-2.0, SoftlogParams<double>{1.0, 1.0}), DomainError);
}

TEST(Softlog, Examples) {
  EXPECT_NEAR(softlog(0.0), -1.0, 1e-12);
  EXPECT_NEAR(softlog(1.0), 1.0, 1e-12);
  EXPECT_NEAR(softlog(1.0 / (1.0 + kE)), 0.0, 1e-12);
  EXPECT_NEAR(softlog(0.5), std::log((kE * kE + 1) / (2 * kE)), 1e-14);
  EXPECT_NEAR(softlog(0.5), 0.4337809, 1e-7);
  EXPECT_NEAR(softlog(0.5), kSoftlogHalf, 1e-14);
}

TEST(Softlog, ToleranceBandClampsOutsideRejects) {
  EXPECT_EQ(softlog(-5e-10), softlog(0.0));
  EXPECT_EQ(softlog(1.0 + 5e-10), softlog(1.0));
  EXPECT_THROW(softlog(-2e-9), DomainError);
  EXPECT_THROW(softlog(1.0 + 2e-9), DomainError);
  EXPECT_THROW(softlog(std::numeric_limits<double>::quiet_NaN()), DomainError);
}

TEST(Softlog, StrictlyMonotoneWithBoundedDerivativeOnGrid) {
  const int n = 10000;
  const double lo = 1 - std::exp(-2.0), hi = std::exp(2.0) - 1;
  double prev = softlog(0.0);
  for (int i = 1; i <= n; ++i) {
    const double x = double(i) / n;
    const double y = softlog(x);
    EXPECT_GT(y, prev);
    prev = y;
    const double d = softlog_derivative(x);
    EXPECT_GE(d, lo - 1e-12);
    EXPECT_LE(d, hi + 1e-12);
  }
  EXPECT_NEAR(softlog_derivative(0.0), hi, 1e-12);
  EXPECT_NEAR(softlog_derivative(1.0), lo, 1e-12);
}

TEST(Softlog, FloatEndpoints) {
  EXPECT_NEAR(softlog(0.0f), -1.0f, 1e-6f);
  EXPECT_NEAR(softlog(1.0f), 1.0f, 1e-6f);
}

TEST(SafeCrossEntropy, Examples) {
  Eigen::MatrixXd onehot(1, 2);
  onehot << 1, 0;
  Eigen::MatrixXd wrong(1, 2);
  wrong << 0, 1;
  Eigen::MatrixXd half(1, 2);
  half << 0.5, 0.5;
  EXPECT_NEAR(safe_cross_entropy(onehot, onehot), -1.0, 1e-12);
  EXPECT_NEAR(safe_cross_entropy(wrong, onehot), 1.0, 1e-12);
  EXPECT_NEAR(safe_cross_entropy(half, onehot), -kSoftlogHalf, 1e-12);
  EXPECT_NEAR(safe_cross_entropy(half, onehot), -0.4337809, 1e-7);
}

TEST(SafeCrossEntropy, BatchAverageAndErrors) {
  Eigen::MatrixXd p(2, 2), q(2, 2);
  p << 1, 0, 0, 1;
  q << 1, 0, 1, 0;
  EXPECT_NEAR(safe_cross_entropy(p, q), 0.0, 1e-12);  // (-1 + 1) / 2
  EXPECT_THROW(safe_cross_entropy(p, Eigen::MatrixXd(2, 3)), ShapeError);
  EXPECT_THROW(safe_cross_entropy(Eigen::MatrixXd(0, 2), Eigen::MatrixXd(0, 2)), ShapeError);
}

TEST(SafeCrossEntropy, FiniteAndBoundedEvenWithExactZeros) {
  Rng rng(4);
  for (int trial = 0; trial < 2000; ++trial) {
    const Index k = 2 + Index(rng.below(20)), s = 1 + Index(rng.below(5));
    Eigen::MatrixXd p(s, k), q = Eigen::MatrixXd::Zero(s, k);
    for (Index r = 0; r < s; ++r) {
      p.row(r) = random_prob_vec(k, rng).transpose();
      q(r, Index(rng.below(std::uint64_t(k)))) = 1.0;
    }
    const double ce = safe_cross_entropy(p, q);
    ASSERT_TRUE(std::isfinite(ce));
    EXPECT_GE(ce, -1.0 - 1e-12);
    EXPECT_LE(ce, 1.0 + 1e-12);
  }
}

TEST(SoftlogEntropy, RemarkCases) {
  EXPECT_NEAR(softlog_entropy(vec({0, 0, 1, 0})), -1.0, 1e-12);
  for (int k : {2, 3, 10, 143}) {
    Eigen::VectorXd u = Eigen::VectorXd::Constant(k, 1.0 / k);
    EXPECT_NEAR(softlog_entropy(u), -softlog(1.0 / k), 1e-12);
  }
  EXPECT_NEAR(softlog_entropy(vec({0.5, 0.5})), -kSoftlogHalf, 1e-12);
}

TEST(SoftlogCrossEntropy, RemarkCases) {
  EXPECT_NEAR(softlog_cross_entropy(vec({0, 1, 0}), vec({0, 1, 0})), -1.0, 1e-12);
  EXPECT_NEAR(softlog_cross_entropy(vec({0, 1, 0}), vec({1, 0, 0})), 1.0, 1e-12);
  EXPECT_NEAR(softlog_cross_entropy(vec({0.3, 0.7}), vec({1, 0})), 0.4, 1e-12);
  EXPECT_THROW(softlog_cross_entropy(vec({1, 0}), vec({1, 0, 0})), ShapeError);
}

TEST(SoftlogCrossEntropy, DiracReferenceClosedForm) {
  Rng rng(8);
  for (int trial = 0; trial < 500; ++trial) {
    const Index k = 2 + Index(rng.below(10));
    auto p = random_prob_vec(k, rng);
    const Index star = Index(rng.below(std::uint64_t(k)));
    Eigen::VectorXd dirac = Eigen::VectorXd::Zero(k);
    dirac(star) = 1.0;
    EXPECT_NEAR(softlog_cross_entropy(p, dirac), 1.0 - 2.0 * p(star), 1e-12);
  }
}

TEST(RelativeEntropy, Examples) {
  const auto a = vec({0.2, 0.5, 0.3});
  EXPECT_EQ(softlog_relative_entropy(a, a), 0.0);
  EXPECT_NEAR(softlog_relative_entropy(vec({0, 1}), vec({1, 0})), 1.0, 1e-12);
  const double expected = 0.25 * std::log(std::pow((kE * kE + 1) / 2, 2) / (kE * kE));
  EXPECT_NEAR(softlog_relative_entropy(vec({0.5, 0.5}), vec({1, 0})), expected, 1e-12);
  EXPECT_NEAR(softlog_relative_entropy(vec({0.5, 0.5}), vec({1, 0})), 0.2169, 5e-5);
  EXPECT_NEAR(softlog_relative_entropy(vec({0.5, 0.5}), vec({1, 0})),
              oracle::relative_entropy(vec({0.5, 0.5}), vec({1, 0})), 1e-14);
}

TEST(RelativeEntropy, EmpiricalMinimumIsRecordedNotAsserted) {
  Rng rng(12);
  double minimum = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 20000; ++trial) {
    const Index k = 2 + Index(rng.below(8));
    const double d = softlog_relative_entropy(random_prob_vec(k, rng), random_prob_vec(k, rng));
    ASSERT_TRUE(std::isfinite(d));
    minimum = std::min(minimum, d);
  }
  RecordProperty("relative_entropy_min", std::to_string(minimum));
}

TEST(Sld, Examples) {
  const auto a = vec({0.1, 0.6, 0.3});
  EXPECT_EQ(sld(a, a), 0.0);
  EXPECT_NEAR(sld(vec({0, 1}), vec({1, 0})), 1.0, 1e-12);
  const auto p = vec({0.5, 0.5}), q = vec({1, 0});
  EXPECT_NEAR(sld(p, q), 0.5 * (softlog_relative_entropy(p, q) + softlog_relative_entropy(q, p)), 1e-14);
  EXPECT_NEAR(sld(p, q), oracle::sld(p, q), 1e-14);
  EXPECT_THROW(sld(vec({1, 0}), vec({1})), ShapeError);
}

TEST(Sld, BoundsSymmetryAndTermwisePositivity) {
  Rng rng(13);
  const double gain = std::exp(2.0) - 1;
  for (int trial = 0; trial < 20000; ++trial) {
    const Index k = 2 + Index(rng.below(63));
    auto p = random_prob_vec(k, rng), q = random_prob_vec(k, rng);
    const double d = sld(p, q);
    ASSERT_GE(d, -1e-9);
    ASSERT_LE(d, 1.0 + 1e-9);
    ASSERT_EQ(d, sld(q, p));
    ASSERT_LT(sld(p, p), 1e-12);
    for (Index i = 0; i < k; ++i) {
      ASSERT_GE((p(i) - q(i)) * std::log((gain * p(i) + 1) / (gain * q(i) + 1)), 0.0);
    }
    const double h = softlog_entropy(p), x = softlog_cross_entropy(p, q);
    ASSERT_GE(h, -1 - 1e-9);
    ASSERT_LE(h, 1 + 1e-9);
    ASSERT_GE(x, -1 - 1e-9);
    ASSERT_LE(x, 1 + 1e-9);
  }
}

TEST(Sld, TwoRoutesAgree) {
  Rng rng(14);
  for (int trial = 0; trial < 2000; ++trial) {
    const Index k = 2 + Index(rng.below(30));
    auto p = random_prob_vec(k, rng), q = random_prob_vec(k, rng);
    EXPECT_NEAR(sld(p, q), 0.5 * (softlog_relative_entropy(p, q) + softlog_relative_entropy(q, p)), 1e-12);
  }
}

TEST(Measures, MatchArbitraryPrecisionOracle) {
  Rng rng(15);
  for (int trial = 0; trial < 300; ++trial) {
    const Index k = 2 + Index(rng.below(20));
    auto p = random_prob_vec(k, rng), q = random_prob_vec(k, rng);
    EXPECT_NEAR(softlog_entropy(p), oracle::entropy(p), 1e-12);
    EXPECT_NEAR(softlog_cross_entropy(p, q), oracle::cross_entropy(p, q), 1e-12);
    EXPECT_NEAR(softlog_relative_entropy(p, q), oracle::relative_entropy(p, q), 1e-12);
    EXPECT_NEAR(sld(p, q), oracle::sld(p, q), 1e-12);
  }
}

TEST(MeanSld, Examples) {
  Eigen::MatrixXd a(2, 2), b(2, 2), c(2, 2);
  a << 0, 1, 1, 0;
  b << 1, 0, 0, 1;
  c << 0, 1, 0, 1;
  EXPECT_EQ(mean_sld(a, a), 0.0);
  EXPECT_NEAR(mean_sld(a, b), 1.0, 1e-12);
  EXPECT_NEAR(mean_sld(a, c), 0.5, 1e-12);
  EXPECT_THROW(mean_sld(a, Eigen::MatrixXd(3, 2)), ShapeError);
}

TEST(ProbVecCheck, SimplexMembership) {
  EXPECT_TRUE(is_prob_vec(vec({0.25, 0.75})));
  EXPECT_FALSE(is_prob_vec(vec({0.25, 0.7})));
  EXPECT_FALSE(is_prob_vec(vec({-0.1, 1.1})));
}
