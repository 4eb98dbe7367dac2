#include <gtest/gtest.h>

#include "dragonfly/layers.hpp"
#include "test_helpers.hpp"

using namespace dragonfly;
using dragonfly::testing::check_op;
using dragonfly::testing::random_prob_vec;
using dragonfly::testing::random_probs;
using dragonfly::testing::random_tensor;

namespace {

std::size_t parse_error_position(const std::string& text) {
  try {
    parse_layer_notation(text);
  } catch (const ParseError& e) {
    return e.position();
  }
  ADD_FAILURE() << "no ParseError for '" << text << "'";
  return std::string::npos;
}

Index argmax(const Eigen::VectorXd& v) {
  Index best = 0;
  v.maxCoeff(&best);
  return best;
}

}  // namespace

TEST(LayerNotation, ParsesTableTokens) {
  EXPECT_EQ(parse_layer_notation("G5[v2]"), LayerSpec(MaxPoolLayer{5, 2}));
  EXPECT_EQ(parse_layer_notation("D3[96]"), LayerSpec(DscLayer{3, 96}));
  EXPECT_EQ(parse_layer_notation("C3[128]"), LayerSpec(Conv2DLayer{3, 128}));
  EXPECT_EQ(parse_layer_notation("F7[v3]"), LayerSpec(AvgPoolLayer{7, 3}));
  EXPECT_EQ(parse_layer_notation("Integrator[3,4,5,6]"), LayerSpec(IntegratorLayer{{3, 4, 5, 6}}));
  EXPECT_EQ(parse_layer_notation("BN"), LayerSpec(BatchNormLayer{}));
}

TEST(LayerNotation, RoundTripsEveryTableToken) {
  const std::vector<std::string> tokens = {
      "C3[128]", "C3[32]", "C3[96]", "C3[64]", "C3[80]", "C3[48]", "D3[128]", "D3[32]",  "D3[96]",  "D3[64]",
      "D3[80]",  "D3[48]", "F7[v3]", "F5[v1]", "F5[v2]", "G11[v5]", "G5[v2]", "G7[v3]",  "BN",      "ReLU",
      "DCN",     "Softmax", "Integrator[1,2]", "Integrator[1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16]"};
  for (const auto& t : tokens) {
    EXPECT_EQ(format_layer(parse_layer_notation(t)), t);
    EXPECT_EQ(parse_layer_notation(format_layer(parse_layer_notation(t))), parse_layer_notation(t));
  }
}

TEST(LayerNotation, MalformedTextReportsPosition) {
  EXPECT_EQ(parse_error_position(""), 0u);
  EXPECT_EQ(parse_error_position("X3[1]"), 0u);
  EXPECT_EQ(parse_error_position("C[3]"), 1u);
  EXPECT_EQ(parse_error_position("C3[0]"), 3u);
  EXPECT_EQ(parse_error_position("G5[2]"), 3u);
  EXPECT_EQ(parse_error_position("F5[v]"), 4u);
  EXPECT_EQ(parse_error_position("C3[12"), 5u);
  EXPECT_EQ(parse_error_position("C3[12]x"), 6u);
  EXPECT_EQ(parse_error_position("Integrator[1,]"), 13u);
}

TEST(Dcn, Examples) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 2}, {3, -1}));
  auto eye = tape.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto y = dcn_apply(x, eye);
  EXPECT_EQ(y.value()[0], 3.0);
  EXPECT_EQ(y.value()[1], -1.0);

  auto zero = tape.constant(Tensor<double>({3, 2}, 0.0));
  auto p = softmax(dcn_apply(x, zero));
  for (Index k = 0; k < 3; ++k) EXPECT_NEAR(p.value()[k], 1.0 / 3, 1e-15);
}

TEST(Dcn, MatchesNaiveLoopOnFeatureMaps) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Index B = 1 + Index(rng.below(4)), C = 1 + Index(rng.below(4)), H = 1 + Index(rng.below(4)),
                K = 2 + Index(rng.below(5));
    const Index N = C * H * H;
    Tape<double> tape;
    auto x = tape.constant(random_tensor({B, C, H, H}, rng));
    auto w = tape.constant(random_tensor({K, N}, rng));
    auto y = dcn_apply(x, w);
    ASSERT_EQ(y.shape(), (Shape{B, K}));
    for (Index b = 0; b < B; ++b)
      for (Index k = 0; k < K; ++k) {
        double acc = 0;
        for (Index n = 0; n < N; ++n) acc += w.value().at(k, n) * x.value()[b * N + n];
        EXPECT_NEAR(y.value().at(b, k), acc, 1e-12);
      }
  }
}

TEST(Dcn, DimensionMismatchThrows) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 2, 2, 2}, 1.0));
  EXPECT_THROW(dcn_apply(x, tape.constant(Tensor<double>({3, 7}, 1.0))), ShapeError);
}

TEST(Integrator, SingleUniformBranchStaysUniform) {
  const Eigen::VectorXd u = Eigen::VectorXd::Constant(5, 0.2);
  for (auto mode : {IntegratorMode::Scalar, IntegratorMode::Dense}) {
    Rng rng(1);
    auto w = init_integrator<double>(mode, 1, 5, rng);
    w.weights.values() /= w.weights.values().maxCoeff();  // weight exactly 1
    const auto p = softlog_softmax_integrator<double>({u}, w);
    for (Index k = 0; k < 5; ++k) EXPECT_NEAR(p(k), 0.2, 1e-15);
  }
}

TEST(Integrator, IdenticalBranchesKeepArgmax) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Index K = 2 + Index(rng.below(8));
    Eigen::VectorXd p = random_prob_vec(K, rng);
    if ((p.array() == p.maxCoeff()).count() > 1) continue;
    IntegratorWeights<double> w{IntegratorMode::Scalar, Tensor<double>({2}, rng.uniform(0.01, 5.0))};
    EXPECT_EQ(argmax(softlog_softmax_integrator<double>({p, p}, w)), argmax(p));
  }
}

TEST(Integrator, ZeroWeightSilencesBranch) {
  const Eigen::VectorXd a = (Eigen::VectorXd(3) << 0, 1, 0).finished();
  const Eigen::VectorXd b = (Eigen::VectorXd(3) << 1, 0, 0).finished();
  IntegratorWeights<double> w{IntegratorMode::Scalar, Tensor<double>({2}, {1.0, 0.0})};
  const auto p = softlog_softmax_integrator<double>({a, b}, w);
  EXPECT_EQ(argmax(p), 1);
  // softmax of softlog([0,1,0]) = softmax([-1, 1, -1])
  const double denom = 2 * std::exp(-1.0) + std::exp(1.0);
  EXPECT_NEAR(p(1), std::exp(1.0) / denom, 1e-15);
}

TEST(Integrator, ClassCountMismatchThrows) {
  Rng rng(3);
  auto w = init_integrator<double>(IntegratorMode::Scalar, 2, 3, rng);
  EXPECT_THROW(softlog_softmax_integrator<double>({Eigen::VectorXd::Constant(3, 1.0 / 3), Eigen::VectorXd::Constant(2, 0.5)}, w),
               ShapeError);
  auto dense = init_integrator<double>(IntegratorMode::Dense, 2, 3, rng);
  EXPECT_THROW(dense.validate(3, 3), ShapeError);
  Tape<double> tape;
  auto p3 = tape.constant(random_probs(2, 3, rng));
  auto p2 = tape.constant(random_probs(2, 2, rng));
  EXPECT_THROW(softlog_softmax_integrator<double>({p3, p2}, tape.constant(w.weights), IntegratorMode::Scalar),
               ShapeError);
  EXPECT_THROW(softlog_softmax_integrator<double>({p3, p3}, tape.constant(w.weights), IntegratorMode::Dense),
               ShapeError);
}

TEST(Integrator, OutputOnSimplexForLargeWeights) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const Index K = 2 + Index(rng.below(10)), B = 1 + Index(rng.below(16));
    std::vector<Eigen::VectorXd> branches;
    for (Index b = 0; b < B; ++b) branches.push_back(random_prob_vec(K, rng));
    for (auto mode : {IntegratorMode::Scalar, IntegratorMode::Dense}) {
      IntegratorWeights<double> w{mode, random_tensor(IntegratorWeights<double>::expected_shape(mode, B, K), rng, -1e3, 1e3)};
      const auto p = softlog_softmax_integrator<double>(branches, w);
      ASSERT_TRUE(is_prob_vec(p)) << p.transpose();
    }
  }
}

TEST(Integrator, TapeAndDirectEvaluationAgree) {
  Rng rng(5);
  for (auto mode : {IntegratorMode::Scalar, IntegratorMode::Dense}) {
    const Index K = 4, B = 3, S = 2;
    auto w = IntegratorWeights<double>{mode, random_tensor(IntegratorWeights<double>::expected_shape(mode, B, K), rng, -3, 3)};
    std::vector<Tensor<double>> batches;
    for (Index b = 0; b < B; ++b) batches.push_back(random_probs(S, K, rng));
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& t : batches) vars.push_back(tape.constant(t));
    auto out = softlog_softmax_integrator(vars, tape.constant(w.weights), mode);
    for (Index s = 0; s < S; ++s) {
      std::vector<Eigen::VectorXd> rows;
      for (auto& t : batches) rows.push_back(t.matrix().row(s).transpose());
      const auto p = softlog_softmax_integrator<double>(rows, w);
      for (Index k = 0; k < K; ++k) EXPECT_NEAR(out.value().at(s, k), p(k), 1e-14);
    }
  }
}

TEST(Integrator, InitialDenseMapEqualsScalarMap) {
  Rng a(9), b(9), data(10);
  auto scalar = init_integrator<double>(IntegratorMode::Scalar, 4, 3, a);
  auto dense = init_integrator<double>(IntegratorMode::Dense, 4, 3, b);
  std::vector<Eigen::VectorXd> branches;
  for (int i = 0; i < 4; ++i) branches.push_back(random_prob_vec(3, data));
  const auto ps = softlog_softmax_integrator<double>(branches, scalar);
  const auto pd = softlog_softmax_integrator<double>(branches, dense);
  EXPECT_LT((ps - pd).cwiseAbs().maxCoeff(), 1e-15);
  for (Index i = 0; i < 4; ++i) {
    EXPECT_GE(scalar.weights[i], 0.5 / 4);
    EXPECT_LT(scalar.weights[i], 1.5 / 4);
  }
}

class IntegratorGradients : public ::testing::TestWithParam<int> {};

TEST_P(IntegratorGradients, BothModesPassGradientCheck) {
  Rng rng(100 + static_cast<std::uint64_t>(GetParam()));
  const Index K = 2 + Index(rng.below(4)), B = 1 + Index(rng.below(4)), S = 1 + Index(rng.below(3));
  for (auto mode : {IntegratorMode::Scalar, IntegratorMode::Dense}) {
    std::vector<Tensor<double>> inputs;
    for (Index b = 0; b < B; ++b) inputs.push_back(random_probs(S, K, rng));
    inputs.push_back(random_tensor(IntegratorWeights<double>::expected_shape(mode, B, K), rng, -2, 2));
    auto report = check_op(inputs, [&](std::vector<Var<double>>& v) {
      std::vector<Var<double>> branches(v.begin(), v.end() - 1);
      return softlog_softmax_integrator(branches, v.back(), mode);
    });
    EXPECT_LT(report.max_rel_error(), 1e-4) << to_string(mode);
  }
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, IntegratorGradients, ::testing::Range(0, 10));

TEST(Init, HeUniformBound) {
  Rng rng(6);
  auto t = he_uniform<double>({64, 24}, 24, rng);
  const double bound = std::sqrt(6.0 / 24);
  EXPECT_LE(t.values().abs().maxCoeff(), bound);
  EXPECT_GT(t.values().abs().maxCoeff(), 0.9 * bound);
  EXPECT_NEAR(t.values().mean(), 0.0, 0.05);
}
