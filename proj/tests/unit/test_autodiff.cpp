#include <gtest/gtest.h>

#include <cmath>

#include "dragonfly/softlog.hpp"
#include "test_helpers.hpp"

using namespace dragonfly;
using dragonfly::testing::check_op;
using dragonfly::testing::random_probs;
using dragonfly::testing::random_tensor;

TEST(ForwardOps, IdentityKernelConvolution) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  Tensor<double> kernel({1, 1, 3, 3});
  kernel.at(0, 0, 1, 1) = 1.0;
  auto y = conv2d(x, tape.constant(kernel));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 1.0);
}

TEST(ForwardOps, SoftmaxOfEqualLogitsIsUniform) {
  Tape<double> tape;
  auto p = softmax(tape.constant(Tensor<double>({1, 2}, {0.0, 0.0})));
  EXPECT_EQ(p.value()[0], 0.5);
  EXPECT_EQ(p.value()[1], 0.5);
}

TEST(ForwardOps, GlobalMaxPoolOfRamp) {
  Tensor<double> ramp({1, 1, 5, 5});
  for (Index i = 0; i < 25; ++i) ramp[i] = double(i);
  Tape<double> tape;
  auto y = max_pool2d(tape.constant(ramp), PoolOptions{5, 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 24.0);
}

TEST(ForwardOps, AveragePoolCountsOnlyInBoundsCells) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  PoolOptions opt{3, 1, 1, 1, 1, 1};
  auto y = avg_pool2d(x, opt);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(y.value()[0], 2.5);
}

TEST(ForwardOps, OutputExtentFollowsFloorRule) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Index window = 1 + Index(rng.below(7));
    const Index stride = 1 + Index(rng.below(4));
    const Index in = window + Index(rng.below(20));
    const Index expected = (in - window) / stride + 1;
    EXPECT_EQ(output_extent(in, window, stride, 0, 0, "t"), expected);
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>({1, 1, in, in}, 1.0));
    EXPECT_EQ(max_pool2d(x, PoolOptions{window, stride}).shape()[2], expected);
    EXPECT_EQ(avg_pool2d(x, PoolOptions{window, stride}).shape()[3], expected);
    auto k = tape.constant(Tensor<double>({1, 1, window, window}, 1.0));
    EXPECT_EQ(conv2d(x, k, ConvOptions{stride, 0}).shape()[2], expected);
  }
  EXPECT_THROW(output_extent(4, 5, 1, 0, 0, "pool"), ShapeError);
}

TEST(ForwardOps, SamePaddingGivesCeilExtent) {
  for (Index in = 1; in < 40; ++in)
    for (Index window : {3, 5, 7, 11})
      for (Index stride : {1, 2, 3, 5}) {
        auto [before, after] = same_padding(in, window, stride);
        EXPECT_EQ(output_extent(in, window, stride, before, after, "t"), (in + stride - 1) / stride);
      }
}

TEST(ForwardOps, SoftmaxRowsAreOnSimplex) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    auto p = softmax(tape.constant(random_tensor({4, 1 + Index(rng.below(10))}, rng, -30, 30)));
    for (Index r = 0; r < 4; ++r) {
      const auto row = p.value().matrix().row(r);
      EXPECT_NEAR(row.sum(), 1.0, 1e-12);
      EXPECT_GT(row.minCoeff(), 0.0);
      EXPECT_LT(row.maxCoeff(), 1.0 + 1e-15);
    }
  }
}

TEST(ForwardOps, ShapeMismatchNamesOpAndShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("matmul"), std::string::npos);
    EXPECT_NE(what.find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(add(a, tape.constant(Tensor<double>({3, 2}))), ShapeError);
}

TEST(ForwardOps, SoftlogRejectsOutOfBandInput) {
  Tape<double> tape;
  EXPECT_THROW(softlog(tape.constant(Tensor<double>({1}, {1.0 + 1e-6}))), DomainError);
  EXPECT_THROW(softlog(tape.constant(Tensor<double>({1}, {-1e-6}))), DomainError);
  auto y = softlog(tape.constant(Tensor<double>({2}, {-1e-10, 1.0 + 1e-10})));
  EXPECT_DOUBLE_EQ(y.value()[0], -1.0);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-15);
}

TEST(ForwardOps, NonFiniteOutputIsAnError) {
  Tape<double> tape;
  try {
    log(tape.constant(Tensor<double>({2}, {0.5, 0.0})));
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.op(), "log");
  }
}

TEST(ForwardOps, RepeatedForwardIsBitIdentical) {
  Rng rng(9);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    Tape<double> tape;
    auto y = max_pool2d(relu(conv2d(tape.constant(x), tape.constant(w), ConvOptions{1, 1})), PoolOptions{3, 2});
    return y.value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, LinearMapGradientIsBroadcastOfInput) {
  Tape<double> tape;
  Tensor<double> x({3, 1}, {1.0, -2.0, 0.5});
  auto W = tape.parameter("W", Tensor<double>({2, 3}, 0.3));
  auto loss = sum(matmul(W, tape.constant(x)));
  auto grads = tape.backward(loss);
  for (Index r = 0; r < 2; ++r)
    for (Index c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(grads.at("W").at(r, c), x[c]);
}

TEST(Backward, SoftlogGradientAtZero) {
  Tape<double> tape;
  auto p = tape.parameter("p", Tensor<double>({1}, {0.0}));
  auto grads = tape.backward(softlog(p));
  EXPECT_NEAR(grads.at("p")[0], std::exp(2.0) - 1.0, 1e-12);
  EXPECT_NEAR(grads.at("p")[0], 6.3890561, 1e-7);
}

TEST(Backward, VisitsOpsInReverseExecutionOrder) {
  Tape<double> tape;
  auto a = tape.parameter("a", Tensor<double>({2, 2}, 0.5));
  auto b = relu(a);
  auto c = add(b, a);
  auto d = softmax(c);
  tape.backward(sum(d));
  const auto& order = tape.last_backward_order();
  ASSERT_EQ(order.size(), 4u);
  for (std::size_t i = 1; i < order.size(); ++i) EXPECT_GT(order[i - 1], order[i]);
}

TEST(Backward, EveryParameterGetsExactlyOneGradient) {
  Tape<double> tape;
  auto used = tape.parameter("used", Tensor<double>({2}, 1.0));
  auto again = tape.parameter("used", Tensor<double>({2}, 99.0));
  EXPECT_EQ(used.id(), again.id());
  tape.parameter("idle", Tensor<double>({3}, 1.0));
  auto grads = tape.backward(sum(add(used, again)));
  ASSERT_EQ(grads.size(), 2u);
  EXPECT_DOUBLE_EQ(grads.at("used")[0], 2.0);
  EXPECT_EQ(grads.at("idle"), Tensor<double>({3}, 0.0));
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  auto a = tape.parameter("a", Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(a), ShapeError);
}

TEST(Backward, RecordModeReportsFirstNonFiniteOp) {
  Tape<double> tape(true, FiniteCheck::Record);
  auto p = tape.parameter("p", Tensor<double>({2}, {0.0, 1.0}));
  auto loss = sum(scale(log(p), -1.0));
  EXPECT_FALSE(std::isfinite(loss.value()[0]));
  try {
    tape.backward(loss);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.op(), "log");
  }
}

TEST(Backward, InferenceTapeRecordsNoBackward) {
  Tape<double> tape(false);
  auto p = tape.parameter("p", Tensor<double>({2}, 1.0));
  auto y = relu(p);
  EXPECT_FALSE(tape.node(y.id()).backward);
}

// ---- finite-difference oracle, one block per op -----------------------------------

class OpGradients : public ::testing::TestWithParam<int> {
 protected:
  Rng rng{static_cast<std::uint64_t>(1000 + GetParam())};
  Index small(Index lo, Index span) { return lo + Index(rng.below(static_cast<std::uint64_t>(span))); }
};

TEST_P(OpGradients, MatmulAndDense) {
  const Index m = small(1, 4), n = small(1, 5), p = small(1, 4);
  auto r1 = check_op({random_tensor({m, n}, rng), random_tensor({n, p}, rng)},
                     [](auto& v) { return matmul(v[0], v[1]); });
  EXPECT_LT(r1.max_rel_error(), 1e-4);
  auto r2 = check_op({random_tensor({m, n}, rng), random_tensor({p, n}, rng)}, [](auto& v) { return dense(v[0], v[1]); });
  EXPECT_LT(r2.max_rel_error(), 1e-4);
}

TEST_P(OpGradients, Convolutions) {
  const Index n = small(1, 2), c = small(1, 3), hw = small(4, 5), o = small(1, 3);
  const Index L = rng.below(2) ? 3 : 1, s = small(1, 2), pad = Index(rng.below(2));
  auto x = random_tensor({n, c, hw, hw}, rng);
  auto r1 = check_op({x, random_tensor({o, c, L, L}, rng)},
                     [&](auto& v) { return conv2d(v[0], v[1], ConvOptions{s, pad}); });
  EXPECT_LT(r1.max_rel_error(), 1e-4);
  auto r2 = check_op({x, random_tensor({c, 1, L, L}, rng)},
                     [&](auto& v) { return depthwise_conv2d(v[0], v[1], ConvOptions{s, pad}); });
  EXPECT_LT(r2.max_rel_error(), 1e-4);
  auto r3 = check_op({x, random_tensor({o, c}, rng)}, [](auto& v) { return pointwise_conv(v[0], v[1]); });
  EXPECT_LT(r3.max_rel_error(), 1e-4);
}

TEST_P(OpGradients, Pooling) {
  const Index hw = small(5, 6), M = small(2, 3), s = small(1, 3);
  auto [pb, pa] = same_padding(hw, M, s);
  PoolOptions opt{M, s, pb, pa, pb, pa};
  // distinct values keep the max unique under +-eps perturbations
  Tensor<double> x({2, 2, hw, hw});
  std::vector<double> levels(static_cast<std::size_t>(x.size()));
  for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = double(i) * 0.01;
  rng.shuffle(levels);
  for (Index i = 0; i < x.size(); ++i) x[i] = levels[static_cast<std::size_t>(i)];
  EXPECT_LT(check_op({x}, [&](auto& v) { return max_pool2d(v[0], opt); }).max_rel_error(), 1e-4);
  EXPECT_LT(check_op({x}, [&](auto& v) { return avg_pool2d(v[0], opt); }).max_rel_error(), 1e-4);
}

TEST_P(OpGradients, ElementwiseAndSoftmax) {
  const Index r = small(1, 4), k = small(2, 6);
  auto x = random_tensor({r, k}, rng);
  for (Index i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) < 1e-3) x[i] = 0.1;  // keep relu away from its kink
  }
  EXPECT_LT(check_op({x}, [](auto& v) { return relu(v[0]); }).max_rel_error(), 1e-4);
  EXPECT_LT(check_op({x}, [](auto& v) { return softmax(v[0]); }).max_rel_error(), 1e-4);
  auto probs = random_probs(r, k, rng);
  EXPECT_LT(check_op({probs}, [](auto& v) { return softlog(v[0]); }).max_rel_error(), 1e-4);
  EXPECT_LT(check_op({probs}, [](auto& v) { return log(v[0]); }).max_rel_error(), 1e-4);
}

TEST_P(OpGradients, ConcatAndAffineCombine) {
  const Index r = small(1, 3), k = small(2, 4);
  auto a = random_tensor({r, k}, rng), b = random_tensor({r, k + 1}, rng), c = random_tensor({r, k}, rng);
  EXPECT_LT(check_op({a, b}, [](auto& v) { return concat<double>({v[0], v[1]}, 1); }).max_rel_error(), 1e-4);
  EXPECT_LT(check_op({a, c, random_tensor({2}, rng)},
                     [](auto& v) { return affine_combine<double>({v[0], v[1]}, v[2]); })
                .max_rel_error(),
            1e-4);
}

TEST_P(OpGradients, BatchnormTrainingAndInference) {
  const Index n = small(2, 3), c = small(1, 3), hw = small(1, 3);
  auto x = random_tensor({n, c, hw, hw}, rng);
  auto gamma = random_tensor({c}, rng, 0.5, 1.5), beta = random_tensor({c}, rng);
  auto train = check_op({x, gamma, beta}, [](auto& v) {
    return batchnorm<double>(v[0], v[1], v[2], nullptr, BatchNormOptions{true, false});
  });
  EXPECT_LT(train.max_rel_error(), 1e-4);
  RunningStats<double> stats{random_tensor({c}, rng), random_tensor({c}, rng, 0.5, 2.0)};
  auto infer = check_op({x, gamma, beta}, [&](auto& v) {
    return batchnorm<double>(v[0], v[1], v[2], &stats, BatchNormOptions{false, false});
  });
  EXPECT_LT(infer.max_rel_error(), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(TwentyRandomShapes, OpGradients, ::testing::Range(0, 20));

TEST(GradCheck, DenseLayerIsTight) {
  Rng rng(21);
  auto report = check_op({random_tensor({4, 6}, rng), random_tensor({3, 6}, rng)},
                         [](auto& v) { return softmax(dense(v[0], v[1])); });
  EXPECT_LT(report.max_rel_error(), 1e-6);
  EXPECT_EQ(report.entries.size(), 2u);
}

TEST(GradCheck, BatchnormTrainingMode) {
  Rng rng(22);
  auto report = check_op({random_tensor({4, 3, 2, 2}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)},
                         [](auto& v) {
                           return batchnorm<double>(v[0], v[1], v[2], nullptr, BatchNormOptions{true, false});
                         });
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(GradCheck, SampledEntriesAreDeterministic) {
  Rng rng(23);
  auto x = random_tensor({3, 8}, rng), w = random_tensor({5, 8}, rng);
  GradCheckOptions opt;
  opt.max_entries = 4;
  opt.seed = 99;
  auto op = [](auto& v) { return softmax(dense(v[0], v[1])); };
  auto a = check_op({x, w}, op, 7, opt);
  auto b = check_op({x, w}, op, 7, opt);
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    EXPECT_EQ(a.entries[i].checked, 4);
    EXPECT_EQ(a.entries[i].rel_error, b.entries[i].rel_error);
  }
}

TEST(Batchnorm, RunningStatisticsUseMomentum) {
  Tape<double> tape;
  RunningStats<double> stats;
  Tensor<double> x({2, 1}, {1.0, 3.0});
  batchnorm<double>(tape.constant(x), tape.constant(Tensor<double>({1}, 1.0)), tape.constant(Tensor<double>({1}, 0.0)),
                    &stats);
  EXPECT_NEAR(stats.mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(stats.var[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-15);
  auto y = batchnorm<double>(tape.constant(x), tape.constant(Tensor<double>({1}, 1.0)),
                             tape.constant(Tensor<double>({1}, 0.0)), &stats, BatchNormOptions{false});
  EXPECT_NEAR(y.value()[0], (1.0 - 0.2) / std::sqrt(1.0 + 1e-5), 1e-12);
}
