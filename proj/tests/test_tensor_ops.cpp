#include "resnest/ops.hpp"
#include "resnest/regularization.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace resnest;
using namespace testing_util;

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<double>(Shape{}), ConfigError);
  EXPECT_THROW(Tensor<double>(Shape{1, 2, 3, 4, 5}), ConfigError);
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), ConfigError);
  EXPECT_THROW(Tensor<double>(Shape{2}, {1.0, 2.0, 3.0}), ConfigError);
  Tensor<double> t({2, 3});
  EXPECT_THROW(t.reshaped({4}), ConfigError);
}

TEST(Tensor, RowMajorIndexing) {
  Tensor<double> t({2, 3, 4, 5});
  for (Index i = 0; i < t.size(); ++i) t[i] = double(i);
  EXPECT_EQ(t(1, 2, 3, 4), double(t.size() - 1));
  EXPECT_EQ(t(0, 1, 0, 0), 20.0);
  EXPECT_EQ(t(1, 0, 2, 1), 60.0 + 11.0);
}

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, PointwiseIdentity) {
  Rng rng(1);
  auto x = randn({2, 4, 5, 5}, rng);
  Tensor<double> w({4, 4, 1, 1});
  for (Index c = 0; c < 4; ++c) w(c, c, 0, 0) = 1.0;
  EXPECT_EQ(max_abs_diff(conv2d(x, w, nullptr, {}), x), 0.0);
}

TEST(Conv2d, AllOnesSum) {
  Tensor<double> x({1, 1, 3, 3}, 1.0);
  Tensor<double> w({1, 1, 3, 3}, 1.0);
  const auto y = conv2d(x, w, nullptr, {});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, GroupedMatchesDirectSummation) {
  Rng rng(2);
  auto x = randn({1, 4, 5, 5}, rng);
  auto w = randn({4, 2, 3, 3}, rng);
  const auto fast = conv2d(x, w, nullptr, {Pair{1}, Pair{1}, 2});
  EXPECT_LT(max_abs_diff(fast, naive_conv(x, w, nullptr, 1, 1, 2)), 1e-12);
}

TEST(Conv2d, RandomGeometriesMatchDirectSummation) {
  Rng rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    const Index groups = draw(rng, 1, 3);
    const Index cin = groups * draw(rng, 1, 3);
    const Index cout = groups * draw(rng, 1, 3);
    const Index k = draw(rng, 1, 3);
    const Index pad = draw(rng, 0, 2);
    const Index stride = draw(rng, 1, 3);
    const Index h = draw(rng, std::max<Index>(1, k - 2 * pad), 7);
    const Index wd = draw(rng, std::max<Index>(1, k - 2 * pad), 7);
    auto x = randn({draw(rng, 1, 2), cin, h, wd}, rng);
    auto w = randn({cout, cin / groups, k, k}, rng);
    auto b = randn({cout}, rng);
    const auto y = conv2d(x, w, &b, {Pair{stride}, Pair{pad}, groups});
    EXPECT_LT(max_abs_diff(y, naive_conv(x, w, &b, stride, pad, groups)), 1e-12)
        << "trial " << trial << " g=" << groups << " k=" << k << " pad=" << pad
        << " stride=" << stride;
  }
}

TEST(Conv2d, GroupsEqualConcatenatedSlices) {
  Rng rng(4);
  const Index g = 3;
  auto x = randn({2, 6, 6, 6}, rng);
  auto w = randn({9, 2, 3, 3}, rng);
  const ConvGeometry geo{Pair{2}, Pair{1}, g};
  const auto y = conv2d(x, w, nullptr, geo);
  for (Index grp = 0; grp < g; ++grp) {
    Tensor<double> xs({2, 2, 6, 6});
    for (Index n = 0; n < 2; ++n)
      for (Index c = 0; c < 2; ++c)
        for (Index i = 0; i < 36; ++i) xs[(n * 2 + c) * 36 + i] = x[(n * 6 + grp * 2 + c) * 36 + i];
    Tensor<double> ws({3, 2, 3, 3}, w.vec().segment(grp * 3 * 18, 3 * 18).eval());
    const auto ys = conv2d(xs, ws, nullptr, {Pair{2}, Pair{1}, 1});
    for (Index n = 0; n < 2; ++n)
      for (Index o = 0; o < 3; ++o)
        for (Index i = 0; i < 9; ++i)
          EXPECT_EQ(ys[(n * 3 + o) * 9 + i], y[(n * 9 + grp * 3 + o) * 9 + i]);
  }
}

TEST(Conv2d, LinearInInputAndWeight) {
  Rng rng(5);
  auto x1 = randn({2, 4, 6, 6}, rng), x2 = randn({2, 4, 6, 6}, rng);
  auto w1 = randn({6, 2, 3, 3}, rng), w2 = randn({6, 2, 3, 3}, rng);
  const ConvGeometry geo{Pair{1}, Pair{1}, 2};
  const double a = 0.7, b = -1.3;
  Tensor<double> xm(x1.shape(), (a * x1.vec() + b * x2.vec()).eval());
  Tensor<double> wm(w1.shape(), (a * w1.vec() + b * w2.vec()).eval());
  Tensor<double> expect_x(
      Shape{2, 6, 6, 6},
      (a * conv2d(x1, w1, nullptr, geo).vec() + b * conv2d(x2, w1, nullptr, geo).vec()).eval());
  Tensor<double> expect_w(
      Shape{2, 6, 6, 6},
      (a * conv2d(x1, w1, nullptr, geo).vec() + b * conv2d(x1, w2, nullptr, geo).vec()).eval());
  EXPECT_LT(max_abs_diff(conv2d(xm, w1, nullptr, geo), expect_x), 1e-12);
  EXPECT_LT(max_abs_diff(conv2d(x1, wm, nullptr, geo), expect_w), 1e-12);
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  Rng rng(6);
  auto x = randn({2, 4, 5, 5}, rng);
  auto w = randn({6, 2, 3, 3}, rng);
  auto b = randn({6}, rng);
  const ConvGeometry geo{Pair{2}, Pair{1}, 2};
  // Sum of outputs, then a random projection.
  for (const bool ones : {true, false}) {
    const auto proj = ones ? Tensor<double>({2, 6, 3, 3}, 1.0) : randn({2, 6, 3, 3}, rng);
    const double tol = ones ? 1e-7 : 1e-6;
    auto loss = [&] { return project(conv2d(x, w, &b, geo), proj); };
    const auto g = conv2d_backward(x, w, geo, proj, true);
    EXPECT_LT(max_rel_error(g.input, numeric_grad(x, loss, 1e-5)), tol);
    EXPECT_LT(max_rel_error(g.weight, numeric_grad(w, loss, 1e-5)), tol);
    EXPECT_LT(max_rel_error(g.bias, numeric_grad(b, loss, 1e-5)), tol);
  }
}

TEST(Conv2d, ShapeErrors) {
  Tensor<double> x({1, 3, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor<double>({4, 2, 3, 3}), nullptr, {}), ConfigError);
  EXPECT_THROW(conv2d(x, Tensor<double>({4, 3, 7, 7}), nullptr, {}), ConfigError);
  EXPECT_THROW(conv2d(x, Tensor<double>({4, 1, 1, 1}), nullptr, {Pair{1}, Pair{0}, 2}),
               ConfigError);
}

// ---------------------------------------------------------------------------
// pooling

Tensor<double> naive_avg_pool(const Tensor<double>& x, Index k, Index s, Index p, bool include) {
  const Index ho = (x.dim(2) + 2 * p - k) / s + 1, wo = (x.dim(3) + 2 * p - k) / s + 1;
  Tensor<double> y({x.dim(0), x.dim(1), ho, wo});
  for (Index n = 0; n < x.dim(0); ++n)
    for (Index c = 0; c < x.dim(1); ++c)
      for (Index i = 0; i < ho; ++i)
        for (Index j = 0; j < wo; ++j) {
          double sum = 0;
          Index inside = 0;
          for (Index a = 0; a < k; ++a)
            for (Index b = 0; b < k; ++b) {
              const Index r = i * s - p + a, q = j * s - p + b;
              if (r < 0 || q < 0 || r >= x.dim(2) || q >= x.dim(3)) continue;
              sum += x(n, c, r, q);
              ++inside;
            }
          y(n, c, i, j) = sum / double(include ? k * k : inside);
        }
  return y;
}

TEST(AvgPool, ConstantInput) {
  Tensor<double> x({1, 2, 5, 5}, 3.25);
  const auto y = avg_pool2d(x, {Pair{3}, Pair{2}, Pair{1}, false});
  for (Index i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 3.25);
}

TEST(AvgPool, TwoByTwoMean) {
  Tensor<double> x({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(avg_pool2d(x, {Pair{2}, Pair{2}, Pair{0}, true})[0], 2.5);
}

TEST(AvgPool, MatchesWindowLoop) {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const Index k = draw(rng, 1, 3), s = draw(rng, 1, 3), p = draw(rng, 0, k / 2);
    const bool include = rng.bernoulli(0.5);
    auto x = randn({2, 3, draw(rng, k, 8), draw(rng, k, 8)}, rng);
    const auto y = avg_pool2d(x, {Pair{k}, Pair{s}, Pair{p}, include});
    EXPECT_LT(max_abs_diff(y, naive_avg_pool(x, k, s, p, include)), 1e-12) << "trial " << trial;
  }
}

TEST(AvgPool, MeanOfMeansOnPartition) {
  Rng rng(8);
  auto x = randn({2, 3, 8, 8}, rng);
  const auto pooled = avg_pool2d(x, {Pair{2}, Pair{2}, Pair{0}, true});
  EXPECT_LT(max_abs_diff(global_avg_pool(pooled), global_avg_pool(x)), 1e-14);
}

TEST(AvgPool, BackwardMatchesFiniteDifferences) {
  Rng rng(9);
  auto x = randn({2, 2, 6, 5}, rng);
  const PoolGeometry geo{Pair{3}, Pair{2}, Pair{1}, false};
  auto proj = randn(avg_pool2d(x, geo).shape(), rng);
  const auto g = avg_pool2d_backward(x.shape(), geo, proj);
  EXPECT_LT(max_rel_error(g, numeric_grad(x, [&] { return project(avg_pool2d(x, geo), proj); })),
            1e-7);
}

TEST(MaxPool, MatchesWindowLoopAndRoutesGradient) {
  Rng rng(10);
  auto x = randn({2, 3, 7, 7}, rng);
  const PoolGeometry geo{Pair{3}, Pair{2}, Pair{1}, true};
  const auto r = max_pool2d(x, geo);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) {
          double best = -1e300;
          for (Index a = 2 * i - 1; a <= 2 * i + 1; ++a)
            for (Index b = 2 * j - 1; b <= 2 * j + 1; ++b)
              if (a >= 0 && b >= 0 && a < 7 && b < 7) best = std::max(best, x(n, c, a, b));
          EXPECT_EQ(r.output(n, c, i, j), best);
        }
  auto proj = randn(r.output.shape(), rng);
  const auto g = max_pool2d_backward(x.shape(), r.argmax, proj);
  const auto num = numeric_grad(x, [&] { return project(max_pool2d(x, geo).output, proj); });
  EXPECT_LT(max_rel_error(g, num), 1e-7);
}

TEST(GlobalAvgPool, FlatMean) {
  Rng rng(11);
  auto x = randn({3, 4, 5, 6}, rng);
  const auto y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{3, 4}));
  for (Index n = 0; n < 3; ++n)
    for (Index c = 0; c < 4; ++c) {
      double s = 0;
      for (Index i = 0; i < 30; ++i) s += x[(n * 4 + c) * 30 + i];
      EXPECT_NEAR(y(n, c), s / 30.0, 1e-12);
    }
  Tensor<double> one({2, 3, 1, 1});
  for (Index i = 0; i < 6; ++i) one[i] = double(i);
  EXPECT_EQ(global_avg_pool(one).vec(), one.vec());
  auto proj = randn({3, 4}, rng);
  EXPECT_LT(max_rel_error(global_avg_pool_backward(x.shape(), proj),
                          numeric_grad(x, [&] { return project(global_avg_pool(x), proj); })),
            1e-7);
}

// ---------------------------------------------------------------------------
// fully connected

TEST(FullyConnected, IdentityAndGroupOracle) {
  Rng rng(12);
  auto x = randn({3, 4}, rng);
  Tensor<double> eye({4, 4});
  for (Index i = 0; i < 4; ++i) eye(i, i) = 1.0;
  EXPECT_EQ(max_abs_diff(fully_connected(x, eye, nullptr), x), 0.0);

  auto xg = randn({5, 6}, rng);
  auto w = randn({9, 2}, rng);
  auto b = randn({9}, rng);
  const auto y = fully_connected(xg, w, &b, 3);
  for (Index n = 0; n < 5; ++n)
    for (Index o = 0; o < 9; ++o) {
      const Index g = o / 3;
      double s = b[o];
      for (Index f = 0; f < 2; ++f) s += w(o, f) * xg(n, g * 2 + f);
      EXPECT_NEAR(y(n, o), s, 1e-12);
    }
}

TEST(FullyConnected, BackwardMatchesFiniteDifferences) {
  Rng rng(13);
  auto x = randn({4, 6}, rng);
  auto w = randn({4, 3}, rng);
  auto b = randn({4}, rng);
  auto proj = randn({4, 4}, rng);
  auto loss = [&] { return project(fully_connected(x, w, &b, 2), proj); };
  const auto g = fully_connected_backward(x, w, proj, 2, true);
  EXPECT_LT(max_rel_error(g.input, numeric_grad(x, loss)), 1e-7);
  EXPECT_LT(max_rel_error(g.weight, numeric_grad(w, loss)), 1e-7);
  EXPECT_LT(max_rel_error(g.bias, numeric_grad(b, loss)), 1e-7);
}

// ---------------------------------------------------------------------------
// batch norm

TEST(BatchNorm, TrainMatchesTwoPassStatistics) {
  Rng rng(14);
  auto x = randn({4, 3, 5, 5}, rng, 2.0);
  auto gamma = randn({3}, rng);
  auto beta = randn({3}, rng);
  const auto r = batch_norm_train(x, gamma, beta, 1e-5);
  for (Index c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 25; ++i) mean += x[(n * 3 + c) * 25 + i];
    mean /= 100;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 25; ++i) var += std::pow(x[(n * 3 + c) * 25 + i] - mean, 2);
    var /= 100;
    EXPECT_NEAR(r.mean[c], mean, 1e-12);
    EXPECT_NEAR(r.variance[c], var, 1e-10);
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 25; ++i) {
        const Index k = (n * 3 + c) * 25 + i;
        EXPECT_NEAR(r.output[k], gamma[c] * (x[k] - mean) / std::sqrt(var + 1e-5) + beta[c], 1e-10);
      }
  }
}

TEST(BatchNorm, UnitScaleGivesStandardizedOutput) {
  Rng rng(15);
  auto x = randn({8, 2, 3, 3}, rng, 3.0);
  const auto r = batch_norm_train(x, Tensor<double>({2}, 1.0), Tensor<double>({2}), 1e-5);
  const auto again = batch_norm_train(r.output, Tensor<double>({2}, 1.0), Tensor<double>({2}), 0.0);
  for (Index c = 0; c < 2; ++c) {
    EXPECT_NEAR(again.mean[c], 0.0, 1e-12);
    EXPECT_NEAR(again.variance[c], 1.0, 1e-4);
  }
}

TEST(BatchNorm, ZeroScaleOutputsShift) {
  Rng rng(16);
  auto x = randn({3, 2, 4, 4}, rng);
  Tensor<double> beta({2}, {0.5, -2.0});
  const auto r = batch_norm_train(x, Tensor<double>({2}), beta, 1e-5);
  for (Index n = 0; n < 3; ++n)
    for (Index c = 0; c < 2; ++c)
      for (Index i = 0; i < 16; ++i) EXPECT_EQ(r.output[(n * 2 + c) * 16 + i], beta[c]);
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  Rng rng(17);
  auto x = randn({2, 3}, rng);
  Tensor<double> gamma({3}, {1.0, 2.0, 0.5}), beta({3}, {0.0, 1.0, -1.0});
  Tensor<double> mean({3}, {0.1, -0.2, 0.3}), var({3}, {1.5, 0.5, 2.0});
  const auto r = batch_norm_eval(x, gamma, beta, mean, var, 1e-5);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      EXPECT_NEAR(r.output(n, c), gamma[c] * (x(n, c) - mean[c]) / std::sqrt(var[c] + 1e-5) + beta[c],
                  1e-12);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  Rng rng(18);
  for (const bool rank4 : {true, false}) {
    auto x = rank4 ? randn({3, 2, 3, 3}, rng) : randn({5, 4}, rng);
    const Index c = x.dim(1);
    auto gamma = randn({c}, rng);
    auto beta = randn({c}, rng);
    auto proj = randn(x.shape(), rng);
    auto loss = [&] { return project(batch_norm_train(x, gamma, beta, 1e-5).output, proj); };
    const auto r = batch_norm_train(x, gamma, beta, 1e-5);
    const auto g = batch_norm_backward(r.cache, gamma, proj);
    EXPECT_LT(max_rel_error(g.input, numeric_grad(x, loss)), 1e-6);
    EXPECT_LT(max_rel_error(g.gamma, numeric_grad(gamma, loss)), 1e-6);
    EXPECT_LT(max_rel_error(g.beta, numeric_grad(beta, loss)), 1e-6);
  }
}

TEST(BatchNormLayer, RunningStatisticsUseUnbiasedVariance) {
  Rng rng(19);
  auto x = randn({4, 2}, rng);
  BatchNorm<double> bn("bn", 2);
  bn.forward(x, Mode::train);
  for (Index c = 0; c < 2; ++c) {
    double mean = 0, ss = 0;
    for (Index n = 0; n < 4; ++n) mean += x(n, c) / 4;
    for (Index n = 0; n < 4; ++n) ss += std::pow(x(n, c) - mean, 2);
    EXPECT_NEAR(bn.running_mean()[c], 0.1 * mean, 1e-15);
    EXPECT_NEAR(bn.running_var()[c], 0.9 + 0.1 * ss / 3.0, 1e-15);
  }
}

// ---------------------------------------------------------------------------
// activations

TEST(Activations, SoftmaxAndSigmoidValues) {
  Tensor<double> logits({1, 3}, {1.0, 2.0, 3.0});
  const auto p = softmax(logits, 1);
  EXPECT_NEAR(p[0], 0.09003057, 1e-8);
  EXPECT_NEAR(p[1], 0.24472847, 1e-8);
  EXPECT_NEAR(p[2], 0.66524096, 1e-8);
  const auto u = softmax(Tensor<double>({2, 4}, 7.0), 1);
  for (Index i = 0; i < u.size(); ++i) EXPECT_DOUBLE_EQ(u[i], 0.25);
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(relu(Tensor<double>({3}, {-1.0, 0.0, 2.0})).vec(), Eigen::Vector3d(0, 0, 2));
}

TEST(Activations, SoftmaxLargeLogitsStayFinite) {
  const auto p = softmax(Tensor<double>({1, 2}, {1000.0, 1000.0}), 1);
  EXPECT_EQ(p[0], 0.5);
}

TEST(Activations, JacobiansMatchFiniteDifferences) {
  Rng rng(20);
  auto z = randn({2, 3, 4}, rng);
  auto proj = randn(z.shape(), rng);
  const auto p = softmax(z, 1);
  EXPECT_LT(max_rel_error(softmax_backward(p, proj, 1),
                          numeric_grad(z, [&] { return project(softmax(z, 1), proj); })),
            1e-6);
  const auto s = sigmoid(z);
  EXPECT_LT(max_rel_error(sigmoid_backward(s, proj),
                          numeric_grad(z, [&] { return project(sigmoid(z), proj); })),
            1e-6);
}

// ---------------------------------------------------------------------------
// dropout and DropBlock

TEST(Dropout, IdentityCases) {
  Rng rng(21);
  auto x = randn({4, 5}, rng);
  EXPECT_EQ(max_abs_diff(dropout(x, 0.0, rng, Mode::train).output, x), 0.0);
  EXPECT_EQ(max_abs_diff(dropout(x, 0.7, rng, Mode::eval).output, x), 0.0);
  EXPECT_THROW(dropout(x, 1.0, rng, Mode::train), ConfigError);
}

TEST(Dropout, MonteCarloRateAndMean) {
  Rng rng(22);
  Tensor<double> x({1000, 1000});
  for (Index i = 0; i < x.size(); ++i) x[i] = 1.0 + rng.uniform();
  const auto r = dropout(x, 0.2, rng, Mode::train);
  double kept = 0;
  for (Index i = 0; i < r.mask.size(); ++i) kept += r.mask[i] != 0.0 ? 1 : 0;
  EXPECT_NEAR(kept / double(x.size()), 0.8, 0.005);
  EXPECT_NEAR(r.output.vec().mean() / x.vec().mean(), 1.0, 0.01);
}

TEST(DropBlock, ZeroProbabilityAndEvalGiveOnes) {
  Rng rng(23);
  const auto a = dropblock_mask<double>({2, 3, 8, 8}, 3, 0.0, rng);
  const auto b = dropblock_mask<double>({2, 3, 8, 8}, 3, 0.5, rng, Mode::eval);
  for (Index i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], 1.0);
    EXPECT_EQ(b[i], 1.0);
  }
}

TEST(DropBlock, MonteCarloDropFraction) {
  Rng rng(24);
  for (const Index block : {1, 3}) {
    for (const double p : {0.1, 0.2}) {
      double dropped = 0, total = 0;
      for (int draw_i = 0; draw_i < 200; ++draw_i) {
        const auto m = dropblock_mask<double>({4, 8, 16, 16}, block, p, rng);
        for (Index i = 0; i < m.size(); ++i) dropped += m[i] == 0.0 ? 1 : 0;
        total += double(m.size());
      }
      EXPECT_NEAR(dropped / total, p, 0.02) << "block " << block << " p " << p;
    }
  }
}

TEST(DropBlock, ZeroedRegionsAreSquaresAndSurvivorsRescaled) {
  Rng rng(25);
  const auto m = dropblock_mask<double>({1, 1, 9, 9}, 3, 0.15, rng);
  double kept = 0;
  for (Index i = 0; i < m.size(); ++i) kept += m[i] != 0.0 ? 1 : 0;
  for (Index i = 0; i < m.size(); ++i) {
    if (m[i] != 0.0) {
      EXPECT_NEAR(m[i], 81.0 / kept, 1e-12);
    }
  }
  // every zero lies in some fully zeroed (clipped) 3x3 square
  for (Index i = 0; i < 9; ++i)
    for (Index j = 0; j < 9; ++j) {
      if (m(0, 0, i, j) != 0.0) continue;
      bool covered = false;
      for (Index ci = i - 1; ci <= i + 1 && !covered; ++ci)
        for (Index cj = j - 1; cj <= j + 1 && !covered; ++cj) {
          bool all = true;
          for (Index a = std::max<Index>(0, ci - 1); a <= std::min<Index>(8, ci + 1); ++a)
            for (Index b = std::max<Index>(0, cj - 1); b <= std::min<Index>(8, cj + 1); ++b)
              all = all && m(0, 0, a, b) == 0.0;
          covered = all;
        }
      EXPECT_TRUE(covered) << i << "," << j;
    }
}

TEST(DropBlock, RejectsBadBlockSizes) {
  Rng rng(26);
  EXPECT_THROW(dropblock_mask<double>({1, 1, 8, 8}, 2, 0.1, rng), ConfigError);
  EXPECT_THROW(dropblock_mask<double>({1, 1, 4, 4}, 5, 0.1, rng), ConfigError);
  EXPECT_EQ(fitted_block_size(7, 4, 4), 3);
  EXPECT_EQ(fitted_block_size(3, 1, 1), 1);
}

TEST(Kernels, DeterministicAcrossCalls) {
  Rng rng(27);
  auto x = randn({2, 4, 6, 6}, rng);
  auto w = randn({4, 4, 3, 3}, rng);
  const auto a = conv2d(x, w, nullptr, {Pair{1}, Pair{1}, 1});
  const auto b = conv2d(x, w, nullptr, {Pair{1}, Pair{1}, 1});
  EXPECT_EQ(a.vec(), b.vec());
  Rng r1(9, 3), r2(9, 3);
  EXPECT_EQ(dropout(x, 0.3, r1, Mode::train).mask.vec(), dropout(x, 0.3, r2, Mode::train).mask.vec());
}

TEST(GradCheck, LinearFunctionIsExactToRounding) {
  Parameter<double> p("p", Tensor<double>({3}, {1.0, -2.0, 0.5}), false);
  const Tensor<double> c({3}, {3.0, 4.0, -5.0});
  auto loss = [&] { return project(p.value, c); };
  auto analytic = [&] { p.grad = c; };
  const auto r = grad_check<double>(loss, analytic, {&p});
  EXPECT_TRUE(r.passed());
  EXPECT_LT(r.max_rel_error(), 1e-9);
}
