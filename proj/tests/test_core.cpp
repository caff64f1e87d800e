#include <gtest/gtest.h>

#include <random>

#include "mdsnn/autodiff.hpp"
#include "mdsnn/ops.hpp"
#include "mdsnn/quantization.hpp"
#include "mdsnn/surrogate.hpp"
#include "support.hpp"

using namespace mdsnn;
using test::gradient_error;
using test::random_tensor;
using V = Var<double>;
using T = Tensor<double>;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(T(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(T(Shape{0, 2}), ShapeError);
}

TEST(Tensor, CastRoundTrip) {
  const T x = T::vector({0.5, -1.25, 3});
  EXPECT_EQ(x.cast<float>().cast<double>(), x);
}

TEST(Tape, IdentityGraph) {
  Tape<double> tape;
  V x = tape.leaf(T::vector({1, 2, 3}));
  const std::size_t before = tape.size();
  V y = identity(x);
  EXPECT_EQ(y.value(), T::vector({1, 2, 3}));
  EXPECT_EQ(tape.size() - before, 1u);
}

TEST(Tape, MatmulIdentity) {
  Tape<double> tape;
  V a = tape.leaf(T(Shape{2, 2}, {1, 0, 0, 1}));
  V b = tape.leaf(T(Shape{2, 1}, {5, 7}));
  EXPECT_EQ(matmul(a, b).value(), T(Shape{2, 1}, {5, 7}));
}

TEST(Tape, ReluOfLinear) {
  Tape<double> tape;
  V w = tape.leaf(T(Shape{1, 2}, {1, -1}));
  V x = tape.leaf(T(Shape{2, 1}, {2, 3}));
  EXPECT_EQ(relu(matmul(w, x)).value()[0], 0.0);
}

TEST(Tape, ScaleGradient) {
  Tape<double> tape;
  V x = tape.leaf(T::scalar(2), true);
  tape.backward(scale(x, 3.0));
  EXPECT_EQ(tape.grad(x)[0], 3.0);
}

TEST(Tape, BackwardBeforeForwardIsUsageError) {
  Tape<double> tape;
  EXPECT_THROW(tape.backward(V{&tape, 0}), UsageError);
}

TEST(Tape, SeedShapeMismatch) {
  Tape<double> tape;
  V x = tape.leaf(T::vector({1, 2}), true);
  V y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y, T::vector({1, 2, 3})), ShapeError);
}

TEST(Tape, NonFiniteNamesOp) {
  Tape<double> tape;
  V x = tape.leaf(T::vector({1e308, 1}));
  try {
    scale(x, 10.0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("scale"), std::string::npos);
  }
}

TEST(Tape, ShapeErrorNamesOpAndShapes) {
  Tape<double> tape;
  V a = tape.leaf(T(Shape{2, 3}));
  V b = tape.leaf(T(Shape{3, 2}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3, 2]"), std::string::npos) << msg;
  }
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  Tape<double> tape;
  V x = tape.leaf(T::vector({1.5}), true);
  V y = add(mul(x, x), scale(x, 2.0));  // x^2 + 2x
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 2 * 1.5 + 2);
}

TEST(Tape, DeterministicGradients) {
  std::mt19937_64 rng(3);
  const T w = random_tensor({4, 3, 3, 3}, rng), x = random_tensor({2, 3, 5, 5}, rng);
  auto grads = [&] {
    Tape<double> tape;
    V wv = tape.leaf(w, true);
    V xv = tape.leaf(x, true);
    tape.backward(sum(conv2d(xv, wv, 2, 1)));
    return std::make_pair(tape.grad(wv), tape.grad(xv));
  };
  EXPECT_EQ(grads(), grads());
}

TEST(Tape, ConstantSubgraphRecordsNoBackward) {
  Tape<double> tape;
  V x = tape.constant(T::vector({1, 2}));
  V y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

// --- layer forward examples ------------------------------------------------

TEST(Layers, Conv1x1) {
  Tape<double> tape;
  V x = tape.leaf(T(Shape{1, 1, 1, 1}, {3}));
  V w = tape.leaf(T(Shape{1, 1, 1, 1}, {2}));
  EXPECT_EQ(conv2d(x, w).value()[0], 6.0);
}

TEST(Layers, Linear) {
  Tape<double> tape;
  V x = tape.leaf(T(Shape{1, 2}, {1, 2}));
  V w = tape.leaf(T(Shape{1, 2}, {1, 1}));
  EXPECT_EQ(linear(x, w).value()[0], 3.0);
}

TEST(Layers, ConvMatchesDirectLoops) {
  std::mt19937_64 rng(11);
  const T x = random_tensor({2, 3, 6, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng);
  Tape<double> tape;
  const T y = conv2d(tape.leaf(x), tape.leaf(w), 2, 1).value();
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t oy = 0; oy < 3; ++oy)
        for (std::size_t ox = 0; ox < 3; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(oy * 2 + ky) - 1;
                const long ix = static_cast<long>(ox * 2 + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= 6 || ix >= 5) continue;
                acc += x[((n * 3 + c) * 6 + iy) * 5 + ix] * w[((o * 3 + c) * 3 + ky) * 3 + kx];
              }
          EXPECT_NEAR(y[((n * 4 + o) * 3 + oy) * 3 + ox], acc, 1e-12);
        }
}

TEST(Layers, BatchNormIdentityInEval) {
  Tape<double> tape;
  BatchNormStats<double> stats(2);
  BatchNormOptions opt{false, 0.1, 1e-300};
  const T x(Shape{1, 2, 1, 2}, {0.5, -1, 2, 3});
  V y = batch_norm(tape.leaf(x), tape.leaf(T::vector({1, 1})), tape.leaf(T::vector({0, 0})),
                   stats, opt);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], x[i]);
}

TEST(Layers, BatchNormUpdatesRunningStats) {
  Tape<double> tape;
  BatchNormStats<double> stats(1);
  BatchNormOptions opt{true, 0.5, 1e-5};
  const T x(Shape{4, 1}, {1, 2, 3, 4});
  batch_norm(tape.leaf(x), tape.leaf(T::vector({1})), tape.leaf(T::vector({0})), stats, opt);
  EXPECT_DOUBLE_EQ(stats.mean[0], 0.5 * 2.5);
  EXPECT_DOUBLE_EQ(stats.var[0], 0.5 * 1 + 0.5 * (5.0 / 3.0));  // unbiased batch variance
}

TEST(Layers, BatchNormChannelMismatch) {
  Tape<double> tape;
  BatchNormStats<double> stats(3);
  EXPECT_THROW(batch_norm(tape.leaf(T(Shape{2, 2})), tape.leaf(T::vector({1, 1, 1})),
                          tape.leaf(T::vector({0, 0, 0})), stats, BatchNormOptions{}),
               ShapeError);
}

TEST(Layers, CrossEntropyRejectsBadLabel) {
  Tape<double> tape;
  V z = tape.leaf(T(Shape{1, 3}));
  const std::vector<int> y{3};
  EXPECT_THROW(cross_entropy(z, std::span<const int>(y)), Error);
}

// --- finite differences ----------------------------------------------------

class FiniteDifference : public ::testing::TestWithParam<int> {};

TEST_P(FiniteDifference, SmoothOps) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
  const double tol = 1e-4;
  const T a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const T c = random_tensor({4, 2}, rng);
  const T probe = random_tensor({3, 4}, rng);
  auto dot_probe = [probe](const V& v) {
    return sum(mul(v, v.tape->constant(probe.reshaped(v.shape()))));
  };

  EXPECT_LE(gradient_error({a, b}, [&](auto&, const auto& v) { return dot_probe(add(v[0], v[1])); }), tol);
  EXPECT_LE(gradient_error({a, b}, [&](auto&, const auto& v) { return dot_probe(sub(v[0], v[1])); }), tol);
  EXPECT_LE(gradient_error({a, b}, [&](auto&, const auto& v) { return dot_probe(mul(v[0], v[1])); }), tol);
  EXPECT_LE(gradient_error({a}, [&](auto&, const auto& v) { return dot_probe(scale(v[0], -1.7)); }), tol);
  EXPECT_LE(gradient_error({a}, [&](auto&, const auto& v) { return mean(mul(v[0], v[0])); }), tol);
  EXPECT_LE(gradient_error({a, c}, [&](auto&, const auto& v) {
              return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1])));
            }),
            tol);
  const T w = random_tensor({5, 4}, rng), bias = random_tensor({5}, rng);
  EXPECT_LE(gradient_error({a, w, bias}, [&](auto&, const auto& v) {
              V y = linear(v[0], v[1], &v[2]);
              return sum(mul(y, y));
            }),
            tol);
  const std::vector<int> labels{0, 3, 1};
  EXPECT_LE(gradient_error({a}, [&](auto&, const auto& v) {
              return cross_entropy(v[0], std::span<const int>(labels));
            }),
            tol);
  EXPECT_LE(gradient_error({a, b}, [&](auto&, const auto& v) { return mse(v[0], v[1]); }), tol);
  EXPECT_LE(gradient_error({a}, [&](auto&, const auto& v) {
              return dot_probe(reshape(flatten(v[0]), Shape{3, 4}));
            }),
            tol);
}

TEST_P(FiniteDifference, ConvPoolBatchNorm) {
  std::mt19937_64 rng(100 + static_cast<std::uint64_t>(GetParam()));
  const double tol = 1e-4;
  const std::size_t stride = 1 + static_cast<std::size_t>(GetParam() % 2);
  const T x = random_tensor({2, 2, 5, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng);
  const T gamma = random_tensor({3}, rng, 0.5, 1.5), beta = random_tensor({3}, rng);
  const T probe = random_tensor({2, 3}, rng);
  EXPECT_LE(gradient_error({x, w, gamma, beta}, [&](auto& tape, const auto& v) {
              BatchNormStats<double> stats(3);
              V y = conv2d(v[0], v[1], stride, 1);
              y = batch_norm(y, v[2], v[3], stats, BatchNormOptions{true, 0.1, 1e-5});
              return sum(mul(global_avg_pool(mul(y, y)), tape.constant(probe)));
            }),
            tol);
  BatchNormStats<double> eval_stats(3);
  eval_stats.mean = random_tensor({3}, rng);
  eval_stats.var = random_tensor({3}, rng, 0.5, 2);
  EXPECT_LE(gradient_error({x, w, gamma, beta}, [&](auto& tape, const auto& v) {
              BatchNormStats<double> s = eval_stats;
              V y = batch_norm(conv2d(v[0], v[1], stride, 0), v[2], v[3], s,
                               BatchNormOptions{false, 0.1, 1e-5});
              return sum(mul(global_avg_pool(y), tape.constant(probe)));
            }),
            tol);
}

INSTANTIATE_TEST_SUITE_P(Random, FiniteDifference, ::testing::Range(0, 6));

// --- surrogate / STE ---------------------------------------------------------

TEST(Surrogate, TriangleApexIsOne) {
  SurrogateSpec s(SurrogateKind::kTriangle, 1.0);
  EXPECT_DOUBLE_EQ(s.derivative(1.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(s.derivative(2.5, 1.0), 0.0);
}

TEST(Surrogate, KernelsIntegrateToOneAndVanishOutside) {
  for (auto kind : {SurrogateKind::kTriangle, SurrogateKind::kRectangle}) {
    SurrogateSpec s(kind, 0.7);
    const double vth = 0.5, w = 0.7;
    const int n = 200000;
    double integral = 0;
    for (int i = 0; i < n; ++i) {
      const double u = vth - w + 2 * w * (i + 0.5) / n;
      const double d = s.derivative(u, vth);
      EXPECT_GE(d, 0.0);
      integral += d * 2 * w / n;
    }
    EXPECT_NEAR(integral, 1.0, 1e-6) << to_string(kind);
    EXPECT_EQ(s.derivative(vth + w + 1e-9, vth), 0.0);
    EXPECT_EQ(s.derivative(vth - w - 1e-9, vth), 0.0);
  }
}

TEST(Surrogate, SpikeBackwardUsesKernel) {
  Tape<double> tape;
  V u = tape.leaf(T::vector({0.5, 0.9, 3.0}), true);
  V s = spike(u, 0.5, SurrogateSpec{});
  EXPECT_EQ(s.value(), T::vector({0, 1, 1}));
  tape.backward(s);
  EXPECT_DOUBLE_EQ(tape.grad(u)[0], 1.0);
  EXPECT_DOUBLE_EQ(tape.grad(u)[1], 0.6);
  EXPECT_DOUBLE_EQ(tape.grad(u)[2], 0.0);
}

TEST(Ste, PassesGradientUnchanged) {
  Tape<double> tape;
  V x = tape.leaf(T::vector({0.3}), true);
  tape.backward(ste_quantize(x, QuantSpec(4, QuantKind::kWeightMembrane)));
  EXPECT_EQ(tape.grad(x)[0], 1.0);
}

TEST(Ste, GradientMatchesUnquantizedGraph) {
  std::mt19937_64 rng(5);
  const T x = random_tensor({6}, rng), probe = random_tensor({6}, rng);
  auto grad_with = [&](bool quantize) {
    Tape<double> tape;
    V xv = tape.leaf(x, true);
    V q = quantize ? ste_quantize(xv, QuantSpec(4, QuantKind::kWeightMembrane)) : xv;
    tape.backward(sum(mul(q, tape.constant(probe))));
    return tape.grad(xv);
  };
  EXPECT_EQ(grad_with(true), grad_with(false));
}

TEST(Ste, BatchNormGradientClippedOutsideRange) {
  Tape<double> tape;
  V x = tape.leaf(T::vector({0.2, 5.0, -5.0}), true);
  tape.backward(sum(ste_quantize_bn(x, QuantSpec(8, QuantKind::kBatchNorm))));
  EXPECT_EQ(tape.grad(x), T::vector({1, 0, 0}));
}
