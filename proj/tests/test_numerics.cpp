#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "grad_blocks.hpp"
#include "stylefed/errors.hpp"
#include "stylefed/numerics.hpp"

using namespace stylefed;

TEST(ProtoLogits, NegativeSquaredDistance) {
  const Tensor p = Tensor::from_rows({{1.0, 2.0}, {0.0, 1.0}});
  const Tensor at_p = proto_logits(Tensor::row({1.0, 2.0}), p);
  EXPECT_DOUBLE_EQ(at_p(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(at_p(0, 1), -2.0);
  const Tensor at_zero = proto_logits(Tensor::row({0.0, 0.0}), p);
  EXPECT_DOUBLE_EQ(at_zero(0, 0), -5.0);
  EXPECT_DOUBLE_EQ(at_zero(0, 1), -1.0);
  const Tensor e = proto_logits(Tensor::row({1.0, 0.0}), Tensor::row({0.0, 1.0}));
  EXPECT_DOUBLE_EQ(e(0, 0), -2.0);
}

TEST(ProtoLogits, ShapeMismatchThrows) {
  EXPECT_THROW(proto_logits(Tensor::row({1.0, 2.0, 3.0}), Tensor::zeros(2, 2)), ShapeError);
}

TEST(SoftmaxScaled, Examples) {
  const auto eq = softmax_scaled(std::vector<double>{3.0, 3.0, 3.0, 3.0}, 1.0);
  for (double v : eq) EXPECT_DOUBLE_EQ(v, 0.25);
  const auto big = softmax_scaled(std::vector<double>{1e6, 0.0}, 1.0);
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
  const auto l2 = softmax_scaled(std::vector<double>{std::log(2.0), 0.0}, 1.0);
  EXPECT_NEAR(l2[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(l2[1], 1.0 / 3.0, 1e-15);
  // Scale divides the scores.
  const auto sc = softmax_scaled(std::vector<double>{2.0 * std::log(2.0), 0.0}, 2.0);
  EXPECT_NEAR(sc[0], 2.0 / 3.0, 1e-15);
}

TEST(SoftmaxScaled, EmptyThrows) { EXPECT_THROW(softmax_scaled(std::vector<double>{}, 1.0), DomainError); }

TEST(SoftmaxScaled, ShiftInvariantAndNormalized) {
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> s(1 + t % 9);
    for (double& v : s) v = n(rng);
    const double shift = n(rng) * 100.0;
    std::vector<double> shifted = s;
    for (double& v : shifted) v += shift;
    const auto a = softmax_scaled(s, 1.3), b = softmax_scaled(shifted, 1.3);
    double total = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      EXPECT_GE(a[i], 0.0);
      total += a[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(LayerNorm, Examples) {
  const std::vector<double> g{1.0, 1.0}, b{0.0, 0.0};
  const auto c = layer_norm(std::vector<double>{4.0, 4.0}, g, b);
  EXPECT_DOUBLE_EQ(c[0], 0.0);
  EXPECT_DOUBLE_EQ(c[1], 0.0);
  const auto pm = layer_norm(std::vector<double>{1.0, -1.0}, g, b);
  EXPECT_NEAR(pm[0], 1.0, 1e-8);
  EXPECT_NEAR(pm[1], -1.0, 1e-8);
  const auto bias_only = layer_norm(std::vector<double>{3.0, -7.0}, std::vector<double>{0.0, 0.0},
                                    std::vector<double>{0.5, -0.25});
  EXPECT_DOUBLE_EQ(bias_only[0], 0.5);
  EXPECT_DOUBLE_EQ(bias_only[1], -0.25);
}

TEST(LayerNorm, NeedsTwoEntries) {
  const std::vector<double> one{1.0};
  EXPECT_THROW(layer_norm(one, one, one), DomainError);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Rng rng(2);
  std::normal_distribution<double> n(3.0, 4.0);
  std::vector<double> x(16), g(16, 1.0), b(16, 0.0);
  for (double& v : x) v = n(rng);
  const auto y = layer_norm(x, g, b);
  double mu = 0, var = 0;
  for (double v : y) mu += v;
  mu /= 16;
  for (double v : y) var += (v - mu) * (v - mu);
  EXPECT_NEAR(mu, 0.0, 1e-12);
  EXPECT_NEAR(var / 16, 1.0, 1e-6);
}

TEST(Cosine, Examples) {
  EXPECT_NEAR(cosine_sim(std::vector<double>{1, 1}, std::vector<double>{1, 0}), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 3}), 0.0);
  const std::vector<double> a{0.3, -2.0, 5.0};
  EXPECT_NEAR(cosine_sim(a, a), 1.0, 1e-15);
  // Zero vector: eps-guarded, no NaN.
  EXPECT_EQ(cosine_sim(std::vector<double>{0, 0}, std::vector<double>{1, 0}), 0.0);
}

TEST(GradCheck, Quadratic) {
  DifferentiableParam x(Tensor::row({3.0}));
  const double err = grad_check([&] { return ops::mul(x.var(), x.var()); }, {&x});
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, StepOutOfRange) {
  DifferentiableParam x(Tensor::row({1.0}));
  auto f = [&] { return ops::mul(x.var(), x.var()); };
  EXPECT_THROW(grad_check(f, {&x}, 1e-7), DomainError);
  EXPECT_THROW(grad_check(f, {&x}, 1e-2), DomainError);
}

TEST(GradCheck, NonFiniteLoss) {
  DifferentiableParam x(Tensor::row({1.0}));
  auto f = [&] { return ops::scale(x.var(), std::numeric_limits<double>::infinity()); };
  EXPECT_THROW(grad_check(f, {&x}), NumericError);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A constant-wrapped branch hides part of the dependence from autograd.
  DifferentiableParam x(Tensor::row({2.0}));
  auto f = [&] { return ops::mul(x.var(), ops::constant(x.value())); };
  EXPECT_GT(grad_check(f, {&x}), 0.1);
}

TEST(GradCheck, SampledMatchesFullOnSmallProblem) {
  Rng rng(3);
  DifferentiableParam w(gradblocks::randn(3, 2, rng));
  auto f = [&] { return ops::sum(ops::tanh(ops::matmul(w.var(), ops::transpose(w.var())))); };
  EXPECT_NEAR(grad_check_sampled(f, {&w}, 100, rng), grad_check(f, {&w}), 1e-15);
}

// Property: each primitive's backward agrees with central differences on
// random shapes and inputs.
TEST(GradCheck, RandomizedPrimitives) {
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> dim(2, 5);
  double worst = 0.0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t n = dim(rng), m = dim(rng);
    DifferentiableParam a(gradblocks::randn(n, m, rng));
    DifferentiableParam b(gradblocks::randn(n, m, rng));
    DifferentiableParam p(gradblocks::randn(3, m, rng));
    DifferentiableParam g(gradblocks::randn(1, m, rng));
    DifferentiableParam bias(gradblocks::randn(1, m, rng));
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % 3;
    const Tensor w = gradblocks::randn(n, m, rng);
    const Tensor wc = gradblocks::randn(n, 1, rng);
    auto lin = [&](const Var& v) { return ops::sum(ops::mul(v, ops::constant(w))); };
    auto linc = [&](const Var& v) { return ops::sum(ops::mul(v, ops::constant(wc))); };
    const ParamRefs ab{&a, &b};
    worst = std::max(worst, grad_check([&] { return lin(ops::gelu(a.var())); }, ab));
    worst = std::max(worst, grad_check([&] { return lin(ops::sigmoid(ops::mul(a.var(), b.var()))); }, ab));
    worst = std::max(worst, grad_check([&] { return lin(ops::softmax_rows(a.var())); }, ab));
    worst = std::max(worst, grad_check([&] { return lin(ops::layer_norm(a.var(), g.var(), bias.var())); },
                                       {&a, &g, &bias}));
    worst = std::max(worst, grad_check([&] { return linc(ops::cosine_rows(a.var(), b.var())); }, ab));
    worst = std::max(worst, grad_check([&] { return linc(ops::row_norm(a.var())); }, ab));
    worst = std::max(worst, grad_check([&] { return ops::cross_entropy(ops::proto_logits(a.var(), p.var()), labels); },
                                       {&a, &p}));
    auto bilinear = [&] {
      return ops::sum(ops::tanh(ops::matmul(ops::mul_row(a.var(), g.var()), ops::transpose(ops::add_row(b.var(), bias.var())))));
    };
    worst = std::max(worst, grad_check(bilinear, {&a, &b, &g, &bias}));
  }
  EXPECT_LT(worst, 1e-6);
}
