#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "stylefed/errors.hpp"
#include "stylefed/metrics.hpp"

using namespace stylefed;

TEST(Confusion, CountsAndAccuracy) {
  const std::vector<std::size_t> y{0, 0, 1, 2}, p{0, 1, 1, 1};
  const ConfusionMatrix m = confusion_matrix(y, p, 3);
  EXPECT_EQ(m[0][0], 1u);
  EXPECT_EQ(m[0][1], 1u);
  EXPECT_EQ(m[2][1], 1u);
  EXPECT_DOUBLE_EQ(accuracy(m), 0.5);
}

TEST(MacroF1, HandCases) {
  const std::vector<std::size_t> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(macro_f1(confusion_matrix(y, y, 2)), 1.0);
  const std::vector<std::size_t> all0{0, 0, 0, 0};
  EXPECT_NEAR(macro_f1(confusion_matrix(y, all0, 2)), 1.0 / 3.0, 1e-15);
  // A class absent from both labels and predictions still counts in the mean.
  EXPECT_NEAR(macro_f1(confusion_matrix(y, y, 4)), 0.5, 1e-15);
  // Precision 1/2, recall 1 for class 1; class 0 precision 1, recall 1/2.
  const std::vector<std::size_t> p{0, 1, 1, 1};
  EXPECT_NEAR(macro_f1(confusion_matrix(y, p, 2)), (2.0 / 3.0 + 0.8) / 2.0, 1e-15);
}

TEST(Brier, HandCases) {
  const std::vector<std::size_t> y{0, 1};
  EXPECT_DOUBLE_EQ(brier(Tensor::from_rows({{1, 0}, {0, 1}}), y), 0.0);
  EXPECT_DOUBLE_EQ(brier(Tensor::from_rows({{0, 1}, {1, 0}}), y), 2.0);
  EXPECT_DOUBLE_EQ(brier(Tensor::from_rows({{0.5, 0.5}, {0.5, 0.5}}), y), 0.5);
  EXPECT_THROW(brier(Tensor::from_rows({{0.5, 0.6}, {0.5, 0.5}}), y), DomainError);
}

TEST(Evaluate, ArgmaxLowestOnTies) {
  const Tensor probs = Tensor::from_rows({{0.5, 0.5}, {0.2, 0.8}});
  const EvalResult r = evaluate_probabilities(probs, std::vector<std::size_t>{0, 1});
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.n, 2u);
}

TEST(Wilcoxon, AllPositiveSix) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b(6, 0.0);
  EXPECT_NEAR(wilcoxon_signed_rank(a, b), 0.03125, 1e-15);
}

TEST(Wilcoxon, IdenticalAndSymmetric) {
  const std::vector<double> a{0.3, 0.1, 0.7, 0.2}, b{0.1, 0.4, 0.2, 0.25};
  EXPECT_EQ(wilcoxon_signed_rank(a, a), 1.0);
  EXPECT_DOUBLE_EQ(wilcoxon_signed_rank(a, b), wilcoxon_signed_rank(b, a));
  EXPECT_THROW(wilcoxon_signed_rank(a, std::vector<double>{1.0}), ShapeError);
}

TEST(Wilcoxon, ExactMatchesEnumeration) {
  Rng rng(51);
  std::uniform_int_distribution<int> len(1, 12), level(-3, 3);
  std::normal_distribution<double> n01;
  for (int t = 0; t < 300; ++t) {
    const int n = len(rng);
    std::vector<double> a(n), b(n);
    const bool coarse = t % 2 == 0;
    for (int i = 0; i < n; ++i) {
      a[i] = coarse ? level(rng) : n01(rng);
      b[i] = coarse ? level(rng) : n01(rng);
    }
    EXPECT_NEAR(wilcoxon_signed_rank(a, b), oracle::wilcoxon_enumerate(a, b), 1e-12);
  }
}

TEST(Wilcoxon, LargeSampleNormalApproximation) {
  // n = 40 clear shift: tiny p; n = 40 symmetric noise: not significant.
  Rng rng(52);
  std::normal_distribution<double> n01;
  std::vector<double> a(40), b(40), c(40);
  for (int i = 0; i < 40; ++i) {
    b[i] = n01(rng);
    a[i] = b[i] + 1.0 + 0.1 * n01(rng);
    c[i] = b[i] + (i % 2 ? 0.5 : -0.5) * (1 + i);
  }
  EXPECT_LT(wilcoxon_signed_rank(a, b), 1e-6);
  EXPECT_GT(wilcoxon_signed_rank(c, b), 0.5);
}
