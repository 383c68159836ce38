#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stylefed/tensor.hpp"

namespace stylefed {

/// counts[true][predicted]
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

struct EvalResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double brier = 0.0;
  ConfusionMatrix confusion;
  std::size_t n = 0;
};

ConfusionMatrix confusion_matrix(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                                 std::size_t classes);
double accuracy(const ConfusionMatrix& confusion);
/// Unweighted mean of per-class F1 over all C classes. A class with
/// precision + recall == 0 contributes 0.
double macro_f1(const ConfusionMatrix& confusion);
/// (1/N) sum_n sum_c (p_nc - [y_n == c])^2, in [0, 2]. Rows of
/// `probabilities` must sum to 1 within 1e-6 (DomainError otherwise).
double brier(const Tensor& probabilities, std::span<const std::size_t> labels);

/// Argmax predictions (lowest index on ties) plus all three scores.
EvalResult evaluate_probabilities(const Tensor& probabilities, std::span<const std::size_t> labels);

/// Two-sided paired Wilcoxon signed-rank p-value.
///
/// Zero differences are dropped; tied magnitudes share the average rank.
/// For n <= 20 remaining pairs the p-value comes from the exact null
/// distribution of W+ over all 2^n sign assignments; above that, the normal
/// approximation with tie-corrected variance and continuity correction.
/// Returns 1.0 when every difference is zero.
double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

inline constexpr std::size_t kWilcoxonExactLimit = 20;

}  // namespace stylefed
