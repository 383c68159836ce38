#include "stylefed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "stylefed/errors.hpp"

namespace stylefed {

ConfusionMatrix confusion_matrix(std::span<const std::size_t> labels, std::span<const std::size_t> predictions,
                                 std::size_t classes) {
  if (labels.size() != predictions.size()) throw ShapeError("confusion_matrix: label/prediction count mismatch");
  ConfusionMatrix m(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predictions[i] >= classes) throw ShapeError("confusion_matrix: class out of range");
    ++m[labels[i]][predictions[i]];
  }
  return m;
}

double accuracy(const ConfusionMatrix& confusion) {
  std::size_t total = 0, hit = 0;
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    hit += confusion[i][i];
    total += std::accumulate(confusion[i].begin(), confusion[i].end(), std::size_t{0});
  }
  if (total == 0) throw DomainError("accuracy of zero samples");
  return static_cast<double>(hit) / static_cast<double>(total);
}

double macro_f1(const ConfusionMatrix& confusion) {
  const std::size_t c = confusion.size();
  if (c == 0) throw DomainError("macro_f1 with zero classes");
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t support = 0, predicted = 0;
    for (std::size_t j = 0; j < c; ++j) {
      support += confusion[k][j];
      predicted += confusion[j][k];
    }
    const double tp = static_cast<double>(confusion[k][k]);
    const double precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
    const double recall = support ? tp / static_cast<double>(support) : 0.0;
    if (precision + recall > 0.0) total += 2.0 * precision * recall / (precision + recall);
  }
  return total / static_cast<double>(c);
}

double brier(const Tensor& probabilities, std::span<const std::size_t> labels) {
  if (probabilities.rows() != labels.size()) throw ShapeError("brier: row/label count mismatch");
  if (labels.empty()) throw DomainError("brier of zero samples");
  const std::size_t c = probabilities.cols();
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto row = probabilities.row_span(n);
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    if (std::fabs(s - 1.0) > 1e-6) {
      throw DomainError("brier: probability row " + std::to_string(n) + " sums to " + std::to_string(s));
    }
    if (labels[n] >= c) throw ShapeError("brier: label out of range");
    for (std::size_t k = 0; k < c; ++k) {
      const double t = row[k] - (labels[n] == k ? 1.0 : 0.0);
      total += t * t;
    }
  }
  return total / static_cast<double>(labels.size());
}

EvalResult evaluate_probabilities(const Tensor& probabilities, std::span<const std::size_t> labels) {
  const std::size_t c = probabilities.cols();
  std::vector<std::size_t> pred(labels.size());
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto row = probabilities.row_span(n);
    pred[n] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  EvalResult r;
  r.confusion = confusion_matrix(labels, pred, c);
  r.n = labels.size();
  r.accuracy = accuracy(r.confusion);
  r.macro_f1 = macro_f1(r.confusion);
  r.brier = brier(probabilities, labels);
  return r;
}

namespace {

// Average ranks (1-based) of |d|; ties share the mean rank.
std::vector<double> average_ranks(const std::vector<double>& magnitude) {
  const std::size_t n = magnitude.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return magnitude[i] < magnitude[j]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && magnitude[order[j + 1]] == magnitude[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("wilcoxon_signed_rank: samples must be paired");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw DomainError("wilcoxon_signed_rank: non-finite difference");
    if (d != 0.0) diff.push_back(d);
  }
  const std::size_t n = diff.size();
  if (n == 0) return 1.0;

  std::vector<double> magnitude(n);
  for (std::size_t i = 0; i < n; ++i) magnitude[i] = std::fabs(diff[i]);
  const std::vector<double> rank = average_ranks(magnitude);

  if (n <= kWilcoxonExactLimit) {
    // Doubled ranks are integers; count sign assignments per doubled W+.
    std::vector<std::size_t> r2(n);
    std::size_t total = 0, observed = 0;
    for (std::size_t i = 0; i < n; ++i) {
      r2[i] = static_cast<std::size_t>(std::lround(2.0 * rank[i]));
      total += r2[i];
      if (diff[i] > 0) observed += r2[i];
    }
    std::vector<double> ways(total + 1, 0.0);
    ways[0] = 1.0;
    for (std::size_t r : r2)
      for (std::size_t s = total; s >= r; --s) ways[s] += ways[s - r];
    const double all = std::ldexp(1.0, static_cast<int>(n));
    double lower = 0.0, upper = 0.0;
    for (std::size_t s = 0; s <= total; ++s) {
      if (s <= observed) lower += ways[s];
      if (s >= observed) upper += ways[s];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
  }

  double w_plus = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (diff[i] > 0) w_plus += rank[i];
  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  double variance = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
  std::vector<double> sorted(magnitude);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    variance -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  if (variance <= 0.0) return 1.0;
  const double z = std::max(0.0, std::fabs(w_plus - mean) - 0.5) / std::sqrt(variance);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace stylefed
