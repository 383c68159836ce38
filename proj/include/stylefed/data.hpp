#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "stylefed/rng.hpp"
#include "stylefed/tensor.hpp"

namespace stylefed {

/// Labeled feature matrix. Labels lie in [0, class_count).
struct Dataset {
  Tensor features;  // N x d_in
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
  /// Throws ConfigError when labels/features disagree or a label is >= C.
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& index) const;
  /// Sorted distinct labels present.
  std::vector<std::size_t> present_classes() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Per-client sample assignment.
///
/// `class_shares` is C x K: row c holds the fraction of class c routed to
/// each of the K clients, non-negative and summing to one.
struct PartitionPlan {
  std::vector<std::vector<std::size_t>> assignments;
  Tensor class_shares;

  std::size_t clients() const noexcept { return assignments.size(); }
};

/// Per-client affine style transform x -> scale * x + offset + N(0, noise_std^2).
struct StyleShiftSpec {
  std::vector<double> scale;
  std::vector<double> offset;
  double noise_std = 0.0;
};

Dataset generate_gaussian_mixture(std::size_t classes, std::size_t dim, std::size_t per_class, double separation,
                                  std::uint64_t seed);

PartitionPlan dirichlet_partition(const Dataset& dataset, std::size_t clients, double alpha, double noise_var,
                                  std::uint64_t seed);

/// Draws one style per client: log-scale ~ U(-scale_spread, scale_spread),
/// offset ~ N(0, offset_std^2) per coordinate.
std::vector<StyleShiftSpec> random_style_shifts(std::size_t clients, std::size_t dim, double scale_spread,
                                                double offset_std, double noise_std, std::uint64_t seed);

std::vector<Dataset> apply_style_shift(const Dataset& dataset, const std::vector<StyleShiftSpec>& styles,
                                       const PartitionPlan& plan, std::uint64_t seed);

/// Per-class split; each class with >= 2 samples contributes
/// round(test_fraction * n_c) (at least one) samples to the test side.
std::pair<Dataset, Dataset> stratified_split(const Dataset& dataset, double test_fraction, Rng& rng);

// Binary format, little-endian:
//   "FSDS" | u32 version=1 | u32 N | u32 d_in | u32 C | N*d_in f64 | N u32 labels
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace stylefed
