#pragma once

#include <functional>
#include <span>
#include <vector>

#include "stylefed/autograd.hpp"
#include "stylefed/rng.hpp"
#include "stylefed/ops.hpp"
#include "stylefed/tensor.hpp"

namespace stylefed {

// Value-level entry points for the exported primitives. Each one is the
// forward pass of the matching `ops::` function.

/// Negative squared Euclidean distance from `h` (1 x d) to each row of
/// `prototypes` (C x d); returns 1 x C.
Tensor proto_logits(const Tensor& h, const Tensor& prototypes);

/// softmax(scores / scale) over a non-empty score vector.
std::vector<double> softmax_scaled(std::span<const double> scores, double scale);

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
                               double eps = ops::kDefaultEps);

double cosine_sim(std::span<const double> a, std::span<const double> b, double eps = ops::kDefaultEps);

/// Central-difference gradient check.
///
/// `loss` must rebuild its graph from the current parameter values on every
/// call. Returns max |analytic - numeric| / max(1, |numeric|) over every
/// entry of every trainable parameter. Throws NumericError if the loss is
/// ever non-finite and DomainError for a step outside [1e-6, 1e-3].
double grad_check(const std::function<Var()>& loss, const ParamRefs& params, double step = 1e-5);

/// Same error measure on `entries` coordinates drawn without replacement
/// from all trainable entries (all of them when there are fewer).
double grad_check_sampled(const std::function<Var()>& loss, const ParamRefs& params, std::size_t entries, Rng& rng,
                          double step = 1e-5);

}  // namespace stylefed
