#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stylefed/autograd.hpp"

// Differentiable primitives over rank-2 values. Every function builds one
// graph node with a hand-derived backward rule. Shapes are checked eagerly
// and mismatches throw ShapeError; the only broadcasts are the ones named
// in the function (row vector across rows, column vector across columns).
namespace stylefed::ops {

inline constexpr double kDefaultEps = 1e-8;

Var constant(Tensor t);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a (n x m) + b (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& b);
/// a (n x m) * b (1 x m) broadcast over rows.
Var mul_row(const Var& a, const Var& b);
/// a (n x m) * c (n x 1) broadcast over columns.
Var mul_col(const Var& a, const Var& c);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
/// tanh-approximated GELU.
Var gelu(const Var& a);
/// Subgradient 0 at the kink.
Var abs(const Var& a);
Var reciprocal(const Var& a);
Var clamp_min(const Var& a, double lo);

Var sum(const Var& a);
Var mean(const Var& a);
/// n x m -> n x 1
Var row_sum(const Var& a);
/// Row-wise inner product, n x 1.
Var rowdot(const Var& a, const Var& b);
/// Row-wise Euclidean norm, n x 1. Subgradient 0 for a zero row.
Var row_norm(const Var& a);

Var gather_rows(const Var& a, std::span<const std::size_t> index);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Mean negative log-likelihood of `labels` under row-wise softmax(logits).
Var cross_entropy(const Var& logits, std::span<const std::size_t> labels);

/// l[n,c] = 2 h_n.p_c - |h_n|^2 - |p_c|^2 for h (n x d), p (C x d).
Var proto_logits(const Var& h, const Var& prototypes);
/// l[n,c] = -|h_n * scale_c + shift_c - p_c|^2: distance logits after a
/// per-class feature-wise affine modulation of h. scale, shift, prototypes
/// are all C x d.
Var modulated_proto_logits(const Var& h, const Var& scale, const Var& shift, const Var& prototypes);
/// Row-wise layer norm with gain/bias (1 x d). Needs d >= 2.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kDefaultEps);
/// Row-wise a.b / (max(|a|, eps) * max(|b|, eps)), n x 1.
Var cosine_rows(const Var& a, const Var& b, double eps = kDefaultEps);

}  // namespace stylefed::ops
