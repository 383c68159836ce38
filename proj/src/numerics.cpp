#include "stylefed/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "stylefed/errors.hpp"

namespace stylefed {

Tensor proto_logits(const Tensor& h, const Tensor& prototypes) {
  return ops::proto_logits(ops::constant(h), ops::constant(prototypes)).value();
}

std::vector<double> softmax_scaled(std::span<const double> scores, double scale) {
  if (scores.empty()) throw DomainError("softmax_scaled: empty score vector");
  if (!(scale > 0)) throw DomainError("softmax_scaled: scale must be positive");
  const Var w = ops::softmax_rows(ops::scale(ops::constant(Tensor::row(scores)), 1.0 / scale));
  return w.value().row_vector(0);
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
                               double eps) {
  const Var y = ops::layer_norm(ops::constant(Tensor::row(x)), ops::constant(Tensor::row(gain)),
                                ops::constant(Tensor::row(bias)), eps);
  return y.value().row_vector(0);
}

double cosine_sim(std::span<const double> a, std::span<const double> b, double eps) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: dimension mismatch");
  return ops::cosine_rows(ops::constant(Tensor::row(a)), ops::constant(Tensor::row(b)), eps).scalar();
}

namespace {

using Coord = std::pair<DifferentiableParam*, std::size_t>;

double check_coords(const std::function<Var()>& loss, const ParamRefs& params, const std::vector<Coord>& coords,
                    double step) {
  if (!(step >= 1e-6 && step <= 1e-3)) throw DomainError("grad_check: step must lie in [1e-6, 1e-3]");
  auto eval = [&] {
    const double v = loss().scalar();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  zero_grad(params);
  const Var root = loss();
  if (!std::isfinite(root.scalar())) throw NumericError("grad_check: non-finite loss");
  backward(root);

  double worst = 0.0;
  for (const auto& [p, i] : coords) {
    const double analytic = p->grad()[i];
    double& slot = p->mutable_value()[i];
    const double saved = slot;
    slot = saved + step;
    const double up = eval();
    slot = saved - step;
    const double down = eval();
    slot = saved;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric)));
  }
  return worst;
}

std::vector<Coord> all_coords(const ParamRefs& params) {
  std::vector<Coord> out;
  for (auto* p : params) {
    if (!p->trainable()) continue;
    for (std::size_t i = 0; i < p->value().size(); ++i) out.emplace_back(p, i);
  }
  return out;
}

}  // namespace

double grad_check(const std::function<Var()>& loss, const ParamRefs& params, double step) {
  return check_coords(loss, params, all_coords(params), step);
}

double grad_check_sampled(const std::function<Var()>& loss, const ParamRefs& params, std::size_t entries, Rng& rng,
                          double step) {
  std::vector<Coord> coords = all_coords(params);
  if (coords.size() > entries) {
    // Partial Fisher-Yates: the first `entries` slots become the sample.
    for (std::size_t i = 0; i < entries; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, coords.size() - 1);
      std::swap(coords[i], coords[pick(rng)]);
    }
    coords.resize(entries);
  }
  return check_coords(loss, params, coords, step);
}

}  // namespace stylefed
