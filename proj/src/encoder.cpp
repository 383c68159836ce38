#include "stylefed/encoder.hpp"

#include <cmath>

#include "stylefed/errors.hpp"
#include "stylefed/ops.hpp"

namespace stylefed {

Mlp::Mlp(const std::vector<std::size_t>& dims, Activation activation, Rng& rng, bool zero_last)
    : activation_(activation) {
  if (dims.size() < 2) throw ConfigError("an MLP needs at least input and output dims");
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l], out = dims[l + 1];
    if (in == 0 || out == 0) throw ConfigError("MLP layer widths must be positive");
    Tensor w = Tensor::zeros(in, out);
    std::normal_distribution<double> init(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    for (double& v : w.data()) v = init(rng);
    layers_.push_back({DifferentiableParam(std::move(w)), DifferentiableParam(Tensor::zeros(1, out))});
  }
  if (zero_last) zero_last_layer();
}

Var Mlp::forward(const Var& x) const {
  if (x.cols() != in_dim()) {
    throw ShapeError("MLP input has " + std::to_string(x.cols()) + " features, expected " + std::to_string(in_dim()));
  }
  Var h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = ops::add_row(ops::matmul(h, layers_[l].weight.var()), layers_[l].bias.var());
    if (l + 1 < layers_.size()) h = activation_ == Activation::kTanh ? ops::tanh(h) : ops::gelu(h);
  }
  return h;
}

ParamRefs Mlp::params() {
  ParamRefs out;
  for (auto& layer : layers_) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
  return out;
}

std::size_t Mlp::in_dim() const { return layers_.empty() ? 0 : layers_.front().weight.value().rows(); }
std::size_t Mlp::out_dim() const { return layers_.empty() ? 0 : layers_.back().weight.value().cols(); }

void Mlp::zero_last_layer() {
  if (layers_.empty()) return;
  layers_.back().weight.mutable_value().fill(0.0);
  layers_.back().bias.mutable_value().fill(0.0);
}

EncoderParams make_encoder(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t feature_dim,
                           Rng& rng) {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(feature_dim);
  return Mlp(dims, Activation::kTanh, rng);
}

Var encode(const EncoderParams& params, const Var& x) { return params.forward(x); }

ParamRefs FiLMParams::params() {
  ParamRefs out = gamma_net.params();
  const ParamRefs b = beta_net.params();
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

FiLMParams make_film(std::size_t feature_dim, Rng& rng) {
  const std::vector<std::size_t> dims{feature_dim, feature_dim, feature_dim};
  FiLMParams film;
  film.gamma_net = Mlp(dims, Activation::kTanh, rng, /*zero_last=*/true);
  film.beta_net = Mlp(dims, Activation::kTanh, rng, /*zero_last=*/true);
  return film;
}

Var film_modulate(const FiLMParams& film, const Var& h, const Var& s) {
  if (h.rows() != s.rows() || h.cols() != s.cols()) {
    throw ShapeError("film_modulate: features " + h.value().shape_string() + " vs style " + s.value().shape_string());
  }
  const Var gamma = film.gamma_net.forward(s);
  const Var beta = film.beta_net.forward(s);
  return ops::add(ops::mul(h, ops::add_scalar(gamma, 1.0)), beta);
}

}  // namespace stylefed
