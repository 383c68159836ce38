#pragma once

#include <cstddef>
#include <vector>

#include "stylefed/autograd.hpp"
#include "stylefed/rng.hpp"

namespace stylefed {

enum class Activation { kTanh, kGelu };

struct Dense {
  DifferentiableParam weight;  // in x out
  DifferentiableParam bias;    // 1 x out
};

/// Stack of affine layers with `activation` between them (never after the
/// last layer), applied row-wise to an n x in batch.
class Mlp {
 public:
  Mlp() = default;
  /// dims = {in, h1, ..., out}. Weights ~ N(0, 1/fan_in), biases zero.
  /// With `zero_last`, the final layer starts at exactly zero.
  Mlp(const std::vector<std::size_t>& dims, Activation activation, Rng& rng, bool zero_last = false);

  Var forward(const Var& x) const;
  ParamRefs params();

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  const std::vector<Dense>& layers() const { return layers_; }
  std::vector<Dense>& layers() { return layers_; }
  void zero_last_layer();

 private:
  std::vector<Dense> layers_;
  Activation activation_ = Activation::kTanh;
};

/// Per-client base feature encoder h = f(x), d_in -> ... -> d.
using EncoderParams = Mlp;

EncoderParams make_encoder(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t feature_dim,
                           Rng& rng);

/// Batch forward pass: x (n x d_in) -> h (n x d).
Var encode(const EncoderParams& params, const Var& x);

/// FiLM conditioning: two d -> d -> d nets producing gamma(s) and beta(s).
struct FiLMParams {
  Mlp gamma_net;
  Mlp beta_net;

  ParamRefs params();
};

/// Final layers zero-initialized, so the modulation starts as the identity.
FiLMParams make_film(std::size_t feature_dim, Rng& rng);

/// h * (1 + gamma(s)) + beta(s), row-wise for h, s of shape n x d.
Var film_modulate(const FiLMParams& film, const Var& h, const Var& s);

}  // namespace stylefed
