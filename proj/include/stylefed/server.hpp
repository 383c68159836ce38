#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "stylefed/autograd.hpp"
#include "stylefed/client.hpp"
#include "stylefed/rng.hpp"

namespace stylefed {

/// Round-level stack of shared prototypes, M clients x C classes x d.
///
/// Stored as an (M*C) x d matrix, row k*C + c. Rows whose mask bit is off
/// are exactly zero.
struct PrototypeTensor {
  std::size_t clients = 0;
  std::size_t classes = 0;
  std::size_t dim = 0;
  Tensor values;
  std::vector<bool> mask;                // k*C + c
  std::vector<std::uint32_t> counts;     // k*C + c, 0 where masked
  std::vector<std::size_t> client_ids;   // length M, upload order

  bool present(std::size_t k, std::size_t c) const { return mask[k * classes + c]; }
  std::size_t present_count() const;
  /// Client rows holding class c.
  std::vector<std::size_t> clients_with(std::size_t c) const;
};

/// Throws ProtocolError on a repeated client id, ShapeError on mixed dims.
PrototypeTensor assemble(const std::vector<ClientUpload>& uploads, std::size_t classes);
/// Inverse of assemble.
std::vector<ClientUpload> split(const PrototypeTensor& cp);

/// Per-class weights over the M participating clients; zero where absent.
struct AttentionWeights {
  Tensor weights;                 // M x C
  std::vector<bool> class_present;
};

struct AggregationResult {
  Tensor global;                  // C x d; rows of absent classes are zero
  std::vector<bool> class_present;
  AttentionWeights attention;
  Tensor refined;                 // Z, (M*C) x d, zero where masked
};

struct AggregatorConfig {
  std::size_t dim = 32;
  std::size_t classes = 8;
  std::size_t max_clients = 100;
  std::size_t heads = 4;
  double embedding_std = 0.02;
  // Std of the attention-output and FFN-output projections. Kept small so the
  // layer starts close to LN(p + e) instead of mixing classes at random.
  double residual_std = 0.02;
  double eps = 1e-8;
};

struct AggregatorTrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t accepted_steps = 0;
  bool rejected = false;  // stopped early because a step increased the loss
  bool aborted = false;   // non-finite loss; parameters restored
};

/// Transformer prototype aggregator.
///
/// Tokens are the present (client, class) pairs: X = LN(p + e_client + e_class).
/// One pre-norm encoder layer refines them into Z:
///   Y = X + MHA(LN1(X)),  Z = Y + FFN(LN2(Y)),  FFN = d -> 4d -> d (GELU).
/// Masked pairs are never tokens, so they cannot influence any other token.
/// The class prototype is sum_k alpha_kc Z_kc with alpha_.c the softmax over
/// present clients of Z_kc . e_class_c / sqrt(d).
class Aggregator {
 public:
  Aggregator(const AggregatorConfig& config, Rng& rng);

  const AggregatorConfig& config() const { return config_; }
  AggregationResult aggregate(const PrototypeTensor& cp) const;
  /// Z restricted to present tokens, in row-major (k, c) order.
  Var refine(const PrototypeTensor& cp) const;
  /// Graph for the cosine consistency loss between per-class mean refined
  /// prototypes and every uploaded prototype of that class.
  Var consistency_loss(const PrototypeTensor& cp) const;
  /// SGD on consistency_loss; a step that raises the loss is undone and ends training.
  AggregatorTrainResult train(const PrototypeTensor& cp, std::size_t steps, double lr);

  /// Zero embeddings, no input normalization, and zeroed residual branches
  /// (attention output and FFN output), so Z == CP exactly.
  void make_identity();
  /// Sets the input layer-norm gain to the mean per-token std of p + e over
  /// the present tokens, so X starts on the same scale as client features.
  /// Returns the gain used.
  double calibrate_input_scale(const PrototypeTensor& cp);
  bool input_norm() const { return input_norm_; }
  void set_input_norm(bool on) { input_norm_ = on; }

  ParamRefs params();
  DifferentiableParam& client_embedding() { return client_emb_; }
  const DifferentiableParam& client_embedding() const { return client_emb_; }
  DifferentiableParam& class_embedding() { return class_emb_; }
  const DifferentiableParam& class_embedding() const { return class_emb_; }

  // Layer parameters, exposed for independent re-evaluation in tests.
  struct Layer {
    DifferentiableParam ln0_gain, ln0_bias;
    DifferentiableParam ln1_gain, ln1_bias;
    DifferentiableParam wq, bq, wk, bk, wv, bv, wo, bo;
    DifferentiableParam ln2_gain, ln2_bias;
    DifferentiableParam w1, b1, w2, b2;
  };
  const Layer& layer() const { return layer_; }
  Layer& layer() { return layer_; }

 private:
  struct Tokens {
    std::vector<std::size_t> rows;     // k*C + c of each token
    std::vector<std::size_t> client;   // row k
    std::vector<std::size_t> klass;    // class c
  };
  Tokens tokens(const PrototypeTensor& cp) const;
  Var refine(const PrototypeTensor& cp, const Tokens& t) const;

  AggregatorConfig config_;
  bool input_norm_ = true;
  DifferentiableParam client_emb_;
  DifferentiableParam class_emb_;
  Layer layer_;
};

/// L = (1/P) sum over the P present (k, c) of 1 - cos(mean_k' Z_k'c, CP_kc),
/// with Z given as (M*C) x d. Throws DomainError when nothing is present.
double server_consistency_loss(const Tensor& refined, const PrototypeTensor& cp, double eps = ops::kDefaultEps);

}  // namespace stylefed
