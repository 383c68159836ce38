#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "stylefed/data.hpp"
#include "stylefed/encoder.hpp"
#include "stylefed/metrics.hpp"
#include "stylefed/ops.hpp"

namespace stylefed {

/// Server broadcast: one prototype row per class plus which rows are known.
struct GlobalPrototypes {
  Tensor values;            // C x d
  std::vector<bool> known;  // false until a class has been aggregated once

  static GlobalPrototypes zeros(std::size_t classes, std::size_t dim);
  std::size_t classes() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
  std::size_t known_count() const;
  /// Bytes of one broadcast: 8*d per known class plus a C-bit mask.
  std::size_t byte_size() const;
};

/// What a client sends after local training: per-class shared means and
/// counts for the classes it holds. Personal parameters and style vectors
/// never leave the client.
struct ClientUpload {
  std::size_t client_id = 0;
  std::size_t class_count = 0;
  std::vector<std::size_t> classes;  // sorted, present classes only
  Tensor means;                      // |classes| x d
  std::vector<std::uint32_t> counts;

  std::vector<bool> mask() const;
  std::size_t dim() const { return means.cols(); }
  /// 8*d + 4 bytes per included class plus ceil(C/8) bytes of presence mask.
  std::size_t byte_size() const;
  /// Mask bytes, then per present class a u32 count and d f64 values.
  std::vector<std::uint8_t> serialize() const;
  static ClientUpload deserialize(std::span<const std::uint8_t> bytes, std::size_t client_id, std::size_t classes,
                                  std::size_t dim);
};

struct Decomposition {
  std::vector<double> content;
  std::vector<double> style;  // unit norm, or zero when the residual is below 1e-6 * |u|
  double coefficient = 0.0;   // content == coefficient * p exactly
};

/// Splits `u` into the component along `p_global` and a normalized
/// orthogonal style direction.
Decomposition decompose(std::span<const double> u, std::span<const double> p_global, double eps = ops::kDefaultEps);

/// Graph form of the style direction, row by row: u is trainable, the
/// reference prototypes are constants.
Var style_graph(const Var& u, const Tensor& reference, double eps = ops::kDefaultEps);

/// p_personal = u + alpha (p - u), alpha = sigmoid(G([p, u, |p - u|, p * u])), row by row.
Var gated_prototypes(const Mlp& gate, const Var& p, const Var& u);

struct ClientHyperparams {
  double lambda_pull = 0.7;
  double lambda_shared = 1.0;
  double lr = 0.005;
  std::size_t batch_size = 0;  // 0 = whole shard per step
  double eps = ops::kDefaultEps;
  /// false: FiLM is bypassed (identity) and not trained.
  bool use_film = true;
  /// false: gate forced to alpha = 1, personalized prototypes == global.
  bool use_gate = true;
};

struct ModelShape {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t feature_dim = 32;
  std::size_t classes = 8;
};

struct LossTerms {
  Var total;
  Var ce;
  Var pull;
  Var shared;
};

struct LossValues {
  double total = 0.0;
  double ce = 0.0;
  double pull = 0.0;
  double shared = 0.0;
};

struct LocalUpdateResult {
  std::optional<ClientUpload> upload;  // empty when the shard was empty
  LossValues first;                    // before the first step
  LossValues last;                     // before the last step
  std::size_t steps = 0;
};

struct ClientEval {
  EvalResult metrics;
  Tensor probabilities;           // n x C
  Tensor personalized_features;   // n x d, FiLM conditioned on the true label
};

struct GateResult {
  double alpha = 0.0;
  std::vector<double> personal;
};

class ClientState {
 public:
  ClientState(std::size_t id, Dataset train, Dataset test, const ModelShape& shape, const ClientHyperparams& hyper,
              Rng& init_rng);

  std::size_t id() const { return id_; }
  const Dataset& train() const { return train_; }
  const Dataset& test() const { return test_; }
  const ClientHyperparams& hyper() const { return hyper_; }
  ClientHyperparams& hyper() { return hyper_; }
  const std::vector<std::size_t>& present_classes() const { return present_; }

  EncoderParams& encoder() { return encoder_; }
  FiLMParams& film() { return film_; }
  Mlp& gate() { return gate_; }
  /// u: one row per present class, in present_classes() order.
  DifferentiableParam& personal() { return personal_; }
  const DifferentiableParam& personal() const { return personal_; }

  /// All parameters updated by local_update under the current hyperparams.
  ParamRefs trainable_params();

  /// m_{k,c}: mean encoder feature per present class of `data`.
  ClientUpload compute_shared_means(const Dataset& data) const;
  ClientUpload compute_shared_means() const { return compute_shared_means(train_); }

  /// Prototype each class is aligned against: the global one when known,
  /// otherwise (present classes only) the given fallback mean.
  Tensor reference_prototypes(const GlobalPrototypes& globals, const ClientUpload& fallback) const;

  /// Per-present-class style vectors against the reference prototypes.
  Tensor style_vectors(const Tensor& reference) const;

  /// Builds L_CE + lambda_pull L_pull + lambda_shared L_shared on `batch`.
  LossTerms client_loss(const Dataset& batch, const GlobalPrototypes& globals, const ClientUpload& fallback) const;

  LocalUpdateResult local_update(const GlobalPrototypes& globals, std::size_t epochs, Rng& rng);

  /// Gate value and personalized prototype for one class.
  GateResult reconstruct_personal(std::span<const double> p_global, std::span<const double> u) const;

  ClientEval evaluate(const Dataset& data, const GlobalPrototypes& globals) const;
  ClientEval evaluate(const GlobalPrototypes& globals) const { return evaluate(test_, globals); }

 private:
  struct Classifier;
  Classifier build_classifier(const GlobalPrototypes& globals, const ClientUpload& fallback) const;

  std::size_t id_;
  Dataset train_;
  Dataset test_;
  ModelShape shape_;
  ClientHyperparams hyper_;
  std::vector<std::size_t> present_;
  std::vector<std::size_t> present_slot_;  // class -> row in personal_, or npos
  EncoderParams encoder_;
  FiLMParams film_;
  Mlp gate_;
  DifferentiableParam personal_;
};

}  // namespace stylefed
