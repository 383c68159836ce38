#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stylefed/client.hpp"
#include "stylefed/data.hpp"
#include "stylefed/server.hpp"

namespace stylefed {

enum class Method { kFull, kAttentionOnly, kUniformAverage };

std::string to_string(Method m);
/// Accepts "full", "ablation_attention_only" and "uniform_average".
Method parse_method(const std::string& name);

/// Synthetic scenario: Gaussian-mixture classes, one affine style per client.
struct DataConfig {
  std::size_t classes = 8;
  std::size_t input_dim = 16;
  std::size_t per_class = 250;
  double separation = 2.0;
  double style_scale_spread = 0.5;
  double style_offset_std = 2.0;
  double style_noise_std = 0.1;
  double test_fraction = 0.2;

  void validate() const;
};

struct FederationConfig {
  std::size_t clients = 20;
  double participation = 0.3;
  std::size_t rounds = 40;
  std::size_t local_epochs = 5;
  double lambda_shared = 1.0;
  double lambda_pull = 0.7;
  double lr = 0.005;
  double alpha = 0.1;
  double noise_var = 0.05;
  std::uint64_t seed = 0;
  Method method = Method::kFull;
  std::size_t feature_dim = 32;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t batch_size = 0;
  std::size_t eval_interval = 5;
  bool shared_init = true;
  std::size_t threads = 1;
  // Aggregator.
  std::size_t heads = 4;
  double server_lr = 1e-3;
  std::size_t server_steps = 10;
  std::size_t max_clients = 0;  // 0 = clients
  // Match the input layer-norm gain to the first round's prototype scale.
  bool calibrate_aggregator = true;
  /// Wall time goes into RoundRecord::wall_ms only when set, so metric
  /// streams stay reproducible by default.
  bool record_wall_time = false;

  void validate() const;
  std::size_t sampled_per_round() const;
};

struct ClientShard {
  Dataset train;
  Dataset test;
};

/// Generate, partition, style-shift and split. Deterministic in the seed.
std::vector<ClientShard> build_scenario(const DataConfig& data, const FederationConfig& fed);

struct ClientMetrics {
  std::size_t client_id = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double brier = 0.0;
  std::size_t n = 0;
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  bool evaluated = false;
  std::vector<std::size_t> participants;
  std::vector<std::size_t> skipped;  // sampled but with an empty shard
  std::vector<ClientMetrics> clients;
  double mean_acc = 0.0, std_acc = 0.0;
  double mean_f1 = 0.0, std_f1 = 0.0;
  double mean_brier = 0.0, std_brier = 0.0;
  // Means over participants of the loss terms at their final local step.
  double loss_ce = 0.0, loss_pull = 0.0, loss_shared = 0.0;
  double loss_server = 0.0;  // aggregator consistency loss after training; 0 for uniform averaging
  bool server_aborted = false;
  std::size_t bytes_up = 0;
  std::size_t bytes_down = 0;
  double wall_ms = 0.0;
};

/// FedProto-style baseline: per class, the plain mean of uploaded prototypes.
AggregationResult uniform_average(const PrototypeTensor& cp);

/// Smallest evaluated round whose mean accuracy reaches threshold * best.
std::size_t convergence_round(const std::vector<RoundRecord>& records, double threshold = 0.95);

/// Federated training simulation: one object owns every client, the
/// aggregator and the broadcast prototypes.
class Federation {
 public:
  Federation(FederationConfig config, std::vector<ClientShard> shards);

  /// Runs one round and returns its record. Throws NumericError (round
  /// index in the message) on a non-finite client loss.
  RoundRecord run_round();
  std::vector<RoundRecord> run();

  std::size_t round() const { return round_; }
  const FederationConfig& config() const { return config_; }
  const GlobalPrototypes& globals() const { return globals_; }
  std::vector<ClientState>& clients() { return clients_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  Aggregator& aggregator() { return aggregator_; }
  const std::vector<ClientUpload>& last_uploads() const { return last_uploads_; }
  const AggregationResult& last_aggregation() const { return last_aggregation_; }
  const PrototypeTensor& last_prototypes() const { return last_cp_; }

  std::vector<ClientEval> evaluate_all() const;
  std::vector<std::size_t> sample_clients(std::size_t round) const;

 private:
  FederationConfig config_;
  std::vector<ClientState> clients_;
  Aggregator aggregator_;
  GlobalPrototypes globals_;
  std::size_t round_ = 0;
  std::vector<ClientUpload> last_uploads_;
  AggregationResult last_aggregation_;
  PrototypeTensor last_cp_;
  bool calibrated_ = false;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results must be
/// written to per-index slots. Rethrows the first exception by index.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace stylefed
