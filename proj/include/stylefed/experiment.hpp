#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stylefed/federation.hpp"

namespace stylefed {

struct OutputConfig {
  std::string dir = "stylefed_out";
  bool attention = false;
  bool embeddings = false;
};

/// Everything one invocation needs. `seed` lives in federation.seed and must
/// be given explicitly in the spec.
struct ExperimentSpec {
  DataConfig data;
  FederationConfig federation;
  /// Arms executed by `run` and compared by `compare`; defaults to the single
  /// federation.method.
  std::vector<Method> methods;
  /// compare: seeds seed, seed+1, ..., seed+repeats-1.
  std::size_t repeats = 1;
  OutputConfig output;

  void validate() const;
};

enum class SpecFormat { kToml, kJson };

/// Throws ConfigError naming the offending field (e.g. "seed", "federation.lr").
ExperimentSpec parse_spec(std::string_view text, SpecFormat format);
ExperimentSpec spec_from_json(const nlohmann::json& j);
/// Format from the extension: .json is JSON, anything else TOML.
ExperimentSpec load_spec(const std::filesystem::path& path);
/// Fully resolved config, defaults included; parse_spec of its dump
/// reproduces the spec.
nlohmann::json resolved_config(const ExperimentSpec& spec);

inline constexpr const char* kMetricsHeader =
    "round,mean_acc,std_acc,mean_f1,std_f1,brier,loss_ce,loss_pull,loss_shared,loss_server,bytes_up,bytes_down,wall_ms";

/// One row per evaluated round. bytes_* are the totals of that round; std is
/// the population std across clients with a non-empty test shard.
std::string metrics_csv(const std::vector<RoundRecord>& records);

struct ArmResult {
  Method method = Method::kFull;
  std::uint64_t seed = 0;
  std::vector<RoundRecord> records;
  std::vector<ClientMetrics> final_clients;  // last evaluated round
  double wall_ms = 0.0;
};

/// Builds the scenario for `seed` and runs one arm to completion. When
/// `dump_dir` is non-empty, writes attention.json / embeddings.csv there as
/// requested by spec.output.
ArmResult run_arm(const ExperimentSpec& spec, Method method, std::uint64_t seed,
                  const std::filesystem::path& dump_dir = {});

nlohmann::json arm_summary(const ArmResult& arm);

/// CSV with header client_id,label,f0..f{d-1}: personalized test features of
/// every client, 17 significant digits.
void dump_embeddings(const Federation& federation, const std::filesystem::path& path);
void dump_attention(const Federation& federation, const std::filesystem::path& path);

/// `run`: every arm in spec.methods at spec seed. Writes metrics.csv (first
/// arm), metrics_<method>.csv (others) and summary.json into out_dir.
nlohmann::json run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir);

struct PairComparison {
  Method a = Method::kFull;
  Method b = Method::kFull;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double mean_diff = 0.0;  // mean_a - mean_b over paired clients
  double p_value = 1.0;
  std::size_t n = 0;
};

struct Comparison {
  std::vector<Method> methods;
  std::vector<std::uint64_t> seeds;
  /// Per method, per-seed mean final accuracy.
  std::vector<std::vector<double>> seed_means;
  /// Paired rows: (seed, client_id) then one accuracy per method.
  std::vector<std::uint64_t> row_seed;
  std::vector<std::size_t> row_client;
  std::vector<std::vector<double>> accuracy;  // [method][row]
  std::vector<PairComparison> pairs;
};

/// Runs every method over the same seeds and scenarios and pairs the final
/// per-client accuracies. Needs at least two methods.
Comparison compare_methods(const ExperimentSpec& spec, const std::vector<Method>& methods);
/// Writes comparison.csv, pairs.csv and comparison.json.
nlohmann::json write_comparison(const Comparison& cmp, const ExperimentSpec& spec, const std::filesystem::path& out_dir);

}  // namespace stylefed
