#include "stylefed/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "stylefed/errors.hpp"

namespace stylefed {

std::string to_string(Method m) {
  switch (m) {
    case Method::kFull:
      return "full";
    case Method::kAttentionOnly:
      return "ablation_attention_only";
    case Method::kUniformAverage:
      return "uniform_average";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "full") return Method::kFull;
  if (name == "ablation_attention_only" || name == "ablation") return Method::kAttentionOnly;
  if (name == "uniform_average" || name == "uniform") return Method::kUniformAverage;
  throw ConfigError("method: unknown value '" + name + "' (expected full, ablation_attention_only, uniform_average)");
}

void DataConfig::validate() const {
  if (classes < 2) throw ConfigError("data.classes must be >= 2");
  if (input_dim < 1) throw ConfigError("data.input_dim must be >= 1");
  if (per_class < 2) throw ConfigError("data.per_class must be >= 2");
  if (!(separation > 0)) throw ConfigError("data.separation must be positive");
  if (style_scale_spread < 0) throw ConfigError("data.style_scale_spread must be >= 0");
  if (style_offset_std < 0) throw ConfigError("data.style_offset_std must be >= 0");
  if (style_noise_std < 0) throw ConfigError("data.style_noise_std must be >= 0");
  if (!(test_fraction >= 0 && test_fraction < 1)) throw ConfigError("data.test_fraction must lie in [0, 1)");
}

void FederationConfig::validate() const {
  if (clients < 1) throw ConfigError("federation.clients must be >= 1");
  if (!(participation > 0 && participation <= 1)) throw ConfigError("federation.participation must lie in (0, 1]");
  if (rounds < 1) throw ConfigError("federation.rounds must be >= 1");
  if (!(lambda_shared >= 0)) throw ConfigError("federation.lambda_shared must be >= 0");
  if (!(lambda_pull >= 0)) throw ConfigError("federation.lambda_pull must be >= 0");
  if (!(lr >= 0)) throw ConfigError("federation.lr must be >= 0");
  if (!(alpha > 0)) throw ConfigError("federation.alpha must be positive");
  if (!(noise_var >= 0)) throw ConfigError("federation.noise_var must be >= 0");
  if (feature_dim < 2) throw ConfigError("model.feature_dim must be >= 2");
  if (eval_interval < 1) throw ConfigError("federation.eval_interval must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (heads < 1 || feature_dim % heads != 0) throw ConfigError("aggregator.heads must divide model.feature_dim");
  if (!(server_lr >= 0)) throw ConfigError("aggregator.lr must be >= 0");
  if (max_clients != 0 && max_clients < clients) throw ConfigError("aggregator.max_clients must cover every client");
  for (std::size_t h : hidden)
    if (h == 0) throw ConfigError("model.hidden widths must be positive");
}

std::size_t FederationConfig::sampled_per_round() const {
  // Guard against 0.3 * 20 landing a hair above 6.
  const double want = participation * static_cast<double>(clients);
  const auto m = static_cast<std::size_t>(std::ceil(want - 1e-9));
  return std::clamp<std::size_t>(m, 1, clients);
}

std::vector<ClientShard> build_scenario(const DataConfig& data, const FederationConfig& fed) {
  data.validate();
  fed.validate();
  const Dataset pool =
      generate_gaussian_mixture(data.classes, data.input_dim, data.per_class, data.separation, fed.seed);
  const PartitionPlan plan = dirichlet_partition(pool, fed.clients, fed.alpha, fed.noise_var, fed.seed);
  const auto styles = random_style_shifts(fed.clients, data.input_dim, data.style_scale_spread, data.style_offset_std,
                                          data.style_noise_std, fed.seed);
  std::vector<Dataset> shards = apply_style_shift(pool, styles, plan, fed.seed);
  std::vector<ClientShard> out;
  out.reserve(shards.size());
  for (std::size_t k = 0; k < shards.size(); ++k) {
    Rng rng = make_rng(fed.seed, Stream::kSplit, {k});
    auto [train, test] = stratified_split(shards[k], data.test_fraction, rng);
    out.push_back({std::move(train), std::move(test)});
  }
  return out;
}

AggregationResult uniform_average(const PrototypeTensor& cp) {
  AggregationResult out;
  out.global = Tensor::zeros(cp.classes, cp.dim);
  out.class_present.assign(cp.classes, false);
  out.attention.weights = Tensor::zeros(cp.clients, cp.classes);
  out.refined = cp.values;
  for (std::size_t c = 0; c < cp.classes; ++c) {
    const auto holders = cp.clients_with(c);
    if (holders.empty()) continue;
    out.class_present[c] = true;
    auto g = out.global.row_span(c);
    for (std::size_t k : holders) {
      const auto p = cp.values.row_span(k * cp.classes + c);
      for (std::size_t j = 0; j < cp.dim; ++j) g[j] += p[j];
      out.attention.weights(k, c) = 1.0 / static_cast<double>(holders.size());
    }
    for (double& v : g) v /= static_cast<double>(holders.size());
  }
  out.attention.class_present = out.class_present;
  return out;
}

std::size_t convergence_round(const std::vector<RoundRecord>& records, double threshold) {
  double best = -1.0;
  for (const auto& r : records)
    if (r.evaluated) best = std::max(best, r.mean_acc);
  if (best < 0.0) throw DomainError("convergence_round: no evaluated rounds");
  for (const auto& r : records)
    if (r.evaluated && r.mean_acc >= threshold * best) return r.round;
  return records.back().round;  // unreachable: the best round always qualifies
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

ClientHyperparams hyper_for(const FederationConfig& config) {
  ClientHyperparams h;
  h.lambda_shared = config.lambda_shared;
  h.lr = config.lr;
  h.batch_size = config.batch_size;
  if (config.method == Method::kFull) {
    h.lambda_pull = config.lambda_pull;
  } else {
    // Personalization branch removed: identity FiLM, gate pinned to the global prototype, no pull.
    h.lambda_pull = 0.0;
    h.use_film = false;
    h.use_gate = false;
  }
  return h;
}

AggregatorConfig aggregator_config(const FederationConfig& config, std::size_t classes) {
  AggregatorConfig a;
  a.dim = config.feature_dim;
  a.classes = classes;
  a.max_clients = config.max_clients == 0 ? config.clients : config.max_clients;
  a.heads = config.heads;
  return a;
}

std::size_t class_count_of(const std::vector<ClientShard>& shards) {
  if (shards.empty()) throw ConfigError("no client shards");
  return shards.front().train.class_count;
}

Rng server_rng(const FederationConfig& config) { return make_rng(config.seed, Stream::kServer); }

struct Stats {
  double mean = 0.0, std = 0.0;
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

}  // namespace

Federation::Federation(FederationConfig config, std::vector<ClientShard> shards)
    : config_(std::move(config)),
      aggregator_([&]() -> Aggregator {
        config_.validate();
        Rng rng = server_rng(config_);
        return Aggregator(aggregator_config(config_, class_count_of(shards)), rng);
      }()) {
  if (shards.size() != config_.clients) {
    throw ConfigError("federation.clients is " + std::to_string(config_.clients) + " but " +
                      std::to_string(shards.size()) + " shards were provided");
  }
  const std::size_t classes = class_count_of(shards);
  ModelShape shape;
  shape.input_dim = shards.front().train.features.cols();
  for (const auto& s : shards)
    if (s.train.size() > 0) shape.input_dim = s.train.dim();
  shape.hidden = config_.hidden;
  shape.feature_dim = config_.feature_dim;
  shape.classes = classes;
  const ClientHyperparams hyper = hyper_for(config_);

  clients_.reserve(shards.size());
  for (std::size_t k = 0; k < shards.size(); ++k) {
    Rng init = config_.shared_init ? make_rng(config_.seed, Stream::kInit) : make_rng(config_.seed, Stream::kInit, {k});
    clients_.emplace_back(k, std::move(shards[k].train), std::move(shards[k].test), shape, hyper, init);
  }
  globals_ = GlobalPrototypes::zeros(classes, config_.feature_dim);
}

std::vector<std::size_t> Federation::sample_clients(std::size_t round) const {
  std::vector<std::size_t> ids(config_.clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_rng(config_.seed, Stream::kSampling, {round});
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(config_.sampled_per_round());
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<ClientEval> Federation::evaluate_all() const {
  std::vector<ClientEval> out(clients_.size());
  parallel_for(clients_.size(), config_.threads, [&](std::size_t i) { out[i] = clients_[i].evaluate(globals_); });
  return out;
}

RoundRecord Federation::run_round() {
  const auto start = std::chrono::steady_clock::now();
  RoundRecord rec;
  rec.round = ++round_;
  const std::vector<std::size_t> sampled = sample_clients(rec.round);

  // Local updates against the broadcast prototypes.
  std::vector<LocalUpdateResult> results(sampled.size());
  try {
    parallel_for(sampled.size(), config_.threads, [&](std::size_t i) {
      const std::size_t k = sampled[i];
      Rng rng = make_rng(config_.seed, Stream::kClient, {k, rec.round});
      results[i] = clients_[k].local_update(globals_, config_.local_epochs, rng);
    });
  } catch (const NumericError& e) {
    throw NumericError("round " + std::to_string(rec.round) + ": " + e.what());
  }

  last_uploads_.clear();
  std::vector<double> ce, pull, shared;
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    rec.bytes_down += globals_.byte_size();
    if (!results[i].upload) {
      rec.skipped.push_back(sampled[i]);
      continue;
    }
    rec.participants.push_back(sampled[i]);
    rec.bytes_up += results[i].upload->byte_size();
    ce.push_back(results[i].last.ce);
    pull.push_back(results[i].last.pull);
    shared.push_back(results[i].last.shared);
    last_uploads_.push_back(std::move(*results[i].upload));
  }
  rec.loss_ce = stats(ce).mean;
  rec.loss_pull = stats(pull).mean;
  rec.loss_shared = stats(shared).mean;

  // Server aggregation; classes nobody uploaded keep their previous prototype.
  if (!last_uploads_.empty()) {
    last_cp_ = assemble(last_uploads_, globals_.classes());
    if (config_.method != Method::kUniformAverage && config_.calibrate_aggregator && !calibrated_ &&
        aggregator_.input_norm()) {
      aggregator_.calibrate_input_scale(last_cp_);
      calibrated_ = true;
    }
    last_aggregation_ =
        config_.method == Method::kUniformAverage ? uniform_average(last_cp_) : aggregator_.aggregate(last_cp_);
    for (std::size_t c = 0; c < globals_.classes(); ++c) {
      if (!last_aggregation_.class_present[c]) continue;
      auto src = last_aggregation_.global.row_span(c);
      std::copy(src.begin(), src.end(), globals_.values.row_span(c).begin());
      globals_.known[c] = true;
    }
    if (config_.method != Method::kUniformAverage) {
      const AggregatorTrainResult tr = aggregator_.train(last_cp_, config_.server_steps, config_.server_lr);
      rec.loss_server = tr.final_loss;
      rec.server_aborted = tr.aborted;
    }
  }

  if (rec.round % config_.eval_interval == 0 || rec.round == config_.rounds) {
    rec.evaluated = true;
    const std::vector<ClientEval> evals = evaluate_all();
    std::vector<double> acc, f1, brier;
    for (std::size_t k = 0; k < evals.size(); ++k) {
      if (evals[k].metrics.n == 0) continue;
      const auto& m = evals[k].metrics;
      rec.clients.push_back({k, m.accuracy, m.macro_f1, m.brier, m.n});
      acc.push_back(m.accuracy);
      f1.push_back(m.macro_f1);
      brier.push_back(m.brier);
    }
    const Stats a = stats(acc), f = stats(f1), b = stats(brier);
    rec.mean_acc = a.mean;
    rec.std_acc = a.std;
    rec.mean_f1 = f.mean;
    rec.std_f1 = f.std;
    rec.mean_brier = b.mean;
    rec.std_brier = b.std;
  }
  if (config_.record_wall_time) {
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
  return rec;
}

std::vector<RoundRecord> Federation::run() {
  std::vector<RoundRecord> out;
  while (round_ < config_.rounds) out.push_back(run_round());
  return out;
}

}  // namespace stylefed
