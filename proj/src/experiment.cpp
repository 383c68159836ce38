#include "stylefed/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "stylefed/errors.hpp"
#include "stylefed/metrics.hpp"

namespace stylefed {

using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown fields.
class Section {
 public:
  Section(const json* j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (j_ && !j_->is_object()) throw ConfigError(prefix_ + ": expected a table");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_ || !j_->contains(key)) return;
    const json& v = (*j_)[key];
    const std::string name = field(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + ": expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + ": expected a number");
      out = v.get<double>();
    } else if constexpr (std::is_integral_v<T>) {
      out = static_cast<T>(unsigned_int(v, name));
    } else {
      static_assert(std::is_same_v<T, std::vector<std::size_t>>);
      if (!v.is_array()) throw ConfigError(name + ": expected an array of integers");
      out.clear();
      for (const auto& e : v) out.push_back(static_cast<std::size_t>(unsigned_int(e, name)));
    }
  }

  void mark(const char* key) { used_.insert(key); }
  bool has(const char* key) const { return j_ && j_->contains(key); }
  std::string field(const char* key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    if (!j_) return;
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(field(it.key().c_str()) + ": unknown field");
    }
  }

 private:
  static std::uint64_t unsigned_int(const json& v, const std::string& name) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      const auto i = v.get<std::int64_t>();
      if (i < 0) throw ConfigError(name + ": must be non-negative");
      return static_cast<std::uint64_t>(i);
    }
    throw ConfigError(name + ": expected a non-negative integer");
  }

  const json* j_;
  std::string prefix_;
  std::set<std::string> used_;
};

const json* child(const json& root, const char* key) {
  return root.contains(key) ? &root[key] : nullptr;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw ConfigError("output.dir: cannot create '" + dir.string() + "'");
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw std::runtime_error("error writing " + path.string());
}

json metric_best(double value, std::size_t round) { return {{"value", value}, {"round", round}}; }

}  // namespace

void ExperimentSpec::validate() const {
  data.validate();
  federation.validate();
  if (methods.empty()) throw ConfigError("federation.methods: must not be empty");
  if (repeats < 1) throw ConfigError("federation.repeats must be >= 1");
  if (output.dir.empty()) throw ConfigError("output.dir: must not be empty");
}

ExperimentSpec spec_from_json(const json& root) {
  if (!root.is_object()) throw ConfigError("spec: expected a table at the top level");
  ExperimentSpec spec;
  Section top(&root, "");
  if (!root.contains("seed")) throw ConfigError("seed: required field is missing (no default seed)");
  top.get("seed", spec.federation.seed);

  Section data(child(root, "data"), "data");
  data.get("classes", spec.data.classes);
  data.get("input_dim", spec.data.input_dim);
  data.get("per_class", spec.data.per_class);
  data.get("separation", spec.data.separation);
  data.get("style_scale_spread", spec.data.style_scale_spread);
  data.get("style_offset_std", spec.data.style_offset_std);
  data.get("style_noise_std", spec.data.style_noise_std);
  data.get("test_fraction", spec.data.test_fraction);
  data.finish();

  FederationConfig& f = spec.federation;
  Section fed(child(root, "federation"), "federation");
  fed.get("clients", f.clients);
  fed.get("participation", f.participation);
  fed.get("rounds", f.rounds);
  fed.get("local_epochs", f.local_epochs);
  fed.get("lambda_shared", f.lambda_shared);
  fed.get("lambda_pull", f.lambda_pull);
  fed.get("lr", f.lr);
  fed.get("alpha", f.alpha);
  fed.get("noise_var", f.noise_var);
  fed.get("eval_interval", f.eval_interval);
  fed.get("shared_init", f.shared_init);
  fed.get("threads", f.threads);
  fed.get("record_wall_time", f.record_wall_time);
  fed.get("repeats", spec.repeats);
  std::string method = to_string(f.method);
  fed.get("method", method);
  f.method = parse_method(method);
  if (fed.has("methods")) {
    const json& arr = (*child(root, "federation"))["methods"];
    if (!arr.is_array()) throw ConfigError("federation.methods: expected an array of method names");
    for (const auto& m : arr) {
      if (!m.is_string()) throw ConfigError("federation.methods: expected an array of method names");
      spec.methods.push_back(parse_method(m.get<std::string>()));
    }
  }
  fed.mark("methods");
  fed.finish();
  if (spec.methods.empty()) spec.methods.push_back(f.method);

  Section model(child(root, "model"), "model");
  model.get("feature_dim", f.feature_dim);
  model.get("hidden", f.hidden);
  model.get("batch_size", f.batch_size);
  model.finish();

  Section agg(child(root, "aggregator"), "aggregator");
  agg.get("heads", f.heads);
  agg.get("lr", f.server_lr);
  agg.get("steps", f.server_steps);
  agg.get("max_clients", f.max_clients);
  agg.get("calibrate", f.calibrate_aggregator);
  agg.finish();

  Section out(child(root, "output"), "output");
  out.get("dir", spec.output.dir);
  out.get("attention", spec.output.attention);
  out.get("embeddings", spec.output.embeddings);
  out.finish();

  // Top-level: only the sections above and seed.
  for (auto it = root.begin(); it != root.end(); ++it) {
    static const std::set<std::string> known{"seed", "data", "federation", "model", "aggregator", "output"};
    if (!known.count(it.key())) throw ConfigError(it.key() + ": unknown field");
  }
  spec.validate();
  return spec;
}

ExperimentSpec parse_spec(std::string_view text, SpecFormat format) {
  json root;
  if (format == SpecFormat::kJson) {
    try {
      root = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("spec: invalid JSON: ") + e.what());
    }
  } else {
    try {
      const toml::table tbl = toml::parse(text);
      std::ostringstream ss;
      ss << toml::json_formatter{tbl};
      root = json::parse(ss.str());
    } catch (const toml::parse_error& e) {
      std::ostringstream msg;
      msg << "spec: invalid TOML at line " << e.source().begin.line << ": " << e.description();
      throw ConfigError(msg.str());
    }
  }
  return spec_from_json(root);
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("spec: cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const SpecFormat fmt = path.extension() == ".json" ? SpecFormat::kJson : SpecFormat::kToml;
  return parse_spec(ss.str(), fmt);
}

json resolved_config(const ExperimentSpec& spec) {
  const DataConfig& d = spec.data;
  const FederationConfig& f = spec.federation;
  json methods = json::array();
  for (Method m : spec.methods) methods.push_back(to_string(m));
  return {
      {"seed", f.seed},
      {"data",
       {{"classes", d.classes},
        {"input_dim", d.input_dim},
        {"per_class", d.per_class},
        {"separation", d.separation},
        {"style_scale_spread", d.style_scale_spread},
        {"style_offset_std", d.style_offset_std},
        {"style_noise_std", d.style_noise_std},
        {"test_fraction", d.test_fraction}}},
      {"federation",
       {{"clients", f.clients},
        {"participation", f.participation},
        {"rounds", f.rounds},
        {"local_epochs", f.local_epochs},
        {"lambda_shared", f.lambda_shared},
        {"lambda_pull", f.lambda_pull},
        {"lr", f.lr},
        {"alpha", f.alpha},
        {"noise_var", f.noise_var},
        {"method", to_string(f.method)},
        {"methods", methods},
        {"repeats", spec.repeats},
        {"eval_interval", f.eval_interval},
        {"shared_init", f.shared_init},
        {"threads", f.threads},
        {"record_wall_time", f.record_wall_time}}},
      {"model", {{"feature_dim", f.feature_dim}, {"hidden", f.hidden}, {"batch_size", f.batch_size}}},
      {"aggregator",
       {{"heads", f.heads},
        {"lr", f.server_lr},
        {"steps", f.server_steps},
        {"max_clients", f.max_clients},
        {"calibrate", f.calibrate_aggregator}}},
      {"output", {{"dir", spec.output.dir}, {"attention", spec.output.attention}, {"embeddings", spec.output.embeddings}}},
  };
}

std::string metrics_csv(const std::vector<RoundRecord>& records) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : records) {
    if (!r.evaluated) continue;
    out += std::to_string(r.round) + "," + num(r.mean_acc) + "," + num(r.std_acc) + "," + num(r.mean_f1) + "," +
           num(r.std_f1) + "," + num(r.mean_brier) + "," + num(r.loss_ce) + "," + num(r.loss_pull) + "," +
           num(r.loss_shared) + "," + num(r.loss_server) + "," + std::to_string(r.bytes_up) + "," +
           std::to_string(r.bytes_down) + "," + num(r.wall_ms) + "\n";
  }
  return out;
}

void dump_embeddings(const Federation& federation, const std::filesystem::path& path) {
  auto out = open_out(path);
  const std::size_t d = federation.config().feature_dim;
  out << "client_id,label";
  for (std::size_t j = 0; j < d; ++j) out << ",f" << j;
  out << "\n";
  const std::vector<ClientEval> evals = federation.evaluate_all();
  for (std::size_t k = 0; k < evals.size(); ++k) {
    const Dataset& test = federation.clients()[k].test();
    const Tensor& feats = evals[k].personalized_features;
    for (std::size_t i = 0; i < test.size(); ++i) {
      out << k << "," << test.labels[i];
      for (double v : feats.row_span(i)) out << "," << num(v);
      out << "\n";
    }
  }
  if (!out) throw std::runtime_error("error writing " + path.string());
}

void dump_attention(const Federation& federation, const std::filesystem::path& path) {
  const AggregationResult& agg = federation.last_aggregation();
  const PrototypeTensor& cp = federation.last_prototypes();
  json weights = json::array();
  for (std::size_t k = 0; k < agg.attention.weights.rows(); ++k) weights.push_back(agg.attention.weights.row_vector(k));
  json present = json::array();
  for (bool b : agg.attention.class_present) present.push_back(b);
  const json j = {{"round", federation.round()},
                  {"method", to_string(federation.config().method)},
                  {"client_ids", cp.client_ids},
                  {"class_present", present},
                  {"weights", weights}};
  write_text(path, j.dump(2) + "\n");
}

ArmResult run_arm(const ExperimentSpec& spec, Method method, std::uint64_t seed, const std::filesystem::path& dump_dir) {
  FederationConfig cfg = spec.federation;
  cfg.method = method;
  cfg.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  Federation fed(cfg, build_scenario(spec.data, cfg));
  ArmResult arm;
  arm.method = method;
  arm.seed = seed;
  arm.records = fed.run();
  for (auto it = arm.records.rbegin(); it != arm.records.rend(); ++it) {
    if (it->evaluated) {
      arm.final_clients = it->clients;
      break;
    }
  }
  arm.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  if (!dump_dir.empty()) {
    if (spec.output.attention) dump_attention(fed, dump_dir / "attention.json");
    if (spec.output.embeddings) dump_embeddings(fed, dump_dir / "embeddings.csv");
  }
  return arm;
}

json arm_summary(const ArmResult& arm) {
  json s;
  s["method"] = to_string(arm.method);
  s["seed"] = arm.seed;
  double best_acc = -1, best_f1 = -1, min_brier = 3;
  std::size_t acc_round = 0, f1_round = 0, brier_round = 0;
  std::size_t up = 0, down = 0;
  json aborted = json::array();
  const RoundRecord* last = nullptr;
  for (const auto& r : arm.records) {
    up += r.bytes_up;
    down += r.bytes_down;
    if (r.server_aborted) aborted.push_back(r.round);
    if (!r.evaluated) continue;
    last = &r;
    if (r.mean_acc > best_acc) best_acc = r.mean_acc, acc_round = r.round;
    if (r.mean_f1 > best_f1) best_f1 = r.mean_f1, f1_round = r.round;
    if (r.mean_brier < min_brier) min_brier = r.mean_brier, brier_round = r.round;
  }
  if (last == nullptr) throw DomainError("arm_summary: no evaluated rounds");
  s["best_accuracy"] = metric_best(best_acc, acc_round);
  s["best_macro_f1"] = metric_best(best_f1, f1_round);
  s["min_brier"] = metric_best(min_brier, brier_round);
  s["convergence_round"] = convergence_round(arm.records);
  s["final"] = {{"round", last->round},
                {"mean_acc", last->mean_acc},
                {"std_acc", last->std_acc},
                {"mean_f1", last->mean_f1},
                {"std_f1", last->std_f1},
                {"brier", last->mean_brier},
                {"std_brier", last->std_brier}};
  json clients = json::array();
  for (const auto& c : arm.final_clients) {
    clients.push_back(
        {{"client_id", c.client_id}, {"accuracy", c.accuracy}, {"macro_f1", c.macro_f1}, {"brier", c.brier}, {"n", c.n}});
  }
  s["per_client_final"] = clients;
  s["bytes_up_total"] = up;
  s["bytes_down_total"] = down;
  s["server_aborted_rounds"] = aborted;
  s["wall_ms"] = arm.wall_ms;
  return s;
}

json run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  ensure_dir(out_dir);
  json arms = json::object();
  json primary;
  for (std::size_t i = 0; i < spec.methods.size(); ++i) {
    const Method m = spec.methods[i];
    const ArmResult arm = run_arm(spec, m, spec.federation.seed, i == 0 ? out_dir : std::filesystem::path{});
    const std::string csv_name = i == 0 ? "metrics.csv" : "metrics_" + to_string(m) + ".csv";
    write_text(out_dir / csv_name, metrics_csv(arm.records));
    json s = arm_summary(arm);
    s["metrics_file"] = csv_name;
    if (i == 0) primary = s;
    arms[to_string(m)] = s;
  }
  json summary = primary;
  summary["std_definition"] = "population std across clients with a non-empty test shard";
  summary["arms"] = arms;
  summary["config"] = resolved_config(spec);
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

Comparison compare_methods(const ExperimentSpec& spec, const std::vector<Method>& methods) {
  if (methods.size() < 2) throw ConfigError("methods: compare needs at least two methods");
  spec.validate();
  Comparison cmp;
  cmp.methods = methods;
  cmp.seed_means.assign(methods.size(), {});
  cmp.accuracy.assign(methods.size(), {});
  for (std::size_t r = 0; r < spec.repeats; ++r) {
    const std::uint64_t seed = spec.federation.seed + r;
    cmp.seeds.push_back(seed);
    std::vector<std::map<std::size_t, double>> by_client(methods.size());
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const ArmResult arm = run_arm(spec, methods[m], seed);
      double sum = 0.0;
      for (const auto& c : arm.final_clients) {
        by_client[m][c.client_id] = c.accuracy;
        sum += c.accuracy;
      }
      cmp.seed_means[m].push_back(arm.final_clients.empty() ? 0.0 : sum / static_cast<double>(arm.final_clients.size()));
    }
    // Every arm sees the same scenario, so the evaluated client sets agree.
    for (const auto& [client, acc] : by_client[0]) {
      cmp.row_seed.push_back(seed);
      cmp.row_client.push_back(client);
      for (std::size_t m = 0; m < methods.size(); ++m) cmp.accuracy[m].push_back(by_client[m].at(client));
    }
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  for (std::size_t i = 0; i < methods.size(); ++i) {
    for (std::size_t j = i + 1; j < methods.size(); ++j) {
      PairComparison p;
      p.a = methods[i];
      p.b = methods[j];
      p.n = cmp.accuracy[i].size();
      p.mean_a = mean(cmp.accuracy[i]);
      p.mean_b = mean(cmp.accuracy[j]);
      p.mean_diff = p.mean_a - p.mean_b;
      p.p_value = wilcoxon_signed_rank(cmp.accuracy[i], cmp.accuracy[j]);
      cmp.pairs.push_back(p);
    }
  }
  return cmp;
}

json write_comparison(const Comparison& cmp, const ExperimentSpec& spec, const std::filesystem::path& out_dir) {
  ensure_dir(out_dir);
  std::string csv = "seed,client_id";
  for (Method m : cmp.methods) csv += "," + to_string(m);
  csv += "\n";
  for (std::size_t r = 0; r < cmp.row_seed.size(); ++r) {
    csv += std::to_string(cmp.row_seed[r]) + "," + std::to_string(cmp.row_client[r]);
    for (const auto& col : cmp.accuracy) csv += "," + num(col[r]);
    csv += "\n";
  }
  write_text(out_dir / "comparison.csv", csv);

  std::string pairs_csv = "method_a,method_b,n,mean_a,mean_b,mean_diff,wilcoxon_p\n";
  json pairs = json::array();
  for (const auto& p : cmp.pairs) {
    pairs_csv += to_string(p.a) + "," + to_string(p.b) + "," + std::to_string(p.n) + "," + num(p.mean_a) + "," +
                 num(p.mean_b) + "," + num(p.mean_diff) + "," + num(p.p_value) + "\n";
    pairs.push_back({{"method_a", to_string(p.a)},
                     {"method_b", to_string(p.b)},
                     {"n", p.n},
                     {"mean_a", p.mean_a},
                     {"mean_b", p.mean_b},
                     {"mean_diff", p.mean_diff},
                     {"wilcoxon_p", p.p_value}});
  }
  write_text(out_dir / "pairs.csv", pairs_csv);

  json per_seed = json::object();
  for (std::size_t m = 0; m < cmp.methods.size(); ++m) per_seed[to_string(cmp.methods[m])] = cmp.seed_means[m];
  json methods = json::array();
  for (Method m : cmp.methods) methods.push_back(to_string(m));
  const json j = {{"methods", methods},
                  {"seeds", cmp.seeds},
                  {"per_seed_mean_accuracy", per_seed},
                  {"pairs", pairs},
                  {"config", resolved_config(spec)}};
  write_text(out_dir / "comparison.json", j.dump(2) + "\n");
  return j;
}

}  // namespace stylefed
