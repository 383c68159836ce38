#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "stylefed/errors.hpp"
#include "stylefed/experiment.hpp"

using namespace stylefed;

namespace {

std::string error_of(std::string_view text, SpecFormat fmt) {
  try {
    parse_spec(text, fmt);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

ExperimentSpec tiny_spec() {
  ExperimentSpec s;
  s.data.classes = 3;
  s.data.input_dim = 4;
  s.data.per_class = 20;
  s.federation.clients = 3;
  s.federation.participation = 1.0;
  s.federation.rounds = 2;
  s.federation.local_epochs = 1;
  s.federation.feature_dim = 4;
  s.federation.hidden = {8};
  s.federation.heads = 2;
  s.federation.eval_interval = 1;
  s.federation.seed = 4;
  s.methods = {Method::kFull};
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Spec, TomlFieldsParse) {
  const ExperimentSpec s = parse_spec(R"(
seed = 12
[data]
classes = 5
separation = 1.5
[federation]
clients = 7
participation = 0.5
rounds = 3
methods = ["full", "uniform_average"]
repeats = 2
[model]
hidden = [10, 12]
[aggregator]
heads = 2
[output]
dir = "x"
attention = true
)",
                                     SpecFormat::kToml);
  EXPECT_EQ(s.federation.seed, 12u);
  EXPECT_EQ(s.data.classes, 5u);
  EXPECT_EQ(s.data.separation, 1.5);
  EXPECT_EQ(s.federation.clients, 7u);
  EXPECT_EQ(s.federation.participation, 0.5);
  EXPECT_EQ(s.federation.hidden, (std::vector<std::size_t>{10, 12}));
  EXPECT_EQ(s.federation.heads, 2u);
  EXPECT_EQ(s.methods, (std::vector<Method>{Method::kFull, Method::kUniformAverage}));
  EXPECT_EQ(s.repeats, 2u);
  EXPECT_EQ(s.output.dir, "x");
  EXPECT_TRUE(s.output.attention);
}

TEST(Spec, JsonFieldsParse) {
  const ExperimentSpec s =
      parse_spec(R"({"seed": 3, "federation": {"method": "ablation_attention_only", "lr": 0.01}})", SpecFormat::kJson);
  EXPECT_EQ(s.federation.seed, 3u);
  EXPECT_EQ(s.federation.lr, 0.01);
  EXPECT_EQ(s.methods, (std::vector<Method>{Method::kAttentionOnly}));
}

TEST(Spec, ErrorsNameTheField) {
  EXPECT_NE(error_of("[data]\nclasses = 3\n", SpecFormat::kToml).find("seed"), std::string::npos);
  EXPECT_NE(error_of("seed = 1\n[federation]\nlrr = 0.1\n", SpecFormat::kToml).find("federation.lrr"),
            std::string::npos);
  EXPECT_NE(error_of("seed = 1\n[federation]\nparticipation = 1.5\n", SpecFormat::kToml).find("federation.participation"),
            std::string::npos);
  EXPECT_NE(error_of("seed = 1\n[federation]\nrounds = -2\n", SpecFormat::kToml).find("federation.rounds"),
            std::string::npos);
  EXPECT_NE(error_of("seed = 1\n[federation]\nmethod = \"fedavg\"\n", SpecFormat::kToml).find("method"),
            std::string::npos);
  EXPECT_NE(error_of("seed = 1\nbogus = 2\n", SpecFormat::kToml).find("bogus"), std::string::npos);
  EXPECT_NE(error_of("{\"seed\": \"one\"}", SpecFormat::kJson).find("seed"), std::string::npos);
  EXPECT_FALSE(error_of("seed = = 1", SpecFormat::kToml).empty());
  EXPECT_FALSE(error_of("{", SpecFormat::kJson).empty());
}

TEST(Spec, ResolvedConfigRoundTrips) {
  ExperimentSpec s = tiny_spec();
  s.federation.lambda_pull = 0.25;
  s.output.embeddings = true;
  const nlohmann::json j = resolved_config(s);
  const ExperimentSpec back = parse_spec(j.dump(), SpecFormat::kJson);
  EXPECT_EQ(resolved_config(back), j);
}

TEST(Metrics, CsvHeaderAndRows) {
  RoundRecord a, b;
  a.round = 1;
  b.round = 2;
  b.evaluated = true;
  b.mean_acc = 0.1;
  b.bytes_up = 7;
  const std::string csv = metrics_csv({a, b});
  std::istringstream in(csv);
  std::string header, row, extra;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, kMetricsHeader);
  EXPECT_EQ(row.rfind("2,0.10000000000000001,", 0), 0u) << row;
  EXPECT_FALSE(std::getline(in, extra));
}

TEST(Experiment, RunWritesArtifacts) {
  const auto dir = std::filesystem::temp_directory_path() / "stylefed_test_run";
  std::filesystem::remove_all(dir);
  ExperimentSpec s = tiny_spec();
  s.methods = {Method::kFull, Method::kUniformAverage};
  s.output.attention = true;
  s.output.embeddings = true;
  const nlohmann::json summary = run_experiment(s, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics_uniform_average.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "attention.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "embeddings.csv"));
  const auto js = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(js["config"]["seed"], 4);
  EXPECT_TRUE(slurp(dir / "embeddings.csv").rfind("client_id,label,f0,f1,f2,f3\n", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST(Experiment, CompareNeedsTwoMethods) {
  ExperimentSpec s = tiny_spec();
  EXPECT_THROW(compare_methods(s, {Method::kFull}), ConfigError);
}

TEST(Experiment, CompareSameMethodHasNoDifference) {
  ExperimentSpec s = tiny_spec();
  s.repeats = 2;
  const Comparison c = compare_methods(s, {Method::kFull, Method::kFull});
  ASSERT_EQ(c.pairs.size(), 1u);
  EXPECT_EQ(c.pairs[0].mean_diff, 0.0);
  EXPECT_EQ(c.pairs[0].p_value, 1.0);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 5}));
  EXPECT_EQ(c.pairs[0].n, c.row_seed.size());
}
