#include <atomic>
#include <cmath>

#include <gtest/gtest.h>

#include "grad_blocks.hpp"
#include "stylefed/errors.hpp"
#include "stylefed/experiment.hpp"
#include "stylefed/federation.hpp"

using namespace stylefed;

namespace {

DataConfig small_data() {
  DataConfig d;
  d.classes = 4;
  d.input_dim = 6;
  d.per_class = 40;
  return d;
}

FederationConfig small_fed() {
  FederationConfig f;
  f.clients = 5;
  f.participation = 0.6;
  f.rounds = 4;
  f.local_epochs = 2;
  f.feature_dim = 8;
  f.hidden = {16};
  f.heads = 2;
  f.eval_interval = 2;
  f.seed = 9;
  return f;
}

std::vector<RoundRecord> curve(const std::vector<double>& acc, std::size_t every) {
  std::vector<RoundRecord> out;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    RoundRecord r;
    r.round = (i + 1) * every;
    r.evaluated = true;
    r.mean_acc = acc[i];
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST(Method, NamesRoundTrip) {
  for (Method m : {Method::kFull, Method::kAttentionOnly, Method::kUniformAverage})
    EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_EQ(parse_method("uniform"), Method::kUniformAverage);
  EXPECT_THROW(parse_method("fedavg"), ConfigError);
}

TEST(Convergence, Fixtures) {
  EXPECT_EQ(convergence_round(curve({0.1, 0.5, 0.93, 0.95, 1.0}, 1)), 4u);
  EXPECT_EQ(convergence_round(curve({0.6, 0.6, 0.6}, 5)), 5u);
  EXPECT_EQ(convergence_round(curve({0.2, 0.4, 0.6, 0.8, 1.0}, 1)), 5u);
  // Rounds without evaluation are ignored.
  auto recs = curve({0.5, 1.0}, 2);
  RoundRecord skipped;
  skipped.round = 1;
  skipped.mean_acc = 1.0;
  recs.insert(recs.begin(), skipped);
  EXPECT_EQ(convergence_round(recs), 4u);
  EXPECT_THROW(convergence_round({}), DomainError);
}

TEST(UniformAverage, CancelsOpposites) {
  ClientUpload a, b;
  a.client_id = 0, b.client_id = 1;
  a.class_count = b.class_count = 2;
  a.classes = b.classes = {1};
  a.means = Tensor::from_rows({{1.5, -2.0}});
  b.means = Tensor::from_rows({{-1.5, 2.0}});
  a.counts = b.counts = {4};
  const AggregationResult r = uniform_average(assemble({a, b}, 2));
  EXPECT_FALSE(r.class_present[0]);
  EXPECT_TRUE(r.class_present[1]);
  EXPECT_EQ(r.global(1, 0), 0.0);
  EXPECT_EQ(r.global(1, 1), 0.0);
  EXPECT_EQ(r.attention.weights(0, 1), 0.5);
}

TEST(UniformAverage, SingleClientIsItself) {
  Rng rng(61);
  const PrototypeTensor cp = gradblocks::random_cp(1, 3, 4, rng);
  const AggregationResult r = uniform_average(cp);
  for (std::size_t c = 0; c < 3; ++c)
    if (cp.present(0, c))
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r.global(c, j), cp.values(c, j));
}

TEST(FederationConfig, Validation) {
  FederationConfig f = small_fed();
  EXPECT_NO_THROW(f.validate());
  f.participation = 0.0;
  EXPECT_THROW(f.validate(), ConfigError);
  f = small_fed();
  f.rounds = 0;
  EXPECT_THROW(f.validate(), ConfigError);
  f = small_fed();
  f.feature_dim = 7;  // not divisible by heads
  EXPECT_THROW(f.validate(), ConfigError);
  f = small_fed();
  f.participation = 0.3;
  EXPECT_EQ(f.sampled_per_round(), 2u);
  f.participation = 1.0;
  EXPECT_EQ(f.sampled_per_round(), 5u);
}

TEST(Federation, SingleClientSingleRound) {
  DataConfig d = small_data();
  FederationConfig f = small_fed();
  f.clients = 1;
  f.participation = 1.0;
  f.rounds = 1;
  Federation fed(f, build_scenario(d, f));
  const auto recs = fed.run();
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_TRUE(recs[0].evaluated);
  EXPECT_EQ(recs[0].participants, (std::vector<std::size_t>{0}));
  EXPECT_GT(recs[0].bytes_up, 0u);
  EXPECT_EQ(recs[0].std_acc, 0.0);
  // With one client every present class gets weight 1.
  const auto& w = fed.last_aggregation().attention.weights;
  for (std::size_t c = 0; c < 4; ++c)
    if (fed.last_prototypes().present(0, c)) EXPECT_NEAR(w(0, c), 1.0, 1e-12);
}

TEST(Federation, SamplingIsSortedAndSized) {
  DataConfig d = small_data();
  FederationConfig f = small_fed();
  Federation fed(f, build_scenario(d, f));
  for (std::size_t r = 1; r <= 10; ++r) {
    const auto s = fed.sample_clients(r);
    EXPECT_EQ(s.size(), 3u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(s, fed.sample_clients(r));
  }
}

TEST(Federation, ThreadCountDoesNotChangeResults) {
  DataConfig d = small_data();
  FederationConfig f = small_fed();
  auto run = [&](std::size_t threads) {
    FederationConfig g = f;
    g.threads = threads;
    Federation fed(g, build_scenario(d, g));
    return metrics_csv(fed.run());
  };
  const std::string one = run(1);
  EXPECT_EQ(one, run(1));
  EXPECT_EQ(one, run(3));
}

TEST(Federation, UploadBytesIndependentOfEncoderWidth) {
  DataConfig d = small_data();
  auto bytes = [&](std::vector<std::size_t> hidden) {
    FederationConfig f = small_fed();
    f.hidden = std::move(hidden);
    Federation fed(f, build_scenario(d, f));
    return fed.run_round().bytes_up;
  };
  EXPECT_EQ(bytes({16}), bytes({32, 32}));
}

TEST(Federation, AblationDiffersFromFull) {
  DataConfig d = small_data();
  FederationConfig f = small_fed();
  auto trace = [&](Method m) {
    FederationConfig g = f;
    g.method = m;
    Federation fed(g, build_scenario(d, g));
    return metrics_csv(fed.run());
  };
  EXPECT_NE(trace(Method::kFull), trace(Method::kAttentionOnly));
  EXPECT_NE(trace(Method::kAttentionOnly), trace(Method::kUniformAverage));
}

TEST(Federation, UniformArmHasNoServerLoss) {
  DataConfig d = small_data();
  FederationConfig f = small_fed();
  f.method = Method::kUniformAverage;
  Federation fed(f, build_scenario(d, f));
  const RoundRecord r = fed.run_round();
  EXPECT_EQ(r.loss_server, 0.0);
  for (const auto& c : fed.clients()) {
    EXPECT_FALSE(c.hyper().use_film);
    EXPECT_FALSE(c.hyper().use_gate);
    EXPECT_EQ(c.hyper().lambda_pull, 0.0);
  }
}

TEST(Federation, BroadcastBytesFollowKnownClasses) {
  DataConfig d = small_data();
  FederationConfig f = small_fed();
  Federation fed(f, build_scenario(d, f));
  const RoundRecord r1 = fed.run_round();
  EXPECT_EQ(r1.bytes_down, r1.participants.size() * 1);  // nothing known yet: mask byte only
  const std::size_t known = fed.globals().known_count();
  const RoundRecord r2 = fed.run_round();
  EXPECT_EQ(r2.bytes_down, r2.participants.size() * (known * 8 * f.feature_dim + 1));
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hit(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) throw NumericError("boom");
                            }),
               NumericError);
}
