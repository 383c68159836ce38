#include <cmath>

#include <gtest/gtest.h>

#include "grad_blocks.hpp"
#include "oracles.hpp"
#include "stylefed/errors.hpp"
#include "stylefed/federation.hpp"
#include "stylefed/server.hpp"

using namespace stylefed;

namespace {

Aggregator make_agg(std::size_t d, std::size_t C, std::size_t M, Rng& rng, double emb_sd = 0.8) {
  AggregatorConfig cfg;
  cfg.dim = d;
  cfg.classes = C;
  cfg.max_clients = M;
  cfg.heads = 2;
  cfg.residual_std = 0.3;
  Aggregator agg(cfg, rng);
  gradblocks::redraw({&agg.client_embedding(), &agg.class_embedding()}, rng, emb_sd);
  return agg;
}

}  // namespace

TEST(Assemble, RoundTrip) {
  Rng rng(31);
  const PrototypeTensor cp = gradblocks::random_cp(4, 3, 5, rng);
  const auto ups = split(cp);
  const PrototypeTensor again = assemble(ups, 3);
  EXPECT_EQ(again.values, cp.values);
  EXPECT_EQ(again.mask, cp.mask);
  EXPECT_EQ(again.counts, cp.counts);
  EXPECT_EQ(again.client_ids, cp.client_ids);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 3; ++c)
      if (!cp.present(k, c))
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(cp.values(k * 3 + c, j), 0.0);
}

TEST(Assemble, DuplicateClientRejected) {
  Rng rng(32);
  auto ups = split(gradblocks::random_cp(2, 2, 3, rng));
  ups[1].client_id = ups[0].client_id;
  EXPECT_THROW(assemble(ups, 2), ProtocolError);
}

TEST(Aggregator, MatchesStraightLineOracle) {
  Rng rng(33);
  for (int t = 0; t < 20; ++t) {
    Aggregator agg = make_agg(8, 3, 5, rng);
    const PrototypeTensor cp = gradblocks::random_cp(5, 3, 8, rng);
    const AggregationResult r = agg.aggregate(cp);
    const auto o = oracle::aggregate(agg, cp);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(r.global(c, j), o.global[c][j], 1e-9);
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(r.attention.weights(k, c), o.weights[k][c], 1e-9);
    EXPECT_NEAR(server_consistency_loss(r.refined, cp), oracle::server_loss(oracle::to_mat(r.refined), cp, 1e-8),
                1e-12);
    EXPECT_NEAR(agg.consistency_loss(cp).scalar(), oracle::server_loss(oracle::to_mat(r.refined), cp, 1e-8), 1e-12);
  }
}

TEST(Aggregator, WeightsAreMaskedDistributions) {
  Rng rng(34);
  for (int t = 0; t < 50; ++t) {
    Aggregator agg = make_agg(4, 3, 4, rng);
    const PrototypeTensor cp = gradblocks::random_cp(4, 3, 4, rng);
    const AggregationResult r = agg.aggregate(cp);
    for (std::size_t c = 0; c < 3; ++c) {
      const auto holders = cp.clients_with(c);
      EXPECT_EQ(r.class_present[c], !holders.empty());
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        if (cp.present(k, c)) {
          s += r.attention.weights(k, c);
        } else {
          EXPECT_EQ(r.attention.weights(k, c), 0.0);
        }
      }
      if (!holders.empty()) EXPECT_NEAR(s, 1.0, 1e-12);
      if (holders.size() == 1) EXPECT_NEAR(r.attention.weights(holders[0], c), 1.0, 1e-12);
    }
  }
}

// A masked entry's value never influences anything: poisoning it changes nothing.
TEST(Aggregator, MaskedValuesAreInert) {
  Rng rng(35);
  Aggregator agg = make_agg(4, 3, 4, rng);
  PrototypeTensor cp = gradblocks::random_cp(4, 3, 4, rng);
  const AggregationResult before = agg.aggregate(cp);
  for (std::size_t i = 0; i < cp.mask.size(); ++i)
    if (!cp.mask[i])
      for (std::size_t j = 0; j < 4; ++j) cp.values(i, j) = 1e3;
  const AggregationResult after = agg.aggregate(cp);
  EXPECT_EQ(before.global, after.global);
}

TEST(Aggregator, UnknownClientIdRejected) {
  Rng rng(36);
  Aggregator agg = make_agg(4, 2, 2, rng);
  auto ups = split(gradblocks::random_cp(2, 2, 4, rng));
  ups[1].client_id = 5;
  EXPECT_ANY_THROW(agg.aggregate(assemble(ups, 2)));
}

TEST(Aggregator, IdentityCollapsesToMean) {
  Rng rng(37);
  Aggregator agg = make_agg(6, 4, 5, rng);
  agg.make_identity();
  const PrototypeTensor cp = gradblocks::random_cp(5, 4, 6, rng);
  const AggregationResult r = agg.aggregate(cp);
  const AggregationResult u = uniform_average(cp);
  EXPECT_EQ(r.refined, cp.values);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(r.global(c, j), u.global(c, j), 1e-12);
}

TEST(Aggregator, CalibrationSetsGain) {
  Rng rng(38);
  Aggregator agg = make_agg(6, 2, 3, rng);
  const PrototypeTensor cp = gradblocks::random_cp(3, 2, 6, rng);
  const double gain = agg.calibrate_input_scale(cp);
  EXPECT_GT(gain, 0.0);
  for (double g : agg.layer().ln0_gain.value().data()) EXPECT_EQ(g, gain);
}

TEST(Aggregator, ZeroLearningRateLeavesParamsIdentical) {
  Rng rng(39);
  Aggregator agg = make_agg(8, 3, 4, rng);
  Aggregator copy = agg;
  const PrototypeTensor cp = gradblocks::random_cp(4, 3, 8, rng);
  agg.train(cp, 5, 0.0);
  const ParamRefs a = agg.params(), b = copy.params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value(), b[i]->value());
}

TEST(Aggregator, TrainingDoesNotIncreaseLoss) {
  Rng rng(40);
  AggregatorConfig cfg;
  cfg.dim = 8;
  cfg.classes = 3;
  cfg.max_clients = 4;
  Aggregator agg(cfg, rng);
  const PrototypeTensor cp = gradblocks::random_cp(4, 3, 8, rng);
  const double before = agg.consistency_loss(cp).scalar();
  const AggregatorTrainResult r = agg.train(cp, 20, 1e-3);
  EXPECT_FALSE(r.aborted);
  EXPECT_NEAR(r.initial_loss, before, 1e-15);
  EXPECT_LE(r.final_loss, before);
  EXPECT_NEAR(agg.consistency_loss(cp).scalar(), r.final_loss, 1e-12);
}

TEST(ServerLoss, HandComputed) {
  // Two clients agree on class 0; class 1 held by one client.
  PrototypeTensor cp;
  cp.clients = 2;
  cp.classes = 2;
  cp.dim = 2;
  cp.values = Tensor::from_rows({{1, 0}, {0, 1}, {1, 0}, {0, 0}});
  cp.mask = {true, true, true, false};
  cp.counts = {1, 1, 1, 0};
  cp.client_ids = {0, 1};
  // Z orthogonal to the uploads for class 0, aligned for class 1.
  const Tensor z = Tensor::from_rows({{0, 1}, {0, 2}, {0, 1}, {0, 0}});
  EXPECT_NEAR(server_consistency_loss(z, cp), (1.0 + 1.0 + 0.0) / 3.0, 1e-15);
  PrototypeTensor empty = cp;
  empty.mask.assign(4, false);
  EXPECT_THROW(server_consistency_loss(z, empty), DomainError);
}

TEST(GradBlocks, TransformerConsistency) {
  Rng rng(41);
  for (std::size_t d : {4, 8, 16}) EXPECT_LT(gradblocks::transformer_trial(d, rng), 1e-4) << "d=" << d;
}
