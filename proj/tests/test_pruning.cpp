#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "pspseg/errors.hpp"
#include "pspseg/pruning.hpp"
#include "support/controller_scenarios.hpp"
#include "support/gradcheck.hpp"

using namespace pspseg;
using pspseg::testing::ControllerScenario;
using pspseg::testing::repeat;

// ---------------------------------------------------------------------------
// convergence / improvement
// ---------------------------------------------------------------------------

TEST(Convergence, StrictlyDecreasingTrIsNotConverged) {
  std::vector<double> tr, rl = repeat(1.0, 12);
  for (int e = 0; e < 12; ++e) tr.push_back(1.0 - 0.01 * e);
  EXPECT_FALSE(convergence_check(tr, rl, 10, 0));
}

TEST(Convergence, FlatForTenEpochsConverges) {
  EXPECT_TRUE(convergence_check(repeat(0.3, 10), repeat(0.7, 10), 10, 0));
  EXPECT_FALSE(convergence_check(repeat(0.3, 9), repeat(0.7, 9), 10, 0));
}

TEST(Convergence, RlImprovingAtWindowEpochSevenIsNotConverged) {
  auto rl = repeat(0.7, 10);
  rl[6] = 0.69;
  EXPECT_FALSE(convergence_check(repeat(0.3, 10), rl, 10, 0));
}

TEST(Convergence, WindowClippedAtFloor) {
  // 12 flat epochs, but a pruning event at epoch 5 leaves only 7 usable
  EXPECT_FALSE(convergence_check(repeat(0.3, 12), repeat(0.7, 12), 10, 5));
  EXPECT_TRUE(convergence_check(repeat(0.3, 15), repeat(0.7, 15), 10, 5));
}

TEST(Convergence, ReferenceIsBestBeforeWindowStart) {
  // epoch 2 is a low outlier; later values never get below it
  std::vector<double> tr{0.5, 0.1, 0.4, 0.3, 0.35, 0.2};
  EXPECT_TRUE(convergence_check(tr, repeat(1.0, 6), 3, 0));
  // with the floor past the outlier, epoch 6 is a new low
  EXPECT_FALSE(convergence_check(tr, repeat(1.0, 6), 3, 2));
}

TEST(Improvement, Boundaries) {
  EXPECT_EQ(improvement_check(0.5, 0.5), Improvement::Maintained);
  EXPECT_EQ(improvement_check(0.52, 0.5), Improvement::OverPruned);
  // exactly representable boundary: best + threshold is not over-pruned
  EXPECT_EQ(improvement_check(0.75, 0.5, 0.25), Improvement::Maintained);
  EXPECT_EQ(improvement_check(std::nextafter(0.75, 1.0), 0.5, 0.25), Improvement::OverPruned);
}

// ---------------------------------------------------------------------------
// controller scenarios
// ---------------------------------------------------------------------------

class ControllerScenarios : public ::testing::TestWithParam<ControllerScenario> {};

TEST_P(ControllerScenarios, EventLogMatchesHandWalk) {
  const auto out = pspseg::testing::run_scenario(GetParam());
  EXPECT_TRUE(out.mismatch.empty()) << out.mismatch;
}

INSTANTIATE_TEST_SUITE_P(Scripted, ControllerScenarios, ::testing::ValuesIn(pspseg::testing::controller_scenarios()),
                         [](const auto& info) { return info.param.name; });

TEST(Controller, PostMaskFdFivePointsAboveBestRestoresAndDecrements) {
  ControllerScenario c{"restore_p2"};
  c.initial_p = 2;
  c.config = {3, 0.01};
  c.tr = repeat(0.25, 6);
  c.rl = pspseg::testing::concat(repeat(0.5, 3), repeat(0.55, 3));
  c.expected = {{3, EventKind::Mask, 2}, {6, EventKind::Restore, 1}};
  const auto out = pspseg::testing::run_scenario(c);
  EXPECT_TRUE(out.mismatch.empty()) << out.mismatch;
}

TEST(Controller, FinishedStateIsANoOp) {
  auto net = Network<double>::build(pspseg::testing::scenario_model(4), 1);
  ControllerState s;
  s.p = 0;
  int builds = 0;
  const CacheBuilder<double> builder = [&](const Network<double>&) {
    ++builds;
    return CalibrationCache<double>{};
  };
  for (int e = 1; e <= 20; ++e) EXPECT_TRUE(controller_step<double>(s, e, 0.1, 0.1, net, builder, {3, 0.01}).empty());
  EXPECT_EQ(builds, 0);
}

TEST(Controller, StateJsonRoundTrip) {
  ControllerState s;
  s.p = 2;
  s.best_fd = 0.5;
  s.phase = Phase::Masked;
  s.masked_set = {{1, 2, "enc1"}};
  s.tr_history = {0.1, 0.2};
  s.rl_history = {0.3, 0.4};
  ControllerEvent e;
  e.epoch = 3;
  e.p = 2;
  e.fd = 0.5;
  e.best_fd = 0.5;
  s.events.push_back(e);
  const nlohmann::json j = s;
  const auto back = j.get<ControllerState>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.phase, Phase::Masked);
  EXPECT_TRUE(std::isinf(back.best_tr));
}

TEST(Controller, EventJsonWritesInfiniteBestAsNull) {
  ControllerEvent e;
  e.kind = EventKind::Terminated;
  const nlohmann::json j = e;
  EXPECT_TRUE(j.at("best_fd").is_null());
  EXPECT_EQ(j.at("event"), "Terminated");
  EXPECT_TRUE(std::isinf(j.get<ControllerEvent>().best_fd));
  EXPECT_THROW(parse_event_kind("Prune"), ConfigError);
}

// ---------------------------------------------------------------------------
// calibration and search
// ---------------------------------------------------------------------------

TEST(Calibration, WithoutReplacementWhenDatasetIsLargeEnough) {
  const auto ids = calibration_sample_ids(20, 16, 7);
  ASSERT_EQ(ids.size(), 16u);
  EXPECT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 16u);
  for (auto i : ids) EXPECT_LT(i, 20u);
  EXPECT_EQ(ids, calibration_sample_ids(20, 16, 7));
  EXPECT_NE(ids, calibration_sample_ids(20, 16, 8));
}

TEST(Calibration, WithReplacementWhenDatasetIsSmall) {
  const auto ids = calibration_sample_ids(3, 10, 1);
  ASSERT_EQ(ids.size(), 10u);
  for (auto i : ids) EXPECT_LT(i, 3u);
}

TEST(Calibration, Errors) {
  EXPECT_THROW(calibration_sample_ids(0, 4, 1), DataError);
  auto net = Network<double>::build(pspseg::testing::scenario_model(2), 1);
  EXPECT_THROW(build_calibration_cache<double>(net, 4, 0, 1, [](std::size_t) { return Tensor<double>(); }),
               ConfigError);
}

namespace {

CalibrationCache<double> small_cache(const Network<double>& net) {
  return build_calibration_cache<double>(net, 4, 3, 9, [](std::size_t id) {
    Philox rng(21, id);
    return pspseg::testing::random_tensor({1, 1, 4, 4, 4}, rng);
  });
}

}  // namespace

TEST(Search, CacheHoldsOnePairPerPrmAndSample) {
  auto net = Network<double>::build(pspseg::testing::scenario_model(4), 3);
  const auto cache = small_cache(net);
  ASSERT_EQ(cache.pairs.size(), net.prm_count());
  for (std::size_t i = 0; i < net.prm_count(); ++i) {
    ASSERT_EQ(cache.pairs[i].size(), 3u);
    NoGradGuard g;
    const auto again = prm_forward(net.prm(i), cache.pairs[i][0].input);
    for (std::int64_t k = 0; k < again.numel(); ++k) EXPECT_EQ(again.ptr()[k], cache.pairs[i][0].output.ptr()[k]);
  }
}

TEST(Search, EmptySubsetHasZeroDiscrepancy) {
  auto net = Network<double>::build(pspseg::testing::scenario_model(4), 3);
  const auto cache = small_cache(net);
  EXPECT_EQ(subset_discrepancy(net.prm(0), cache.pairs[0], {}), 0.0);
  EXPECT_GT(subset_discrepancy(net.prm(0), cache.pairs[0], {1}), 0.0);
}

TEST(Search, ExactTieGoesToFirstSubset) {
  auto net = Network<double>::build(pspseg::testing::scenario_model(4), 3);
  // zero-weight branches add nothing, so dropping either costs exactly zero
  net.prm(1).branches[1].weight.data()[0] = 0;
  net.prm(1).branches[3].weight.data()[0] = 0;
  const auto prop = blockwise_prune_search(net, small_cache(net), 1);
  const auto& r = prop.prms[1];
  ASSERT_EQ(r.candidates.size(), 4u);
  EXPECT_EQ(r.candidates[1].discrepancy, 0.0);
  EXPECT_EQ(r.candidates[3].discrepancy, 0.0);
  EXPECT_EQ(r.best_subset, (std::vector<std::size_t>{1}));
}

TEST(Search, SkipsPrmsWithoutSpareBranches) {
  auto net = Network<double>::build(pspseg::testing::scenario_model(4), 3);
  apply_mask(net, {{0, 0, "enc0"}, {0, 1, "enc0"}});
  commit_prune(net, {{0, 0, "enc0"}, {0, 1, "enc0"}});
  const auto prop = blockwise_prune_search(net, small_cache(net), 2);
  EXPECT_TRUE(prop.prms[0].skipped);
  EXPECT_EQ(prop.skipped_ids(), (std::vector<std::string>{"enc0"}));
  EXPECT_EQ(prop.masked.size(), 2u * (net.prm_count() - 1));
  EXPECT_THROW(blockwise_prune_search(net, small_cache(net), 0), ContractError);
}

TEST(Search, CandidatesFollowLexicographicOrder) {
  auto net = Network<double>::build(pspseg::testing::scenario_model(4), 3);
  const auto prop = blockwise_prune_search(net, small_cache(net), 2);
  const auto& c = prop.prms[2].candidates;
  ASSERT_EQ(c.size(), 6u);
  const std::vector<std::vector<std::size_t>> want{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(c[k].subset, want[k]);
  const auto best = std::min_element(c.begin(), c.end(), [](const auto& a, const auto& b) {
    return a.discrepancy < b.discrepancy;
  });
  EXPECT_EQ(prop.prms[2].best_subset, best->subset);
}
