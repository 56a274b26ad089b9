#pragma once

// Scripted FD-loss series with hand-derived controller event logs. The
// expectations were worked out on paper from the controller rules (window,
// floor epoch, threshold), not by running the controller.

#include <cmath>
#include <string>
#include <vector>

#include "pspseg/network.hpp"
#include "pspseg/pruning.hpp"
#include "pspseg/rng.hpp"

namespace pspseg::testing {

struct ExpectedEvent {
  int epoch;
  EventKind kind;
  int p;
};

struct ControllerScenario {
  std::string name;
  int initial_p = 1;
  std::size_t branches = 4;
  ControllerConfig config{3, 0.0625};
  std::vector<double> tr, rl;
  std::vector<ExpectedEvent> expected;
};

inline std::vector<double> repeat(double v, int n) { return std::vector<double>(static_cast<std::size_t>(n), v); }

inline std::vector<double> concat(std::vector<double> a, const std::vector<double>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::vector<ControllerScenario> controller_scenarios() {
  using K = EventKind;
  std::vector<ControllerScenario> s;
  {
    // flat from the start: mask once the first window fills, commit one window later
    ControllerScenario c{"mask_then_commit"};
    c.tr = repeat(0.25, 9);
    c.rl = repeat(0.5, 9);
    c.expected = {{3, K::Mask, 1}, {6, K::Commit, 1}};
    s.push_back(c);
  }
  {
    ControllerScenario c{"restore_to_termination"};
    c.tr = repeat(0.25, 8);
    c.rl = concat(repeat(0.5, 3), repeat(0.625, 5));  // fd 0.875 > 0.75 + 0.0625
    c.expected = {{3, K::Mask, 1}, {6, K::Restore, 0}, {6, K::Terminated, 0}};
    s.push_back(c);
  }
  {
    ControllerScenario c{"restore_then_smaller_step"};
    c.initial_p = 2;
    c.tr = repeat(0.25, 12);
    c.rl = concat(concat(repeat(0.5, 3), repeat(0.625, 3)), repeat(0.4375, 6));
    c.expected = {{3, K::Mask, 2}, {6, K::Restore, 1}, {9, K::Mask, 1}, {12, K::Commit, 1}};
    s.push_back(c);
  }
  {
    ControllerScenario c{"rl_still_falling"};
    c.tr = repeat(0.25, 8);
    for (int e = 1; e <= 8; ++e) c.rl.push_back(1.0 - e / 16.0);
    s.push_back(c);
  }
  {
    ControllerScenario c{"tr_still_falling"};
    for (int e = 1; e <= 8; ++e) c.tr.push_back(0.5 - e / 32.0);
    c.rl = repeat(0.5, 8);
    s.push_back(c);
  }
  {
    ControllerScenario c{"threshold_boundary_commits"};
    c.tr = repeat(0.25, 6);
    c.rl = concat(repeat(0.5, 3), repeat(0.5625, 3));  // fd 0.8125 == best + threshold
    c.expected = {{3, K::Mask, 1}, {6, K::Commit, 1}};
    s.push_back(c);
  }
  {
    ControllerScenario c{"just_over_threshold_restores"};
    c.tr = repeat(0.25, 6);
    c.rl = concat(repeat(0.5, 3), repeat(0.5625 + std::ldexp(1.0, -20), 3));
    c.expected = {{3, K::Mask, 1}, {6, K::Restore, 0}, {6, K::Terminated, 0}};
    s.push_back(c);
  }
  {
    // p = 4 leaves no PRM with a spare branch: the first attempt only lowers p
    ControllerScenario c{"empty_proposal_decrements"};
    c.initial_p = 4;
    c.tr = repeat(0.25, 9);
    c.rl = repeat(0.5, 9);
    c.expected = {{6, K::Mask, 3}, {9, K::Commit, 3}};
    s.push_back(c);
  }
  {
    ControllerScenario c{"second_round_after_commit"};
    c.tr = repeat(0.25, 12);
    c.rl = concat(repeat(0.5, 6), repeat(0.375, 6));
    c.expected = {{3, K::Mask, 1}, {6, K::Commit, 1}, {9, K::Mask, 1}, {12, K::Commit, 1}};
    s.push_back(c);
  }
  {
    ControllerScenario c{"single_branch_terminates"};
    c.branches = 1;
    c.tr = repeat(0.25, 6);
    c.rl = repeat(0.5, 6);
    c.expected = {{3, K::Terminated, 0}};
    s.push_back(c);
  }
  {
    ControllerScenario c{"default_window"};
    c.config = ControllerConfig{};
    c.tr = repeat(0.25, 20);
    c.rl = repeat(0.5, 20);
    c.expected = {{10, K::Mask, 1}, {20, K::Commit, 1}};
    s.push_back(c);
  }
  return s;
}

inline ModelConfig scenario_model(std::size_t branches) {
  ModelConfig m;
  m.depth = 2;
  m.channels = {2, 4};
  const std::vector<Index3> pool{{1, 1, 1}, {1, 3, 3}, {3, 1, 3}, {3, 3, 1}};
  for (std::size_t k = 0; k < branches; ++k) m.kernels.push_back(pool[k]);
  return m;
}

struct ScenarioOutcome {
  std::vector<ControllerEvent> events;
  std::string mismatch;  // empty when the log matches
};

inline ScenarioOutcome run_scenario(const ControllerScenario& sc) {
  auto net = Network<double>::build(scenario_model(sc.branches), 11);
  const CacheBuilder<double> builder = [](const Network<double>& n) {
    return build_calibration_cache<double>(n, 4, 2, 5, [](std::size_t id) {
      Philox rng(3, id);
      Tensor<double> x(Shape{1, 1, 4, 4, 4});
      for (auto& v : x.data()) v = rng.uniform(-1, 1);
      return x;
    });
  };
  ControllerState state;
  state.p = sc.initial_p;
  ScenarioOutcome out;
  MaskedSet last_mask;
  for (std::size_t e = 0; e < sc.tr.size(); ++e) {
    const auto ev = controller_step<double>(state, static_cast<int>(e + 1), sc.tr[e], sc.rl[e], net, builder, sc.config);
    for (const auto& x : ev) {
      out.events.push_back(x);
      if (x.kind == EventKind::Mask) {
        last_mask = x.masked_set;
        if (x.best_fd != x.fd) out.mismatch += "Mask best_fd differs from fd; ";
      }
      if ((x.kind == EventKind::Commit || x.kind == EventKind::Restore) && !(x.masked_set == last_mask)) {
        out.mismatch += std::string(to_string(x.kind)) + " at epoch " + std::to_string(x.epoch) +
                        " does not act on the masked set; ";
      }
      if (x.kind == EventKind::Commit) {
        for (std::size_t i = 0; i < net.prm_count(); ++i) {
          if (net.prm(i).count(BranchState::Pruned) == 0) continue;
          if (net.prm(i).count(BranchState::Masked) != 0) out.mismatch += "masked branch left after commit; ";
        }
      }
    }
  }
  if (out.events.size() != sc.expected.size()) {
    out.mismatch += "expected " + std::to_string(sc.expected.size()) + " events, got " +
                    std::to_string(out.events.size()) + "; ";
  }
  for (std::size_t k = 0; k < std::min(out.events.size(), sc.expected.size()); ++k) {
    const auto& got = out.events[k];
    const auto& want = sc.expected[k];
    if (got.epoch != want.epoch || got.kind != want.kind || got.p != want.p) {
      out.mismatch += "event " + std::to_string(k) + ": got " + std::string(to_string(got.kind)) + "@" +
                      std::to_string(got.epoch) + " p=" + std::to_string(got.p) + ", want " +
                      std::string(to_string(want.kind)) + "@" + std::to_string(want.epoch) + " p=" +
                      std::to_string(want.p) + "; ";
    }
  }
  if (!(state.events.size() == out.events.size())) out.mismatch += "state.events out of sync; ";
  return out;
}

}  // namespace pspseg::testing
