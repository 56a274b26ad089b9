#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pspseg/network.hpp"

namespace pspseg {

struct BranchRef {
  std::size_t prm = 0;
  std::size_t branch = 0;
  std::string prm_id;  // informational, e.g. "enc1"

  bool operator==(const BranchRef& o) const { return prm == o.prm && branch == o.branch; }
};
using MaskedSet = std::vector<BranchRef>;

void to_json(nlohmann::json& j, const BranchRef& r);
void from_json(const nlohmann::json& j, BranchRef& r);

// ---------------------------------------------------------------------------
// Lifecycle transitions. Each validates every target before changing any.
// ---------------------------------------------------------------------------

template <class Real>
void apply_mask(Network<Real>& net, const MaskedSet& set);
template <class Real>
void restore_mask(Network<Real>& net, const MaskedSet& set);
// Frees parameters and w of masked branches; returns the number of parameters removed.
template <class Real>
std::int64_t commit_prune(Network<Real>& net, const MaskedSet& set);

// ---------------------------------------------------------------------------
// Calibration and block-wise search
// ---------------------------------------------------------------------------

template <class Real>
struct CalibrationPair {
  Tensor<Real> input;   // x_l
  Tensor<Real> output;  // PRM_l(x_l) with the branch states at capture time
};

template <class Real>
struct CalibrationCache {
  std::uint64_t seed = 0;
  std::vector<std::size_t> sample_ids;
  std::vector<std::vector<CalibrationPair<Real>>> pairs;  // [prm][sample]
};

// Draws `count` ids from [0, dataset_size): without replacement when
// count <= dataset_size, with replacement otherwise.
std::vector<std::size_t> calibration_sample_ids(std::size_t dataset_size, std::size_t count, std::uint64_t seed);

// `load(id)` returns a network input [1,C,D,H,W] for sample id.
template <class Real>
CalibrationCache<Real> build_calibration_cache(const Network<Real>& net, std::size_t dataset_size, std::size_t count,
                                               std::uint64_t seed,
                                               const std::function<Tensor<Real>(std::size_t)>& load);

struct DiscrepancyRecord {
  std::string prm_id;
  std::vector<std::size_t> subset;  // branch indices, ascending
  double discrepancy = 0;
};

struct PrmSearchResult {
  std::size_t prm = 0;
  std::string prm_id;
  bool skipped = false;  // fewer than p + 1 active branches
  std::vector<std::size_t> best_subset;
  double best_discrepancy = 0;
  std::vector<DiscrepancyRecord> candidates;  // enumeration order
};

struct PruneProposal {
  int p = 0;
  MaskedSet masked;
  std::vector<PrmSearchResult> prms;

  std::vector<std::string> skipped_ids() const;
};

// Sum over calibration pairs of || PRM with `subset` masked (x) - cached output ||_F.
template <class Real>
double subset_discrepancy(const Prm<Real>& prm, const std::vector<CalibrationPair<Real>>& pairs,
                          const std::vector<std::size_t>& subset);

// Per PRM, every p-subset of its active branches in lexicographic order; the
// first subset with the smallest discrepancy wins.
template <class Real>
PruneProposal blockwise_prune_search(const Network<Real>& net, const CalibrationCache<Real>& cache, int p);

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

// floor_epoch: epoch of the latest pruning event (0 when none). Histories are
// 1-based: history[e - 1] is the value of epoch e. Converged when the last
// `window` epochs all lie after floor_epoch and, for both series, no epoch
// after the window start drops below the minimum reached by the window start.
bool convergence_check(const std::vector<double>& tr_history, const std::vector<double>& rl_history, int window,
                       int floor_epoch);

enum class Improvement { Maintained, OverPruned };
Improvement improvement_check(double current_fd, double best_fd, double threshold = 0.01);

enum class Phase { Stable, Masked };
enum class EventKind { Init, Mask, Commit, Restore, Terminated };

std::string_view to_string(Phase phase);
std::string_view to_string(EventKind kind);
EventKind parse_event_kind(std::string_view text);

struct ControllerEvent {
  int epoch = 0;
  EventKind kind = EventKind::Mask;
  int p = 0;  // prune step after the event
  MaskedSet masked_set;
  double fd = 0;
  double best_fd = std::numeric_limits<double>::infinity();
  std::vector<std::string> skipped;  // PRMs the search left alone
  std::int64_t parameters_removed = 0;
  nlohmann::json architecture;  // Init only: prm ids, branch states, epoch budget
};

void to_json(nlohmann::json& j, const ControllerEvent& e);
void from_json(const nlohmann::json& j, ControllerEvent& e);

struct ControllerConfig {
  int window = 10;
  double threshold = 0.01;
};

struct ControllerState {
  int p = 1;
  double best_tr = std::numeric_limits<double>::infinity();
  double best_rl = std::numeric_limits<double>::infinity();
  // fd reference: the smallest fd seen at a Mask event.
  double best_fd = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  int last_event_epoch = 0;
  Phase phase = Phase::Stable;
  MaskedSet masked_set;
  std::vector<double> tr_history, rl_history;
  std::vector<ControllerEvent> events;

  bool finished() const { return p == 0; }
};

void to_json(nlohmann::json& j, const ControllerState& s);
void from_json(const nlohmann::json& j, ControllerState& s);

template <class Real>
using CacheBuilder = std::function<CalibrationCache<Real>(const Network<Real>&)>;

// One controller tick after an epoch of training. Returns the events emitted
// this epoch (also appended to state.events).
template <class Real>
std::vector<ControllerEvent> controller_step(ControllerState& state, int epoch, double tr, double rl,
                                             Network<Real>& net, const CacheBuilder<Real>& cache_builder,
                                             const ControllerConfig& config = {});

}  // namespace pspseg
