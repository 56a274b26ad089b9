#include "pspseg/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pspseg/errors.hpp"
#include "pspseg/rng.hpp"

namespace pspseg {

namespace {

constexpr std::uint32_t kCalibrationStream = 0xca1b;

template <class Real>
Branch<Real>& branch_at(Network<Real>& net, const BranchRef& r) {
  if (r.prm >= net.prm_count()) throw LifecycleError("no PRM with index " + std::to_string(r.prm));
  auto& prm = net.prm(r.prm);
  if (r.branch >= prm.branches.size()) {
    throw LifecycleError(prm.id + " has no branch " + std::to_string(r.branch));
  }
  return prm.branches[r.branch];
}

std::string describe(const BranchRef& r) { return "PRM " + std::to_string(r.prm) + " branch " + std::to_string(r.branch); }

template <class Real>
void require_state(Network<Real>& net, const MaskedSet& set, BranchState expected, const char* op) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto state = branch_at(net, set[i]).state;
    if (state != expected) {
      throw LifecycleError(std::string(op) + ": " + describe(set[i]) + " is " + std::string(to_string(state)) +
                           ", expected " + std::string(to_string(expected)));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (set[j] == set[i]) throw LifecycleError(std::string(op) + ": duplicate " + describe(set[i]));
    }
  }
}

double json_number_or_inf(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace

void to_json(nlohmann::json& j, const BranchRef& r) { j = {{"prm", r.prm}, {"prm_id", r.prm_id}, {"branch", r.branch}}; }

void from_json(const nlohmann::json& j, BranchRef& r) {
  r.prm = j.at("prm").get<std::size_t>();
  r.branch = j.at("branch").get<std::size_t>();
  r.prm_id = j.value("prm_id", std::string{});
}

template <class Real>
void apply_mask(Network<Real>& net, const MaskedSet& set) {
  require_state(net, set, BranchState::Active, "apply_mask");
  for (const auto& r : set) branch_at(net, r).state = BranchState::Masked;
}

template <class Real>
void restore_mask(Network<Real>& net, const MaskedSet& set) {
  require_state(net, set, BranchState::Masked, "restore_mask");
  for (const auto& r : set) branch_at(net, r).state = BranchState::Active;
}

template <class Real>
std::int64_t commit_prune(Network<Real>& net, const MaskedSet& set) {
  require_state(net, set, BranchState::Masked, "commit_prune");
  std::int64_t removed = 0;
  for (const auto& r : set) {
    auto& br = branch_at(net, r);
    removed += br.parameter_count();
    br.params.reset();
    br.weight = Tensor<Real>();
    br.state = BranchState::Pruned;
  }
  return removed;
}

std::vector<std::size_t> calibration_sample_ids(std::size_t dataset_size, std::size_t count, std::uint64_t seed) {
  if (dataset_size == 0) throw DataError("calibration needs a non-empty dataset");
  Philox rng(seed, stream_id(kCalibrationStream));
  std::vector<std::size_t> ids;
  ids.reserve(count);
  if (count <= dataset_size) {
    std::vector<std::size_t> pool(dataset_size);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(dataset_size - i));
      std::swap(pool[i], pool[j]);
      ids.push_back(pool[i]);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) ids.push_back(static_cast<std::size_t>(rng.below(dataset_size)));
  }
  return ids;
}

template <class Real>
CalibrationCache<Real> build_calibration_cache(const Network<Real>& net, std::size_t dataset_size, std::size_t count,
                                               std::uint64_t seed,
                                               const std::function<Tensor<Real>(std::size_t)>& load) {
  if (count == 0) throw ConfigError("calibration count must be positive");
  CalibrationCache<Real> cache;
  cache.seed = seed;
  cache.sample_ids = calibration_sample_ids(dataset_size, count, seed);
  cache.pairs.resize(net.prm_count());
  NoGradGuard no_grad;
  PrmObserver<Real> observer = [&](std::size_t i, const Tensor<Real>& in, const Tensor<Real>& out) {
    cache.pairs[i].push_back({in, out});
  };
  for (auto id : cache.sample_ids) net.forward(load(id), &observer);
  return cache;
}

std::vector<std::string> PruneProposal::skipped_ids() const {
  std::vector<std::string> ids;
  for (const auto& r : prms) {
    if (r.skipped) ids.push_back(r.prm_id);
  }
  return ids;
}

namespace {

// w_i * EB_i(x) for every active branch, per calibration pair, computed with
// the same operators prm_forward uses.
template <class Real>
struct Contributions {
  std::vector<std::size_t> active;               // branch indices, ascending
  std::vector<std::vector<Tensor<Real>>> terms;  // [pair][k] for active[k]
};

template <class Real>
Contributions<Real> contributions(const Prm<Real>& prm, const std::vector<CalibrationPair<Real>>& pairs) {
  Contributions<Real> c;
  for (std::size_t b = 0; b < prm.branches.size(); ++b) {
    if (prm.branches[b].state == BranchState::Active) c.active.push_back(b);
  }
  NoGradGuard no_grad;
  for (const auto& pair : pairs) {
    std::vector<Tensor<Real>> t;
    for (auto b : c.active) {
      const auto& br = prm.branches[b];
      t.push_back(scalar_multiply(eb_forward(br, pair.input), br.weight));
    }
    c.terms.push_back(std::move(t));
  }
  return c;
}

// Rebuilds x + sum of kept terms in branch order, exactly as prm_forward adds
// them, and accumulates the Frobenius distance to the cached output.
template <class Real>
double discrepancy(const Contributions<Real>& c, const std::vector<CalibrationPair<Real>>& pairs,
                   const std::vector<char>& kept) {
  double total = 0;
  std::vector<const Real*> srcs;
  for (std::size_t s = 0; s < pairs.size(); ++s) {
    srcs.clear();
    for (std::size_t k = 0; k < c.active.size(); ++k) {
      if (kept[k]) srcs.push_back(c.terms[s][k].ptr());
    }
    const Real* x = pairs[s].input.ptr();
    const Real* y = pairs[s].output.ptr();
    const std::int64_t m = pairs[s].input.numel();
    double sq = 0;
    for (std::int64_t j = 0; j < m; ++j) {
      Real v = x[j];
      for (const Real* p : srcs) v = v + p[j];
      const double d = static_cast<double>(v) - static_cast<double>(y[j]);
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return total;
}

// Advances idx (strictly increasing, values < n) to the next combination in
// lexicographic order; false after the last one.
bool next_combination(std::vector<std::size_t>& idx, std::size_t n) {
  const std::size_t k = idx.size();
  for (std::size_t i = k; i-- > 0;) {
    if (idx[i] < n - k + i) {
      ++idx[i];
      for (std::size_t j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
      return true;
    }
  }
  return false;
}

}  // namespace

template <class Real>
double subset_discrepancy(const Prm<Real>& prm, const std::vector<CalibrationPair<Real>>& pairs,
                          const std::vector<std::size_t>& subset) {
  const auto c = contributions(prm, pairs);
  std::vector<char> kept(c.active.size(), 1);
  for (auto b : subset) {
    const auto it = std::find(c.active.begin(), c.active.end(), b);
    if (it == c.active.end()) throw LifecycleError(prm.id + " branch " + std::to_string(b) + " is not active");
    kept[static_cast<std::size_t>(it - c.active.begin())] = 0;
  }
  return discrepancy(c, pairs, kept);
}

template <class Real>
PruneProposal blockwise_prune_search(const Network<Real>& net, const CalibrationCache<Real>& cache, int p) {
  if (p < 1) throw ContractError("blockwise_prune_search needs p >= 1, got " + std::to_string(p));
  if (cache.pairs.size() != net.prm_count()) throw ContractError("calibration cache does not match the network");
  PruneProposal proposal;
  proposal.p = p;
  const auto k = static_cast<std::size_t>(p);
  for (std::size_t i = 0; i < net.prm_count(); ++i) {
    const auto& prm = net.prm(i);
    PrmSearchResult res;
    res.prm = i;
    res.prm_id = prm.id;
    if (prm.count(BranchState::Active) <= k) {
      res.skipped = true;
      proposal.prms.push_back(std::move(res));
      continue;
    }
    const auto& pairs = cache.pairs[i];
    if (pairs.empty()) throw ContractError("no calibration pairs for " + prm.id);
    const auto c = contributions(prm, pairs);
    const std::size_t n = c.active.size();
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    bool first = true;
    do {
      std::vector<char> kept(n, 1);
      std::vector<std::size_t> subset;
      for (auto t : idx) {
        kept[t] = 0;
        subset.push_back(c.active[t]);
      }
      const double d = discrepancy(c, pairs, kept);
      if (first || d < res.best_discrepancy) {
        res.best_discrepancy = d;
        res.best_subset = subset;
        first = false;
      }
      res.candidates.push_back({prm.id, std::move(subset), d});
    } while (next_combination(idx, n));
    for (auto b : res.best_subset) proposal.masked.push_back({i, b, prm.id});
    proposal.prms.push_back(std::move(res));
  }
  return proposal;
}

// ---------------------------------------------------------------------------

bool convergence_check(const std::vector<double>& tr_history, const std::vector<double>& rl_history, int window,
                       int floor_epoch) {
  if (window < 1) throw ContractError("convergence window must be positive");
  if (tr_history.size() != rl_history.size()) throw ContractError("TR and RL histories differ in length");
  const int last = static_cast<int>(tr_history.size());
  const int start = last - window + 1;  // first epoch of the window
  if (start <= floor_epoch) return false;
  auto stalled = [&](const std::vector<double>& h) {
    double ref = std::numeric_limits<double>::infinity();
    for (int e = floor_epoch + 1; e <= start; ++e) ref = std::min(ref, h[static_cast<std::size_t>(e - 1)]);
    for (int e = start + 1; e <= last; ++e) {
      if (h[static_cast<std::size_t>(e - 1)] < ref) return false;
    }
    return true;
  };
  return stalled(tr_history) && stalled(rl_history);
}

Improvement improvement_check(double current_fd, double best_fd, double threshold) {
  return current_fd > best_fd + threshold ? Improvement::OverPruned : Improvement::Maintained;
}

std::string_view to_string(Phase phase) { return phase == Phase::Stable ? "Stable" : "Masked"; }

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::Init: return "Init";
    case EventKind::Mask: return "Mask";
    case EventKind::Commit: return "Commit";
    case EventKind::Restore: return "Restore";
    case EventKind::Terminated: return "Terminated";
  }
  return "?";
}

EventKind parse_event_kind(std::string_view text) {
  for (auto k : {EventKind::Init, EventKind::Mask, EventKind::Commit, EventKind::Restore, EventKind::Terminated}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown event '" + std::string(text) + "'");
}

void to_json(nlohmann::json& j, const ControllerEvent& e) {
  j = {{"epoch", e.epoch},
       {"event", std::string(to_string(e.kind))},
       {"p", e.p},
       {"masked_set", e.masked_set},
       {"fd", finite_or_null(e.fd)},
       {"best_fd", finite_or_null(e.best_fd)}};
  if (!e.skipped.empty()) j["skipped"] = e.skipped;
  if (e.parameters_removed != 0) j["parameters_removed"] = e.parameters_removed;
  if (!e.architecture.is_null()) j["architecture"] = e.architecture;
}

void from_json(const nlohmann::json& j, ControllerEvent& e) {
  e = ControllerEvent{};
  e.epoch = j.at("epoch").get<int>();
  e.kind = parse_event_kind(j.at("event").get<std::string>());
  e.p = j.at("p").get<int>();
  e.masked_set = j.at("masked_set").get<MaskedSet>();
  e.fd = json_number_or_inf(j.at("fd"));
  e.best_fd = json_number_or_inf(j.at("best_fd"));
  e.skipped = j.value("skipped", std::vector<std::string>{});
  e.parameters_removed = j.value("parameters_removed", std::int64_t{0});
  if (j.contains("architecture")) e.architecture = j.at("architecture");
}

void to_json(nlohmann::json& j, const ControllerState& s) {
  j = {{"p", s.p},
       {"best_tr", finite_or_null(s.best_tr)},
       {"best_rl", finite_or_null(s.best_rl)},
       {"best_fd", finite_or_null(s.best_fd)},
       {"epochs_since_improvement", s.epochs_since_improvement},
       {"last_event_epoch", s.last_event_epoch},
       {"phase", std::string(to_string(s.phase))},
       {"masked_set", s.masked_set},
       {"tr_history", s.tr_history},
       {"rl_history", s.rl_history},
       {"events", s.events}};
}

void from_json(const nlohmann::json& j, ControllerState& s) {
  s = ControllerState{};
  s.p = j.at("p").get<int>();
  s.best_tr = json_number_or_inf(j.at("best_tr"));
  s.best_rl = json_number_or_inf(j.at("best_rl"));
  s.best_fd = json_number_or_inf(j.at("best_fd"));
  s.epochs_since_improvement = j.at("epochs_since_improvement").get<int>();
  s.last_event_epoch = j.at("last_event_epoch").get<int>();
  const auto phase = j.at("phase").get<std::string>();
  if (phase != "Stable" && phase != "Masked") throw ConfigError("unknown controller phase '" + phase + "'");
  s.phase = phase == "Stable" ? Phase::Stable : Phase::Masked;
  s.masked_set = j.at("masked_set").get<MaskedSet>();
  s.tr_history = j.at("tr_history").get<std::vector<double>>();
  s.rl_history = j.at("rl_history").get<std::vector<double>>();
  s.events = j.at("events").get<std::vector<ControllerEvent>>();
}

template <class Real>
std::vector<ControllerEvent> controller_step(ControllerState& state, int epoch, double tr, double rl,
                                             Network<Real>& net, const CacheBuilder<Real>& cache_builder,
                                             const ControllerConfig& config) {
  if (epoch != static_cast<int>(state.tr_history.size()) + 1) {
    throw ContractError("controller_step expected epoch " + std::to_string(state.tr_history.size() + 1) + ", got " +
                        std::to_string(epoch));
  }
  if (!std::isfinite(tr) || !std::isfinite(rl)) throw NumericError("controller received a non-finite FD loss");
  state.tr_history.push_back(tr);
  state.rl_history.push_back(rl);
  const bool improved = tr < state.best_tr || rl < state.best_rl;
  state.best_tr = std::min(state.best_tr, tr);
  state.best_rl = std::min(state.best_rl, rl);
  state.epochs_since_improvement = improved ? 0 : state.epochs_since_improvement + 1;

  std::vector<ControllerEvent> events;
  const double fd = tr + rl;
  auto emit = [&](EventKind kind, MaskedSet set) -> ControllerEvent& {
    ControllerEvent e;
    e.epoch = epoch;
    e.kind = kind;
    e.masked_set = std::move(set);
    e.fd = fd;
    events.push_back(std::move(e));
    return events.back();
  };
  auto finish = [&] {
    for (auto& e : events) {
      if (e.kind != EventKind::Terminated) continue;
      e.p = state.p;
      e.best_fd = state.best_fd;
    }
    state.events.insert(state.events.end(), events.begin(), events.end());
    return events;
  };
  auto decrement = [&] {
    state.p -= 1;
    if (state.p == 0) emit(EventKind::Terminated, {});
  };

  if (state.p == 0) return finish();
  if (!convergence_check(state.tr_history, state.rl_history, config.window, state.last_event_epoch)) return finish();

  if (state.phase == Phase::Masked) {
    if (improvement_check(fd, state.best_fd, config.threshold) == Improvement::Maintained) {
      const auto removed = commit_prune(net, state.masked_set);
      auto& e = emit(EventKind::Commit, state.masked_set);
      e.p = state.p;
      e.best_fd = state.best_fd;
      e.parameters_removed = removed;
      state.masked_set.clear();
      state.phase = Phase::Stable;
      state.last_event_epoch = epoch;
    } else {
      restore_mask(net, state.masked_set);
      const std::size_t at = events.size();
      emit(EventKind::Restore, state.masked_set).best_fd = state.best_fd;
      state.masked_set.clear();
      state.phase = Phase::Stable;
      state.last_event_epoch = epoch;
      state.p -= 1;
      events[at].p = state.p;
      if (state.p == 0) emit(EventKind::Terminated, {});
      return finish();
    }
  }

  if (state.phase == Phase::Stable && fd < state.best_fd) {
    const auto cache = cache_builder(net);
    const auto proposal = blockwise_prune_search(net, cache, state.p);
    state.last_event_epoch = epoch;
    if (proposal.masked.empty()) {
      decrement();
      return finish();
    }
    apply_mask(net, proposal.masked);
    state.best_fd = std::min(state.best_fd, fd);
    state.masked_set = proposal.masked;
    state.phase = Phase::Masked;
    auto& e = emit(EventKind::Mask, proposal.masked);
    e.p = state.p;
    e.best_fd = state.best_fd;
    e.skipped = proposal.skipped_ids();
  }
  return finish();
}

#define PSPSEG_INSTANTIATE_PRUNING(R)                                                                          \
  template void apply_mask(Network<R>&, const MaskedSet&);                                                   \
  template void restore_mask(Network<R>&, const MaskedSet&);                                                 \
  template std::int64_t commit_prune(Network<R>&, const MaskedSet&);                                         \
  template CalibrationCache<R> build_calibration_cache(const Network<R>&, std::size_t, std::size_t,           \
                                                       std::uint64_t,                                        \
                                                       const std::function<Tensor<R>(std::size_t)>&);        \
  template double subset_discrepancy(const Prm<R>&, const std::vector<CalibrationPair<R>>&,                  \
                                     const std::vector<std::size_t>&);                                       \
  template PruneProposal blockwise_prune_search(const Network<R>&, const CalibrationCache<R>&, int);         \
  template std::vector<ControllerEvent> controller_step(ControllerState&, int, double, double, Network<R>&,   \
                                                        const CacheBuilder<R>&, const ControllerConfig&);

PSPSEG_INSTANTIATE_PRUNING(float)
PSPSEG_INSTANTIATE_PRUNING(double)

#undef PSPSEG_INSTANTIATE_PRUNING

}  // namespace pspseg
