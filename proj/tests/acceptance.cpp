// Acceptance runner: one PASS/FAIL line per criterion. Usage:
//   pspseg_acceptance [--work DIR] [--only 1,2,9]

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <cstring>
#include <map>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "pspseg/autograd.hpp"
#include "pspseg/checkpoint.hpp"
#include "pspseg/data.hpp"
#include "pspseg/errors.hpp"
#include "pspseg/losses.hpp"
#include "pspseg/network.hpp"
#include "pspseg/ops.hpp"
#include "pspseg/pruning.hpp"
#include "pspseg/rng.hpp"
#include "pspseg/trainer.hpp"
#include "support/controller_scenarios.hpp"
#include "support/gradcheck.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

using namespace pspseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  char b[64];
  std::snprintf(b, sizeof(b), "%.*f", digits, v);
  return b;
}

std::string fmt_g(double v) {
  char b[64];
  std::snprintf(b, sizeof(b), "%.3g", v);
  return b;
}

template <class T>
std::vector<double> to_vec(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  const auto cases = pspseg::testing::gradient_cases();
  constexpr int kSeeds = 20;
  double worst = 0;
  std::string worst_where;
  std::size_t checked = 0;
  for (const auto& f : cases) {
    for (int s = 1; s <= kSeeds; ++s) {
      auto c = f.make(static_cast<std::uint64_t>(1000 + s));
      const auto r = pspseg::testing::check_gradients(c.loss, c.inputs, c.differentiable, 1e-4);
      checked += r.checked;
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_where = f.name + " seed " + std::to_string(s) + " (" + r.worst + ")";
      }
    }
  }
  // The squeeze bias of an efficient block is cancelled by the instance norm;
  // its gradient must vanish rather than match a relative tolerance.
  double bias_grad = 0;
  for (int s = 1; s <= kSeeds; ++s) {
    Philox rng(static_cast<std::uint64_t>(s), 0xb1a5);
    auto net = Network<double>::build(pspseg::testing::scenario_model(4), static_cast<std::uint64_t>(s));
    auto x = pspseg::testing::random_tensor({1, 2, 4, 4, 4}, rng);
    auto& br = net.prm(0).branches[1];
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto y = pspseg::testing::project(eb_forward(br, x), static_cast<std::uint64_t>(s));
    tape.backward(y);
    for (auto g : br.params->squeeze_bias.grad()) bias_grad = std::max(bias_grad, std::abs(g));
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = worst < 1e-4 && secs <= 60 && bias_grad < 1e-10;
  v.detail = std::to_string(cases.size()) + " operators x " + std::to_string(kSeeds) + " inputs, " +
             std::to_string(checked) + " partials, max rel err " + fmt_g(worst) + ", squeeze-bias |grad| " +
             fmt_g(bias_grad) + ", " + fmt(secs, 1) + "s";
  if (worst >= 1e-4) v.detail += "; worst at " + worst_where;
  return v;
}

// ---------------------------------------------------------------------------

Verdict conv_oracle() {
  double worst = 0;
  int shapes = 0;
  for (int kd : {1, 3})
    for (int kh : {1, 3})
      for (int kw : {1, 3}) {
        Philox rng(static_cast<std::uint64_t>(kd * 100 + kh * 10 + kw), 0xc0);
        auto x = pspseg::testing::random_tensor({2, 2, 5, 5, 5}, rng);
        auto k = pspseg::testing::random_tensor({3, 2, kd, kh, kw}, rng);
        auto b = pspseg::testing::random_tensor({3}, rng);
        const Index3 pad{kd / 2, kh / 2, kw / 2};
        std::array<int, 3> ext{};
        const auto ref = pspseg::testing::direct_conv3(to_vec(x), {2, 2, 5, 5, 5}, to_vec(k), {3, 2, kd, kh, kw},
                                                       to_vec(b), {1, 1, 1}, {kd / 2, kh / 2, kw / 2}, ext);
        const auto yd = conv3(x, k, b, {1, 1, 1}, pad);
        const auto yf = conv3(tensor_cast<float>(x), tensor_cast<float>(k), tensor_cast<float>(b), {1, 1, 1}, pad);
        if (static_cast<std::size_t>(yd.numel()) != ref.size()) return {false, "output size mismatch"};
        for (std::size_t i = 0; i < ref.size(); ++i) {
          worst = std::max(worst, std::abs(yd.ptr()[i] - ref[i]));
          worst = std::max(worst, std::abs(static_cast<double>(yf.ptr()[i]) - ref[i]));
        }
        ++shapes;
      }
  return {worst < 1e-5 && shapes == 8,
          std::to_string(shapes) + " kernel shapes, float32 and float64, max abs diff " + fmt_g(worst)};
}

// ---------------------------------------------------------------------------

// Exhaustive reference: every p-subset of active branches, compared by running
// prm_forward on a copy of the PRM with those branches masked.
struct ExhaustiveBest {
  std::vector<std::size_t> subset;
  double value = 0;
};

ExhaustiveBest exhaustive_search(const Prm<double>& prm, const std::vector<CalibrationPair<double>>& pairs, int p) {
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < prm.branches.size(); ++i) {
    if (prm.branches[i].state == BranchState::Active) active.push_back(i);
  }
  std::vector<std::vector<std::size_t>> subsets;
  for (std::uint32_t bits = 0; bits < (1u << active.size()); ++bits) {
    if (std::popcount(bits) != p) continue;
    std::vector<std::size_t> s;
    for (std::size_t j = 0; j < active.size(); ++j) {
      if (bits & (1u << j)) s.push_back(active[j]);
    }
    subsets.push_back(s);
  }
  std::sort(subsets.begin(), subsets.end());
  ExhaustiveBest best;
  best.value = std::numeric_limits<double>::infinity();
  for (const auto& s : subsets) {
    Prm<double> masked = prm;  // shares parameters; only states change
    for (auto i : s) masked.branches[i].state = BranchState::Masked;
    double total = 0;
    for (const auto& pr : pairs) {
      const auto y = prm_forward(masked, pr.input);
      double ss = 0;
      for (std::int64_t i = 0; i < y.numel(); ++i) {
        const double d = static_cast<double>(y.ptr()[i]) - static_cast<double>(pr.output.ptr()[i]);
        ss += d * d;
      }
      total += std::sqrt(ss);
    }
    if (total < best.value) {
      best.value = total;
      best.subset = s;
    }
  }
  return best;
}

Verdict prune_search_optimality() {
  const auto t0 = Clock::now();
  const std::vector<Index3> seven{{1, 1, 1}, {1, 1, 3}, {1, 3, 1}, {3, 1, 1}, {1, 3, 3}, {3, 1, 3}, {3, 3, 1}};
  int prms = 0, mismatches = 0, ties = 0;
  std::string first_bad;
  for (int trial = 0; trial < 200; ++trial) {
    Philox rng(static_cast<std::uint64_t>(trial), 0xe6);
    const std::size_t n = rng.below(2) ? 7 : 4;
    const int p = 1 + static_cast<int>(rng.below(3));
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.channels = {2, 4};
    for (std::size_t k = 0; k < n; ++k) cfg.kernels.push_back(seven[k]);
    auto net = Network<double>::build(cfg, static_cast<std::uint64_t>(7000 + trial));
    for (std::size_t i = 0; i < net.prm_count(); ++i) {
      auto& prm = net.prm(i);
      for (auto& br : prm.branches) br.weight.data()[0] = rng.uniform(-1.0, 1.0);
      // duplicated branches make exact ties, which must resolve to the first subset
      if (rng.below(4) == 0) {
        auto& a = prm.branches[0];
        auto& b = prm.branches[n - 1];
        if (a.spec.kernel == Index3{1, 1, 1}) {
          b.spec = a.spec;
          b.params = a.params;
          b.weight = a.weight;
          ++ties;
        }
      }
    }
    const auto cache = build_calibration_cache<double>(net, 8, 4, static_cast<std::uint64_t>(trial), [&](std::size_t id) {
      Philox r(static_cast<std::uint64_t>(trial), 0x1000 + id);
      return pspseg::testing::random_tensor({1, 1, 4, 4, 4}, r);
    });
    const auto proposal = blockwise_prune_search(net, cache, p);
    for (const auto& res : proposal.prms) {
      ++prms;
      const auto ref = exhaustive_search(net.prm(res.prm), cache.pairs[res.prm], p);
      const bool ok = !res.skipped && res.best_subset == ref.subset && res.best_discrepancy == ref.value;
      if (!ok) {
        ++mismatches;
        if (first_bad.empty()) {
          auto str = [](const std::vector<std::size_t>& v) {
            std::string o;
            for (auto x : v) o += std::to_string(x) + ",";
            return o;
          };
          first_bad = "trial " + std::to_string(trial) + " " + res.prm_id + " (n " + std::to_string(n) + ", p " +
                      std::to_string(p) + "): search {" + str(res.best_subset) + "} " + fmt_g(res.best_discrepancy) +
                      ", exhaustive {" + str(ref.subset) + "} " + fmt_g(ref.value);
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = mismatches == 0 && prms >= 200 && secs <= 120;
  v.detail = "200 networks, " + std::to_string(prms) + " PRMs (n in {4,7}, p in {1,2,3}, 4 calibration pairs, " +
             std::to_string(ties) + " with duplicated branches), " + std::to_string(mismatches) + " mismatches, " +
             fmt(secs, 1) + "s";
  if (!first_bad.empty()) v.detail += "; first mismatch " + first_bad;
  return v;
}

// ---------------------------------------------------------------------------

bool same_bits(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), sizeof(double) * a.numel()) == 0;
}

bool same_outputs(const ForwardOutputs<double>& a, const ForwardOutputs<double>& b) {
  if (!same_bits(a.encoding, b.encoding) || a.logits.size() != b.logits.size()) return false;
  for (std::size_t i = 0; i < a.logits.size(); ++i) {
    if (!same_bits(a.logits[i], b.logits[i]) || !same_bits(a.features[i], b.features[i])) return false;
  }
  return true;
}

Verdict mask_round_trip() {
  int ok = 0, changed = 0;
  for (int t = 0; t < 50; ++t) {
    Philox rng(static_cast<std::uint64_t>(t), 0x3a5c);
    auto net = Network<double>::build(ModelConfig::from_variant("mini"), static_cast<std::uint64_t>(t));
    for (std::size_t i = 0; i < net.prm_count(); ++i) {
      for (auto& br : net.prm(i).branches) br.weight.data()[0] = rng.uniform(-1.0, 1.0);
    }
    const auto x = pspseg::testing::random_tensor({1, 1, 8, 8, 8}, rng);
    MaskedSet set;
    for (std::size_t i = 0; i < net.prm_count(); ++i) {
      for (std::size_t b = 0; b < net.prm(i).branches.size(); ++b) {
        if (rng.below(3) == 0) set.push_back({i, b, net.prm(i).id});
      }
    }
    if (set.empty()) set.push_back({0, 0, net.prm(0).id});
    NoGradGuard guard;
    const auto before = net.forward(x);
    apply_mask(net, set);
    const auto masked = net.forward(x);
    restore_mask(net, set);
    const auto after = net.forward(x);
    if (same_outputs(before, after)) ++ok;
    if (!same_bits(before.logits[0], masked.logits[0])) ++changed;
  }
  return {ok == 50, std::to_string(ok) + "/50 bitwise identical after apply_mask;restore_mask (" +
                        std::to_string(changed) + "/50 differed while masked)"};
}

// ---------------------------------------------------------------------------

Verdict controller_table() {
  const auto scenarios = pspseg::testing::controller_scenarios();
  int passed = 0;
  std::set<EventKind> seen;
  std::string bad;
  for (const auto& sc : scenarios) {
    const auto out = pspseg::testing::run_scenario(sc);
    for (const auto& e : out.events) seen.insert(e.kind);
    if (out.mismatch.empty()) {
      ++passed;
    } else if (bad.empty()) {
      bad = sc.name + ": " + out.mismatch;
    }
  }
  const bool all_kinds = seen.count(EventKind::Mask) && seen.count(EventKind::Commit) &&
                         seen.count(EventKind::Restore) && seen.count(EventKind::Terminated);
  Verdict v;
  v.pass = passed == static_cast<int>(scenarios.size()) && scenarios.size() >= 6 && all_kinds;
  v.detail = std::to_string(passed) + "/" + std::to_string(scenarios.size()) +
             " scripted scenarios match hand-derived logs; Mask/Commit/Restore/Terminated all exercised: " +
             (all_kinds ? "yes" : "no");
  if (!bad.empty()) v.detail += "; " + bad;
  return v;
}

// ---------------------------------------------------------------------------

Verdict loss_identities() {
  Tensor<double> f(Shape{1, 4, 2, 2, 2});
  Philox rng(5, 0x1d);
  for (auto& v : f.data()) v = rng.uniform(0.1, 1.0);
  Tensor<double> neg = scale(f, -1.0);
  // orthogonal: a in channels 0-1, b in channels 2-3
  Tensor<double> a(Shape{1, 4, 2, 2, 2}), b(Shape{1, 4, 2, 2, 2});
  for (std::int64_t i = 0; i < 16; ++i) a.data()[i] = f.data()[i];
  for (std::int64_t i = 16; i < 32; ++i) b.data()[i] = f.data()[i];
  const double tr_par = tr_loss(f, scale(f, 3.0)).item();
  const double tr_orth = tr_loss(a, b).item();
  const double tr_anti = tr_loss(f, neg).item();

  LabelTensor y{{1, 4, 4, 4}, std::vector<std::int32_t>(64)};
  for (std::size_t i = 0; i < y.labels.size(); ++i) y.labels[i] = static_cast<std::int32_t>(rng.below(3));
  const auto pyr = label_pyramid(y, 2);
  const double rl1 = rl_loss(std::vector<Tensor<double>>{Tensor<double>(Shape{1, 8, 4, 4, 4})},
                             std::vector<LabelTensor>{pyr[0]})
                         .item();
  const double rl2 = rl_loss(std::vector<Tensor<double>>{Tensor<double>(Shape{1, 8, 4, 4, 4}),
                                                         Tensor<double>(Shape{1, 16, 2, 2, 2})},
                             pyr)
                         .item();
  LossConfig cfg;
  const double total = total_loss(1.0, 0.5, 0.2, cfg).l_total;

  const bool ok = std::abs(tr_par) < 1e-12 && std::abs(tr_orth - 1) < 1e-12 && std::abs(tr_anti - 2) < 1e-12 &&
                  std::abs(rl1 - 0.6931) <= 1e-4 && std::abs(rl2 / 2 - 0.6931) <= 1e-4 &&
                  std::abs(total - 1.07) <= 1e-9;
  return {ok, "tr {parallel, orthogonal, antiparallel} = {" + fmt(tr_par, 6) + ", " + fmt(tr_orth, 6) + ", " +
                  fmt(tr_anti, 6) + "}; rl per level on zero logits = " + fmt(rl1, 6) + " (two levels: " +
                  fmt(rl2, 6) + "); total_loss(1.0, 0.5, 0.2) = " + fmt(total, 12)};
}

// ---------------------------------------------------------------------------

std::map<std::string, std::vector<double>> encoder_grads(bool record_target) {
  auto net = Network<double>::build(ModelConfig::from_variant("mini"), 21);
  Philox rng(21, 0x57);
  const auto x = pspseg::testing::random_tensor({2, 1, 8, 8, 8}, rng, 0, 1);
  LabelTensor y{{2, 8, 8, 8}, std::vector<std::int32_t>(1024)};
  for (auto& l : y.labels) l = static_cast<std::int32_t>(rng.below(3));
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> target;
  if (record_target) {
    target = net.encode(gt_mask_image(x, y));
  } else {
    NoGradGuard guard;
    target = net.encode(gt_mask_image(x, y));
  }
  const auto fw = net.forward(x);
  const auto l = tr_loss(fw.encoding, stop_gradient(target));
  tape.backward(l);
  std::map<std::string, std::vector<double>> out;
  for (const auto& p : net.parameters()) {
    const auto& n = p.name;
    const bool encoder = n.rfind("stem.", 0) == 0 || n.rfind("down", 0) == 0 || n.rfind("enc", 0) == 0;
    if (encoder) out[n].assign(p.tensor.grad().begin(), p.tensor.grad().end());
  }
  return out;
}

Verdict stop_gradient_check() {
  const auto a = encoder_grads(false);
  const auto b = encoder_grads(true);
  std::size_t values = 0, nonzero = 0;
  bool same = a.size() == b.size();
  for (const auto& [name, g] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second.size() != g.size() ||
        std::memcmp(g.data(), it->second.data(), g.size() * sizeof(double)) != 0) {
      same = false;
    }
    values += g.size();
    for (double v : g) nonzero += v != 0;
  }
  return {same && nonzero > 0, std::to_string(a.size()) + " encoder tensors, " + std::to_string(values) +
                                   " gradient values (" + std::to_string(nonzero) +
                                   " nonzero) bitwise identical with and without the masked path on the tape"};
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> random_blobs(Philox& rng, const Dims3& d) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(dims_volume(d)), 0);
  const int blobs = static_cast<int>(rng.below(4));  // zero blobs gives empty masks
  for (int k = 0; k < blobs; ++k) {
    const double cz = rng.uniform(0, d[0]), cy = rng.uniform(0, d[1]), cx = rng.uniform(0, d[2]);
    const double r = rng.uniform(1.0, 5.0);
    for (std::int64_t z = 0; z < d[0]; ++z)
      for (std::int64_t y = 0; y < d[1]; ++y)
        for (std::int64_t x = 0; x < d[2]; ++x) {
          const double dz = z - cz, dy = y - cy, dx = x - cx;
          if (dz * dz + dy * dy + dx * dx <= r * r) m[(z * d[1] + y) * d[2] + x] = 1;
        }
  }
  // speckle
  for (auto& v : m) {
    if (rng.below(50) == 0) v ^= 1;
  }
  return m;
}

Verdict nsd_oracle() {
  int runs = 0, exact = 0;
  std::string bad;
  for (int t = 0; t < 100; ++t) {
    Philox rng(static_cast<std::uint64_t>(t), 0x45d);
    const Dims3 d{4 + static_cast<std::int64_t>(rng.below(13)), 4 + static_cast<std::int64_t>(rng.below(13)),
                  4 + static_cast<std::int64_t>(rng.below(13))};
    const auto a = random_blobs(rng, d);
    const auto b = random_blobs(rng, d);
    std::vector<Spacing3> spacings{{1, 1, 1}, {2, 2, 2}};
    spacings.push_back({1.0 + static_cast<double>(rng.below(2)), 1.0 + static_cast<double>(rng.below(2)),
                        1.0 + static_cast<double>(rng.below(2))});
    for (const auto& sp : spacings) {
      for (double tol : {0.5, 2.0}) {
        const double got = nsd_masks(a, b, d, sp, tol);
        const double want = pspseg::testing::brute_nsd(a, b, static_cast<int>(d[0]), static_cast<int>(d[1]),
                                                       static_cast<int>(d[2]), sp, tol);
        ++runs;
        if (got == want) {
          ++exact;
        } else if (bad.empty()) {
          bad = "pair " + std::to_string(t) + ": " + fmt(got, 12) + " vs " + fmt(want, 12);
        }
      }
    }
  }
  Verdict v{exact == runs, "100 mask pairs up to 16^3, spacings 1mm/2mm (plus one mixed per pair), tolerances "
                           "0.5/2.0mm: " + std::to_string(exact) + "/" + std::to_string(runs) + " exact"};
  if (!bad.empty()) v.detail += "; " + bad;
  return v;
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

struct E2eState {
  bool ran = false;
  TrainConfig config;
  TrainResult result;
};

TrainConfig desk_config(const fs::path& work) {
  TrainConfig c;
  c.mode = "psp";
  c.model = ModelConfig::from_variant("mini");
  c.dataset = (work / "phantoms" / "manifest.json").string();
  c.output_dir = (work / "psp_run").string();
  c.batch_size = 2;
  c.patch_size = {32, 32, 32};
  c.epochs = 100;
  c.iterations_per_epoch = 15;
  c.optimizer.kind = "adamw";
  c.optimizer.lr = 3e-3;
  c.calibration_count = 16;
  c.initial_p = 1;
  c.seed = 1;
  c.precision = "float32";
  c.checkpoint_every = 25;
  c.eval_every = 5;
  // desk-scale window
  c.controller = ControllerConfig{3, 0.01};
  return c;
}

Verdict end_to_end(const fs::path& work, E2eState& st) {
  const auto t0 = Clock::now();
  PhantomSpec spec;
  spec.dims = {32, 32, 32};
  const auto manifest = generate_dataset(work / "phantoms", 200, spec, 2024, 0.2);
  const auto n_train = manifest.split_indices("train").size(), n_test = manifest.split_indices("test").size();
  st.config = desk_config(work);
  fs::remove_all(st.config.output_dir);
  st.result = train(st.config, std::nullopt, [&](const EpochRecord& r, const std::vector<ControllerEvent>& ev) {
    if (!ev.empty() || r.epoch % 10 == 0) {
      std::fprintf(stderr, "  [e2e] epoch %d  l_total %.4f  params %lld  %s  (%.0fs elapsed)\n", r.epoch, r.l_total,
                   static_cast<long long>(r.params_effective), r.event.c_str(), seconds_since(t0));
    }
  });
  st.ran = true;
  const double wall = seconds_since(t0);
  const auto& res = st.result;

  const double organ = res.final_metrics.at("mean").at("dsc").at(0).get<double>();
  int commits = 0, last_commit = 0;
  std::map<std::string, int> kinds;
  for (const auto& e : res.events) {
    kinds[std::string(to_string(e.kind))]++;
    if (e.kind == EventKind::Commit) {
      ++commits;
      last_commit = e.epoch;
    }
  }
  double pre = -1, post = -1;
  for (const auto& h : res.eval_history) {
    const double d = h.at("dsc").at(0).get<double>();
    double& slot = h.at("epoch").get<int>() <= last_commit ? pre : post;
    slot = std::max(slot, d);
  }
  const bool a = organ >= 0.85;
  const bool b = commits >= 1;
  const bool c = res.final_params < res.initial_params;
  const bool d = commits >= 1 && pre >= 0 && post >= 0 && post >= pre - 0.03;
  const bool budget = wall <= 1800 && st.config.epochs <= 100 && st.config.iterations_per_epoch <= 50;

  std::string ev;
  for (const auto& [k, n] : kinds) ev += (ev.empty() ? "" : " ") + k + "x" + std::to_string(n);
  Verdict v;
  v.pass = a && b && c && d && budget && n_train == 160 && n_test == 40;
  v.detail = std::to_string(n_train) + "/" + std::to_string(n_test) + " phantoms, " +
             std::to_string(st.config.epochs) + "x" + std::to_string(st.config.iterations_per_epoch) + ", wall " +
             fmt(wall, 0) + "s; (a) organ DSC " + fmt(organ) + (a ? " ok" : " LOW") + "; (b) events [" + ev + "]" +
             (b ? "" : " NO COMMIT") + "; (c) params " + std::to_string(res.initial_params) + " -> " +
             std::to_string(res.final_params) + (c ? "" : " NOT REDUCED") + "; (d) best organ DSC pre-commit " +
             fmt(pre) + ", post-commit " + fmt(post) + (d ? "" : " OUT OF RANGE") + (budget ? "" : "; OVER BUDGET");
  return v;
}

Verdict retrain(const fs::path& work, const E2eState& st) {
  if (!st.ran) return {false, "needs the end-to-end run of criterion 9"};
  const auto t0 = Clock::now();
  TrainConfig c = st.config;
  c.mode = "retrain";
  c.architecture = st.result.final_checkpoint.string();
  c.output_dir = (work / "retrain_run").string();
  c.epochs = 40;
  c.eval_every = 10;
  fs::remove_all(c.output_dir);
  const auto r = train(c);
  bool constant = true;
  for (const auto& rec : r.records) constant &= rec.params_effective == r.records.front().params_effective;
  const auto ck = load_checkpoint<float>(r.final_checkpoint);
  bool clean = ck.controller.p == 0;
  for (std::size_t i = 0; i < ck.network.prm_count(); ++i) {
    clean &= ck.network.prm(i).count(BranchState::Masked) == 0 && ck.network.prm(i).count(BranchState::Pruned) == 0;
  }
  const auto& pm = st.result.final_metrics.at("mean");
  const auto& rm = r.final_metrics.at("mean");
  nlohmann::json report = {
      {"psp", {{"params_effective", st.result.final_params}, {"dsc", pm.at("dsc")}, {"nsd", pm.at("nsd")},
               {"epochs", st.config.epochs}}},
      {"retrain", {{"params_effective", r.final_params}, {"dsc", rm.at("dsc")}, {"nsd", rm.at("nsd")},
                   {"epochs", c.epochs}}},
      {"delta_dsc", {rm.at("dsc").at(0).get<double>() - pm.at("dsc").at(0).get<double>(),
                     rm.at("dsc").at(1).get<double>() - pm.at("dsc").at(1).get<double>()}},
      {"classes", {"organ", "tumor"}}};
  const auto report_path = work / "retrain_comparison.json";
  std::ofstream(report_path) << report.dump(1) << "\n";
  std::ofstream md(work / "retrain_comparison.md");
  md << "| run | params | organ DSC | tumor DSC | organ NSD | tumor NSD |\n|---|---|---|---|---|---|\n";
  md << "| psp (pruned during training) | " << st.result.final_params << " | " << fmt(pm.at("dsc").at(0)) << " | "
     << fmt(pm.at("dsc").at(1)) << " | " << fmt(pm.at("nsd").at(0)) << " | " << fmt(pm.at("nsd").at(1)) << " |\n";
  md << "| retrain (same architecture, fresh init) | " << r.final_params << " | " << fmt(rm.at("dsc").at(0)) << " | "
     << fmt(rm.at("dsc").at(1)) << " | " << fmt(rm.at("nsd").at(0)) << " | " << fmt(rm.at("nsd").at(1)) << " |\n";
  const bool same_params = r.final_params == st.result.final_params;
  Verdict v;
  v.pass = constant && clean && same_params && fs::exists(report_path);
  v.detail = "retrain of the pruned architecture, " + std::to_string(c.epochs) + " epochs in " +
             fmt(seconds_since(t0), 0) + "s: params " + std::to_string(r.final_params) +
             (constant ? " (constant)" : " (VARIES)") + ", organ DSC " + fmt(rm.at("dsc").at(0)) + " vs psp " +
             fmt(pm.at("dsc").at(0)) + "; report " + report_path.string();
  return v;
}

std::vector<std::string> csv_without_seconds(const fs::path& path) {
  std::vector<std::string> out;
  for (const auto& r : read_epoch_csv(path)) {
    auto copy = r;
    copy.seconds = 0;
    out.push_back(csv_line(copy));
  }
  return out;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

Verdict reproducibility(const fs::path& work) {
  const auto t0 = Clock::now();
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  spec.organ_semi_axes = {4, 6};
  spec.tumor_radius = {1, 2};
  generate_dataset(work / "small", 12, spec, 99, 0.25);
  TrainConfig c;
  c.model = ModelConfig::from_variant("mini");
  c.dataset = (work / "small" / "manifest.json").string();
  c.patch_size = {16, 16, 16};
  c.epochs = 8;
  c.iterations_per_epoch = 3;
  c.calibration_count = 4;
  c.precision = "float64";
  c.seed = 5;
  c.checkpoint_every = 4;
  c.controller = ControllerConfig{2, 0.01};
  c.optimizer.lr = 3e-3;

  auto run = [&](const std::string& name, const std::optional<fs::path>& resume) {
    auto cfg = c;
    cfg.output_dir = (work / name).string();
    if (!resume) fs::remove_all(cfg.output_dir);
    return train(cfg, resume);
  };
  run("repro_a", std::nullopt);
  run("repro_b", std::nullopt);
  const auto a = csv_without_seconds(work / "repro_a" / "epochs.csv");
  const auto b = csv_without_seconds(work / "repro_b" / "epochs.csv");
  const bool twice = a == b && a.size() == 8 && read_lines(work / "repro_a" / "events.jsonl") ==
                                                   read_lines(work / "repro_b" / "events.jsonl");

  fs::remove_all(work / "repro_c");
  run("repro_c", work / "repro_a" / "checkpoints" / "epoch_0004");
  const auto cc = csv_without_seconds(work / "repro_c" / "epochs.csv");
  const bool resumed = cc == a && read_lines(work / "repro_c" / "events.jsonl") ==
                                      read_lines(work / "repro_a" / "events.jsonl");
  const auto events = read_lines(work / "repro_a" / "events.jsonl").size();
  return {twice && resumed, "float64, 8 epochs, " + std::to_string(events) + " event lines: identical rerun " +
                                (twice ? "yes" : "NO") + ", resume from epoch 4 reproduces epochs 5-8 " +
                                (resumed ? "yes" : "NO") + " (seconds column excluded), " +
                                fmt(seconds_since(t0), 1) + "s"};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_work";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string part;
      while (std::getline(ss, part, ',')) only.insert(std::stoi(part));
    } else {
      std::cerr << "usage: pspseg_acceptance [--work DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(work);
  E2eState e2e;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"convolution oracle", conv_oracle},
      {"block-wise search optimality", prune_search_optimality},
      {"mask/restore round trip", mask_round_trip},
      {"controller state machine", controller_table},
      {"loss identities", loss_identities},
      {"stop-gradient", stop_gradient_check},
      {"NSD oracle", nsd_oracle},
      {"end-to-end desk run", [&] { return end_to_end(work, e2e); }},
      {"retrain comparison", [&] { return retrain(work, e2e); }},
      {"reproducibility", [&] { return reproducibility(work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += v.pass ? 0 : 1;
    std::printf("criterion %2d %-30s %s  %s\n", id, criteria[i].first.c_str(), v.pass ? "PASS" : "FAIL",
                v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
