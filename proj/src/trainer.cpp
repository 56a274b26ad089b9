#include "pspseg/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pspseg/autograd.hpp"
#include "pspseg/checkpoint.hpp"
#include "pspseg/errors.hpp"
#include "pspseg/rng.hpp"

extern "C" void openblas_set_num_threads(int);

namespace pspseg {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kBatchStream = 0xba7c;
constexpr std::uint32_t kCalibrationStream = 0xca1b;

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and records
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (mode != "psp" && mode != "retrain") throw ConfigError("mode must be psp or retrain, got '" + mode + "'");
  if (mode == "retrain" && architecture.empty()) throw ConfigError("retrain mode needs an architecture path");
  model.validate();
  loss.validate();
  optimizer.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (iterations_per_epoch < 1) throw ConfigError("iterations_per_epoch must be at least 1");
  if (calibration_count < 1) throw ConfigError("calibration_count must be at least 1");
  const auto m = model.extent_multiple();
  for (auto e : patch_size) {
    if (e < 1 || e % m != 0) {
      throw ConfigError("patch extent " + std::to_string(e) + " is not a positive multiple of " + std::to_string(m));
    }
  }
  if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
  if (dataset.empty()) throw ConfigError("dataset manifest path is required");
  if (output_dir.empty()) throw ConfigError("output_dir is required");
  if (controller.window < 1) throw ConfigError("controller window must be at least 1");
  if (checkpoint_every < 0 || eval_every < 0 || eval_cases < 0) throw ConfigError("cadences must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mode", c.mode},
       {"model", c.model},
       {"architecture", c.architecture},
       {"loss", c.loss},
       {"optimizer", c.optimizer},
       {"batch_size", c.batch_size},
       {"patch_size", c.patch_size},
       {"epochs", c.epochs},
       {"iterations_per_epoch", c.iterations_per_epoch},
       {"calibration_count", c.calibration_count},
       {"initial_p", c.initial_p},
       {"seed", c.seed},
       {"dataset", c.dataset},
       {"output_dir", c.output_dir},
       {"precision", c.precision},
       {"checkpoint_every", c.checkpoint_every},
       {"eval_every", c.eval_every},
       {"eval_cases", c.eval_cases},
       {"controller", {{"window", c.controller.window}, {"threshold", c.controller.threshold}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "mode",       "model",   "architecture", "loss",      "optimizer",        "batch_size", "patch_size",
      "epochs",     "iterations_per_epoch",    "calibration_count", "initial_p", "seed",       "dataset",
      "output_dir", "precision", "checkpoint_every", "eval_every", "eval_cases", "controller"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config field '" + key + "'");
  }
  c = TrainConfig{};
  try {
    c.mode = j.value("mode", c.mode);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model = m.is_string() ? ModelConfig::from_variant(m.get<std::string>()) : m.get<ModelConfig>();
    }
    c.architecture = j.value("architecture", c.architecture);
    if (j.contains("loss")) c.loss = j.at("loss").get<LossConfig>();
    if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("patch_size")) {
      const auto& p = j.at("patch_size");
      c.patch_size = p.is_number() ? Dims3{p.get<std::int64_t>(), p.get<std::int64_t>(), p.get<std::int64_t>()}
                                   : p.get<Dims3>();
    }
    c.epochs = j.value("epochs", c.epochs);
    c.iterations_per_epoch = j.value("iterations_per_epoch", c.iterations_per_epoch);
    c.calibration_count = j.value("calibration_count", c.calibration_count);
    c.initial_p = j.value("initial_p", c.initial_p);
    c.seed = j.value("seed", c.seed);
    c.dataset = j.value("dataset", c.dataset);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.precision = j.value("precision", c.precision);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_cases = j.value("eval_cases", c.eval_cases);
    if (j.contains("controller")) {
      c.controller.window = j.at("controller").value("window", c.controller.window);
      c.controller.threshold = j.at("controller").value("threshold", c.controller.threshold);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
}

TrainConfig read_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto c = j.get<TrainConfig>();
  // relative paths resolve against the config file
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.dataset);
  resolve(c.output_dir);
  resolve(c.architecture);
  c.validate();
  return c;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},   {"l_seg", r.l_seg}, {"l_tr", r.l_tr},
       {"l_rl", r.l_rl},     {"l_total", r.l_total}, {"params_effective", r.params_effective},
       {"branches_active", r.branches_active}, {"event", r.event}, {"seconds", r.seconds}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.l_seg = j.at("l_seg").get<double>();
  r.l_tr = j.at("l_tr").get<double>();
  r.l_rl = j.at("l_rl").get<double>();
  r.l_total = j.at("l_total").get<double>();
  r.params_effective = j.at("params_effective").get<std::int64_t>();
  r.branches_active = j.at("branches_active").get<std::int64_t>();
  r.event = j.at("event").get<std::string>();
  r.seconds = j.at("seconds").get<double>();
}

std::string csv_line(const EpochRecord& r) {
  std::ostringstream s;
  s << r.epoch << ',' << format_double(r.l_seg) << ',' << format_double(r.l_tr) << ',' << format_double(r.l_rl) << ','
    << format_double(r.l_total) << ',' << r.params_effective << ',' << r.branches_active << ',' << r.event << ','
    << format_double(r.seconds);
  return s.str();
}

std::vector<EpochRecord> read_epoch_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kEpochCsvHeader) throw DataError(path.string() + ": unexpected header '" + line + "'");
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 9) throw DataError(path.string() + ": expected 9 columns in '" + line + "'");
    EpochRecord r;
    r.epoch = std::stoi(f[0]);
    r.l_seg = std::stod(f[1]);
    r.l_tr = std::stod(f[2]);
    r.l_rl = std::stod(f[3]);
    r.l_total = std::stod(f[4]);
    r.params_effective = std::stoll(f[5]);
    r.branches_active = std::stoll(f[6]);
    r.event = f[7];
    r.seconds = std::stod(f[8]);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

namespace {

struct CaseSet {
  std::vector<Volume> images;
  std::vector<LabelVolume> labels;
};

CaseSet load_split(const DatasetManifest& m, const std::string& split, int num_classes) {
  CaseSet s;
  for (auto i : m.split_indices(split)) {
    auto c = load_case(m, i);
    c.label.validate(num_classes);
    s.images.push_back(std::move(c.image));
    s.labels.push_back(std::move(c.label));
  }
  if (s.images.empty()) throw DataError("split '" + split + "' is empty");
  return s;
}

// Copies the patch starting at `origin` (may be negative or run past the end;
// those voxels become zero / background) into slot `b` of x and y.
template <class Real>
void copy_patch(const Volume& img, const LabelVolume& lab, const Dims3& origin, const Dims3& patch, std::int64_t b,
                Tensor<Real>& x, LabelTensor* y) {
  const auto pv = dims_volume(patch);
  Real* xd = x.ptr() + b * pv;
  std::int32_t* yd = y ? y->labels.data() + b * pv : nullptr;
  const auto& d = img.dims;
  for (std::int64_t z = 0; z < patch[0]; ++z) {
    const auto sz = origin[0] + z;
    for (std::int64_t h = 0; h < patch[1]; ++h) {
      const auto sh = origin[1] + h;
      for (std::int64_t w = 0; w < patch[2]; ++w) {
        const auto sw = origin[2] + w;
        const auto o = (z * patch[1] + h) * patch[2] + w;
        if (sz < 0 || sz >= d[0] || sh < 0 || sh >= d[1] || sw < 0 || sw >= d[2]) {
          xd[o] = Real(0);
          if (yd) yd[o] = 0;
          continue;
        }
        const auto si = (sz * d[1] + sh) * d[2] + sw;
        xd[o] = static_cast<Real>(img.voxels[si]);
        if (yd) yd[o] = lab.labels[si];
      }
    }
  }
}

Dims3 centred_origin(const Dims3& dims, const Dims3& patch) {
  Dims3 o{};
  for (int a = 0; a < 3; ++a) o[a] = (dims[a] - patch[a]) / 2;  // negative: symmetric pad
  return o;
}

template <class Real>
std::pair<Tensor<Real>, LabelTensor> sample_batch(const CaseSet& data, const TrainConfig& cfg, int epoch, int iter) {
  Philox rng(cfg.seed, stream_id(kBatchStream, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(iter)));
  const auto& p = cfg.patch_size;
  const std::int64_t n = cfg.batch_size;
  Tensor<Real> x(Shape{n, 1, p[0], p[1], p[2]});
  LabelTensor y{Shape{n, p[0], p[1], p[2]}, std::vector<std::int32_t>(static_cast<std::size_t>(n * dims_volume(p)))};
  for (std::int64_t b = 0; b < n; ++b) {
    const auto id = rng.below(data.images.size());
    const auto& img = data.images[id];
    Dims3 origin = centred_origin(img.dims, p);
    for (int a = 0; a < 3; ++a) {
      if (img.dims[a] > p[a]) origin[a] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(img.dims[a] - p[a] + 1)));
    }
    copy_patch(img, data.labels[id], origin, p, b, x, &y);
  }
  return {std::move(x), std::move(y)};
}

template <class Real>
Tensor<Real> whole_patch(const Volume& img, const Dims3& patch) {
  Tensor<Real> x(Shape{1, 1, patch[0], patch[1], patch[2]});
  copy_patch<Real>(img, LabelVolume{}, centred_origin(img.dims, patch), patch, 0, x, nullptr);
  return x;
}

// ---------------------------------------------------------------------------
// Run state
// ---------------------------------------------------------------------------

std::int64_t active_branches(const ArchitectureDescriptor& d) {
  std::int64_t n = 0;
  for (const auto& row : d.branch_states) n += std::count(row.begin(), row.end(), BranchState::Active);
  return n;
}

std::string join_events(const std::vector<ControllerEvent>& events) {
  std::string s;
  for (const auto& e : events) {
    if (!s.empty()) s += ';';
    s += to_string(e.kind);
  }
  return s;
}

ArchitectureDescriptor load_architecture(const fs::path& path) {
  if (fs::is_directory(path)) return read_checkpoint_manifest(path).at("architecture").get<ArchitectureDescriptor>();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open architecture " + path.string());
  try {
    auto j = nlohmann::json::parse(in);
    if (j.contains("architecture")) j = j.at("architecture");
    return j.get<ArchitectureDescriptor>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

template <class Real>
Network<Real> initial_network(const TrainConfig& cfg) {
  if (cfg.mode == "retrain") {
    return Network<Real>::build(load_architecture(cfg.architecture).compact_config(), cfg.seed);
  }
  return Network<Real>::build(cfg.model, cfg.seed);
}

ControllerEvent init_event(const ArchitectureDescriptor& d, const TrainConfig& cfg, int p) {
  ControllerEvent e;
  e.epoch = 0;
  e.kind = EventKind::Init;
  e.p = p;
  e.fd = std::numeric_limits<double>::quiet_NaN();
  e.architecture = d;
  e.architecture["epochs"] = cfg.epochs;
  e.architecture["mode"] = cfg.mode;
  return e;
}

nlohmann::json dsc_entry(int epoch, const nlohmann::json& metrics, std::int64_t params, int commits) {
  return {{"epoch", epoch},
          {"dsc", metrics.at("mean").at("dsc")},
          {"mean_fg_dsc", metrics.at("mean").at("mean_fg_dsc")},
          {"params_effective", params},
          {"commits_so_far", commits}};
}

fs::path checkpoint_path(const fs::path& out, int epoch) {
  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%04d", epoch);
  return out / "checkpoints" / name;
}

template <class Real>
TrainResult train_impl(const TrainConfig& cfg, const std::optional<fs::path>& resume, const EpochCallback& on_epoch) {
  openblas_set_num_threads(1);
  const auto t_start = std::chrono::steady_clock::now();
  const fs::path out = cfg.output_dir;
  fs::create_directories(out / "checkpoints");

  const auto manifest = read_manifest(cfg.dataset);
  const int num_classes = static_cast<int>(cfg.model.num_classes);
  const auto train_data = load_split(manifest, "train", num_classes);
  const bool psp = cfg.mode == "psp";

  Checkpoint<Real> ck;
  nlohmann::json records = nlohmann::json::array();
  nlohmann::json eval_history = nlohmann::json::array();
  std::int64_t initial_params = 0;
  if (resume) {
    ck = load_checkpoint<Real>(*resume);
    TrainConfig saved;
    from_json(ck.train_config, saved);
    if (saved.mode != cfg.mode || saved.seed != cfg.seed) {
      throw ConfigError("resume checkpoint was written by a run with a different mode or seed");
    }
    records = ck.records;
    eval_history = ck.extra.value("eval_history", nlohmann::json::array());
    initial_params = ck.extra.value("initial_params", std::int64_t{0});
    if (!ck.optimizer) ck.optimizer = Optimizer<Real>(cfg.optimizer);
  } else {
    ck.network = initial_network<Real>(cfg);
    ck.seed = cfg.seed;
    ck.optimizer = Optimizer<Real>(cfg.optimizer);
    ck.controller.p = psp ? cfg.prune_step() : 0;
    ck.controller.events.push_back(init_event(ck.network.descriptor(), cfg, ck.controller.p));
    initial_params = ck.network.parameter_counts().effective;
  }
  ck.train_config = cfg;
  auto& net = ck.network;
  net.check_input_extents(Shape{1, 1, cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]});
  auto& opt = *ck.optimizer;
  auto& state = ck.controller;

  // logs are rewritten from the checkpoint so a resumed run carries the full history
  std::ofstream csv(out / "epochs.csv", std::ios::trunc);
  std::ofstream jsonl(out / "events.jsonl", std::ios::trunc);
  if (!csv || !jsonl) throw IoError("cannot write logs under " + out.string());
  csv << kEpochCsvHeader << "\n";
  for (const auto& r : records) csv << csv_line(r.get<EpochRecord>()) << "\n";
  for (const auto& e : state.events) jsonl << nlohmann::json(e).dump() << "\n";
  csv.flush();
  jsonl.flush();

  const int levels = net.config().supervision_levels();
  auto sup_weights = cfg.loss.supervision_weights.empty() ? supervision_weights(levels) : cfg.loss.supervision_weights;
  if (static_cast<int>(sup_weights.size()) != levels) throw ConfigError("supervision_weights must have one entry per decoder level");

  auto run_eval = [&](std::size_t cap) {
    return evaluate_network<Real>(net, manifest, "test", cfg.patch_size, cap);
  };
  auto commits = [&] {
    return static_cast<int>(std::count_if(state.events.begin(), state.events.end(),
                                          [](const ControllerEvent& e) { return e.kind == EventKind::Commit; }));
  };
  auto save = [&](const fs::path& dir) {
    ck.records = records;
    ck.extra = {{"eval_history", eval_history}, {"initial_params", initial_params}};
    save_checkpoint(dir, ck);
  };

  const CacheBuilder<Real> cache_builder = [&](const Network<Real>& n) {
    const auto epoch = static_cast<std::uint64_t>(state.tr_history.size());
    return build_calibration_cache<Real>(n, train_data.images.size(), static_cast<std::size_t>(cfg.calibration_count),
                                         stream_id(kCalibrationStream, cfg.seed, epoch), [&](std::size_t id) {
                                           return whole_patch<Real>(train_data.images[id], cfg.patch_size);
                                         });
  };

  for (int epoch = ck.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double s_seg = 0, s_tr = 0, s_rl = 0;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      auto [x, y] = sample_batch<Real>(train_data, cfg, epoch, it);
      const auto pyramid = label_pyramid(y, levels);
      Tensor<Real> target;
      {
        NoGradGuard guard;
        target = net.encode(gt_mask_image(x, y));
      }
      Tape<Real> tape;
      TapeScope<Real> scope(tape);
      const auto fw = net.forward(x);
      const auto l_seg = dice_ce_deep_supervision(fw.logits, pyramid, sup_weights, cfg.loss.dice_smooth);
      const auto l_tr = tr_loss(fw.encoding, stop_gradient(target));
      const auto l_rl = rl_loss(fw.features, pyramid);
      try {
        total_loss(l_seg.item(), l_tr.item(), l_rl.item(), cfg.loss);
      } catch (const NumericError& e) {
        throw NumericError("divergence at epoch " + std::to_string(epoch) + " iteration " + std::to_string(it) + ": " +
                           e.what());
      }
      const auto total = combine_losses(l_seg, l_tr, l_rl, cfg.loss);
      tape.backward(total);
      const auto params = net.parameters();
      opt.step(params);
      for (auto p : params) p.tensor.zero_grad();
      s_seg += static_cast<double>(l_seg.item());
      s_tr += static_cast<double>(l_tr.item());
      s_rl += static_cast<double>(l_rl.item());
    }
    const double n_it = cfg.iterations_per_epoch;
    const auto lb = total_loss(s_seg / n_it, s_tr / n_it, s_rl / n_it, cfg.loss);

    std::vector<ControllerEvent> events;
    if (psp) {
      events = controller_step<Real>(state, epoch, lb.l_tr, lb.l_rl, net, cache_builder, cfg.controller);
      if (std::any_of(events.begin(), events.end(), [](const auto& e) { return e.kind == EventKind::Commit; })) {
        opt.forget_missing(net.parameters());
      }
    }
    const auto desc = net.descriptor();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.l_seg = lb.l_seg;
    rec.l_tr = lb.l_tr;
    rec.l_rl = lb.l_rl;
    rec.l_total = lb.l_total;
    rec.params_effective = net.parameter_counts().effective;
    rec.branches_active = active_branches(desc);
    rec.event = join_events(events);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    records.push_back(rec);
    ck.epoch = epoch;

    csv << csv_line(rec) << "\n";
    csv.flush();
    for (const auto& e : events) jsonl << nlohmann::json(e).dump() << "\n";
    jsonl.flush();

    const bool last = epoch == cfg.epochs;
    if ((cfg.eval_every > 0 && epoch % cfg.eval_every == 0) || last) {
      const auto m = run_eval(last ? 0 : static_cast<std::size_t>(cfg.eval_cases));
      eval_history.push_back(dsc_entry(epoch, m, rec.params_effective, commits()));
    }
    if (!events.empty() || last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)) {
      save(checkpoint_path(out, epoch));
    }
    if (on_epoch) on_epoch(rec, events);
  }

  TrainResult result;
  result.final_checkpoint = out / "final";
  save(result.final_checkpoint);
  result.final_metrics = run_eval(0);
  for (const auto& r : records) result.records.push_back(r.get<EpochRecord>());
  result.events = state.events;
  result.eval_history = eval_history;
  result.initial_params = initial_params;
  result.final_params = net.parameter_counts().effective;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  std::ofstream(out / "timeline.json") << build_timeline(state.events).dump(1) << "\n";
  std::ofstream(out / "eval_test.json") << result.final_metrics.dump(1) << "\n";
  nlohmann::json summary = {{"mode", cfg.mode},
                            {"precision", cfg.precision},
                            {"epochs", records.size()},
                            {"initial_params", initial_params},
                            {"final_params", result.final_params},
                            {"final_p", state.p},
                            {"events", state.events},
                            {"eval_history", eval_history},
                            {"final_metrics_mean", result.final_metrics.at("mean")},
                            {"architecture", net.descriptor()},
                            {"seconds_this_process", result.seconds}};
  write_text(out / "summary.json", summary.dump(1) + "\n");
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::optional<fs::path>& resume, const EpochCallback& on_epoch) {
  config.validate();
  if (config.precision == "float64") return train_impl<double>(config, resume, on_epoch);
  return train_impl<float>(config, resume, on_epoch);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t window) {
  if (extent <= window) return {0};
  const std::int64_t stride = std::max<std::int64_t>(1, window / 2);
  std::vector<std::int64_t> s;
  for (std::int64_t o = 0; o + window < extent; o += stride) s.push_back(o);
  s.push_back(extent - window);
  return s;
}

}  // namespace

template <class Real>
Tensor<Real> sliding_window_logits(const Volume& image, const Dims3& window, std::int64_t num_classes,
                                   const std::function<Tensor<Real>(const Tensor<Real>&)>& predict, bool* padded) {
  image.validate();
  Dims3 ext{};
  Dims3 pad{};
  bool any_pad = false;
  for (int a = 0; a < 3; ++a) {
    ext[a] = std::max(image.dims[a], window[a]);
    pad[a] = (ext[a] - image.dims[a]) / 2;
    any_pad |= ext[a] != image.dims[a];
  }
  if (padded) *padded = any_pad;

  const auto ev = dims_volume(ext);
  std::vector<Real> acc(static_cast<std::size_t>(num_classes * ev), Real(0));
  std::vector<Real> hits(static_cast<std::size_t>(ev), Real(0));
  const auto wv = dims_volume(window);
  for (auto oz : window_starts(ext[0], window[0])) {
    for (auto oy : window_starts(ext[1], window[1])) {
      for (auto ox : window_starts(ext[2], window[2])) {
        Tensor<Real> x(Shape{1, 1, window[0], window[1], window[2]});
        copy_patch<Real>(image, LabelVolume{}, Dims3{oz - pad[0], oy - pad[1], ox - pad[2]}, window, 0, x, nullptr);
        const auto logits = predict(x);
        if (logits.shape() != Shape{1, num_classes, window[0], window[1], window[2]}) {
          throw ShapeError("predict returned " + shape_str(logits.shape()) + " for a window of " +
                           shape_str(x.shape()));
        }
        const auto ld = logits.data();
        for (std::int64_t z = 0; z < window[0]; ++z) {
          for (std::int64_t y = 0; y < window[1]; ++y) {
            const auto dst = ((oz + z) * ext[1] + (oy + y)) * ext[2] + ox;
            const auto src = (z * window[1] + y) * window[2];
            for (std::int64_t w = 0; w < window[2]; ++w) hits[dst + w] += Real(1);
            for (std::int64_t c = 0; c < num_classes; ++c) {
              Real* a = acc.data() + c * ev + dst;
              const Real* l = ld.data() + c * wv + src;
              for (std::int64_t w = 0; w < window[2]; ++w) a[w] += l[w];
            }
          }
        }
      }
    }
  }
  const auto& d = image.dims;
  Tensor<Real> out(Shape{num_classes, d[0], d[1], d[2]});
  auto od = out.data();
  for (std::int64_t c = 0; c < num_classes; ++c) {
    for (std::int64_t z = 0; z < d[0]; ++z) {
      for (std::int64_t y = 0; y < d[1]; ++y) {
        for (std::int64_t x = 0; x < d[2]; ++x) {
          const auto e = ((z + pad[0]) * ext[1] + (y + pad[1])) * ext[2] + (x + pad[2]);
          od[((c * d[0] + z) * d[1] + y) * d[2] + x] = acc[c * ev + e] / hits[e];
        }
      }
    }
  }
  return out;
}

template <class Real>
LabelVolume argmax_labels(const Tensor<Real>& logits, const Dims3& dims, const Spacing3& spacing) {
  const auto v = dims_volume(dims);
  if (logits.rank() != 4 || logits.numel() != logits.dim(0) * v) {
    throw ShapeError("argmax_labels expects [C, D, H, W] logits, got " + shape_str(logits.shape()));
  }
  const auto c_n = logits.dim(0);
  LabelVolume out{dims, spacing, std::vector<std::uint16_t>(static_cast<std::size_t>(v))};
  const auto d = logits.data();
  for (std::int64_t i = 0; i < v; ++i) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < c_n; ++c) {
      if (d[c * v + i] > d[best * v + i]) best = c;
    }
    out.labels[i] = static_cast<std::uint16_t>(best);
  }
  return out;
}

nlohmann::json score_cases(const std::vector<std::pair<LabelVolume, LabelVolume>>& pred_gt, int num_classes,
                           double nsd_tolerance_mm) {
  if (pred_gt.empty()) throw DataError("nothing to score");
  const int fg = num_classes - 1;
  std::vector<double> dsc_sum(fg, 0), nsd_sum(fg, 0);
  auto cases = nlohmann::json::array();
  for (const auto& [pred, gt] : pred_gt) {
    std::vector<double> dsc(fg), nsd(fg);
    for (int c = 1; c <= fg; ++c) {
      dsc[c - 1] = dice_score(pred, gt, c);
      nsd[c - 1] = nsd_score(pred, gt, c, nsd_tolerance_mm);
      dsc_sum[c - 1] += dsc[c - 1];
      nsd_sum[c - 1] += nsd[c - 1];
    }
    cases.push_back({{"dsc", dsc}, {"nsd", nsd}});
  }
  const double n = static_cast<double>(pred_gt.size());
  std::vector<double> dsc_mean(fg), nsd_mean(fg);
  double fg_dsc = 0, fg_nsd = 0;
  for (int c = 0; c < fg; ++c) {
    dsc_mean[c] = dsc_sum[c] / n;
    nsd_mean[c] = nsd_sum[c] / n;
    fg_dsc += dsc_mean[c] / fg;
    fg_nsd += nsd_mean[c] / fg;
  }
  return {{"classes", fg},
          {"nsd_tolerance_mm", nsd_tolerance_mm},
          {"cases", cases},
          {"mean", {{"dsc", dsc_mean}, {"nsd", nsd_mean}, {"mean_fg_dsc", fg_dsc}, {"mean_fg_nsd", fg_nsd}}}};
}

template <class Real>
nlohmann::json evaluate_network(const Network<Real>& net, const DatasetManifest& data, const std::string& split,
                                const Dims3& window, std::size_t max_cases) {
  auto ids = data.split_indices(split);
  if (ids.empty()) throw DataError("split '" + split + "' is empty");
  if (max_cases > 0 && ids.size() > max_cases) ids.resize(max_cases);
  NoGradGuard guard;
  const std::function<Tensor<Real>(const Tensor<Real>&)> predict = [&](const Tensor<Real>& x) {
    return net.forward(x).logits.front();
  };
  std::vector<std::pair<LabelVolume, LabelVolume>> pairs;
  auto padded_ids = nlohmann::json::array();
  auto case_ids = nlohmann::json::array();
  for (auto i : ids) {
    auto c = load_case(data, i);
    bool padded = false;
    const auto logits = sliding_window_logits<Real>(c.image, window, net.config().num_classes, predict, &padded);
    if (padded) padded_ids.push_back(data.cases[i].id);
    case_ids.push_back(data.cases[i].id);
    pairs.emplace_back(argmax_labels(logits, c.image.dims, c.image.spacing), std::move(c.label));
  }
  auto report = score_cases(pairs, static_cast<int>(net.config().num_classes), 2.0);
  for (std::size_t k = 0; k < pairs.size(); ++k) report["cases"][k]["id"] = case_ids[k];
  report["split"] = split;
  report["window"] = window;
  report["zero_padded_cases"] = padded_ids;
  return report;
}

nlohmann::json evaluate(const TrainConfig& config, const fs::path& checkpoint, const std::string& split) {
  openblas_set_num_threads(1);
  const auto manifest = read_manifest(config.dataset);
  nlohmann::json report;
  if (config.precision == "float64") {
    const auto ck = load_checkpoint<double>(checkpoint);
    report = evaluate_network(ck.network, manifest, split, config.patch_size);
    report["params_effective"] = ck.network.parameter_counts().effective;
  } else {
    const auto ck = load_checkpoint<float>(checkpoint);
    report = evaluate_network(ck.network, manifest, split, config.patch_size);
    report["params_effective"] = ck.network.parameter_counts().effective;
  }
  report["checkpoint"] = checkpoint.string();
  return report;
}

// ---------------------------------------------------------------------------
// Timeline
// ---------------------------------------------------------------------------

std::vector<ControllerEvent> read_events(const fs::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw IoError("cannot open " + jsonl.string());
  std::vector<ControllerEvent> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ControllerEvent>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(jsonl.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::json build_timeline(const std::vector<ControllerEvent>& events) {
  if (events.empty() || events.front().kind != EventKind::Init) {
    throw DataError("event log must start with an Init event");
  }
  const auto& arch = events.front().architecture;
  const auto prm_ids = arch.at("prm_ids").get<std::vector<std::string>>();
  std::vector<std::vector<std::string>> states;
  for (const auto& row : arch.at("branch_states")) {
    states.emplace_back();
    for (const auto& s : row) states.back().push_back(s.get<std::string>());
  }
  int last_epoch = arch.value("epochs", 0);
  for (const auto& e : events) last_epoch = std::max(last_epoch, e.epoch);

  auto set_state = [&](const MaskedSet& set, const std::string& s) {
    for (const auto& r : set) {
      if (r.prm >= states.size() || r.branch >= states[r.prm].size()) {
        throw DataError("event references branch " + std::to_string(r.prm) + "." + std::to_string(r.branch) +
                        " outside the architecture");
      }
      states[r.prm][r.branch] = s;
    }
  };

  auto rows = nlohmann::json::array();
  std::size_t k = 0;
  for (int epoch = 0; epoch <= last_epoch; ++epoch) {
    std::vector<std::string> kinds;
    for (; k < events.size() && events[k].epoch == epoch; ++k) {
      const auto& e = events[k];
      switch (e.kind) {
        case EventKind::Mask: set_state(e.masked_set, "Masked"); break;
        case EventKind::Restore: set_state(e.masked_set, "Active"); break;
        case EventKind::Commit: set_state(e.masked_set, "Pruned"); break;
        default: break;
      }
      kinds.emplace_back(to_string(e.kind));
    }
    if (k < events.size() && events[k].epoch < epoch) throw DataError("event log is not ordered by epoch");
    rows.push_back({{"epoch", epoch}, {"events", kinds}, {"states", states}});
  }
  return {{"prm_ids", prm_ids}, {"kernels", arch.value("kernels", nlohmann::json::array())},
          {"prm_kernels", arch.value("prm_kernels", nlohmann::json::array())}, {"epochs", rows}};
}

#define PSPSEG_INSTANTIATE_TRAINER(R)                                                                          \
  template Tensor<R> sliding_window_logits(const Volume&, const Dims3&, std::int64_t,                         \
                                           const std::function<Tensor<R>(const Tensor<R>&)>&, bool*);         \
  template LabelVolume argmax_labels(const Tensor<R>&, const Dims3&, const Spacing3&);                       \
  template nlohmann::json evaluate_network(const Network<R>&, const DatasetManifest&, const std::string&,     \
                                           const Dims3&, std::size_t);

PSPSEG_INSTANTIATE_TRAINER(float)
PSPSEG_INSTANTIATE_TRAINER(double)

}  // namespace pspseg
