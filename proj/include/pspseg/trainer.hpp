#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pspseg/data.hpp"
#include "pspseg/losses.hpp"
#include "pspseg/network.hpp"
#include "pspseg/optim.hpp"
#include "pspseg/pruning.hpp"

namespace pspseg {

struct TrainConfig {
  std::string mode = "psp";  // psp | retrain
  ModelConfig model = ModelConfig::from_variant("mini");
  // retrain: checkpoint directory or architecture JSON holding the pruned descriptor
  std::string architecture;
  LossConfig loss;
  OptimizerConfig optimizer;
  int batch_size = 2;
  Dims3 patch_size{32, 32, 32};
  int epochs = 50;
  int iterations_per_epoch = 50;
  int calibration_count = 16;
  int initial_p = -1;  // -1: the variant's default
  std::uint64_t seed = 0;
  std::string dataset;     // manifest.json path
  std::string output_dir;
  std::string precision = "float32";  // float32 | float64
  int checkpoint_every = 10;           // 0: only at events and the end
  int eval_every = 0;                  // 0: only at the end
  int eval_cases = 0;                  // cap on test cases for periodic evaluation, 0 = all
  ControllerConfig controller;

  void validate() const;
  int prune_step() const { return initial_p >= 0 ? initial_p : model.default_prune_step(); }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig read_train_config(const std::filesystem::path& path);

struct EpochRecord {
  int epoch = 0;
  double l_seg = 0, l_tr = 0, l_rl = 0, l_total = 0;
  std::int64_t params_effective = 0;
  std::int64_t branches_active = 0;
  std::string event;  // controller events this epoch, ';'-joined
  double seconds = 0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

inline constexpr const char* kEpochCsvHeader =
    "epoch,l_seg,l_tr,l_rl,l_total,params_effective,branches_active,event,seconds";
std::string csv_line(const EpochRecord& r);
std::vector<EpochRecord> read_epoch_csv(const std::filesystem::path& path);

struct TrainResult {
  std::vector<EpochRecord> records;
  std::vector<ControllerEvent> events;
  nlohmann::json eval_history;  // [{epoch, dsc: [...], mean_fg_dsc, params_effective, commits_so_far}]
  nlohmann::json final_metrics;
  std::filesystem::path final_checkpoint;
  std::int64_t initial_params = 0;
  std::int64_t final_params = 0;
  double seconds = 0;
};

using EpochCallback = std::function<void(const EpochRecord&, const std::vector<ControllerEvent>&)>;

// Writes epochs.csv, events.jsonl, timeline.json, summary.json and
// checkpoints/ under config.output_dir. With `resume`, continues the run
// stored in that checkpoint; earlier records are taken from it.
TrainResult train(const TrainConfig& config, const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Runs `predict` ([1,1,window] -> [1,C,window]) over windows with half-window
// stride, the last window flush with the volume end, and averages the logits.
// Volumes smaller than the window along an axis are zero-padded symmetrically.
// Returns [C, D, H, W] logits.
template <class Real>
Tensor<Real> sliding_window_logits(const Volume& image, const Dims3& window, std::int64_t num_classes,
                                   const std::function<Tensor<Real>(const Tensor<Real>&)>& predict,
                                   bool* padded = nullptr);

template <class Real>
LabelVolume argmax_labels(const Tensor<Real>& logits, const Dims3& dims, const Spacing3& spacing);

// Per-case and mean DSC/NSD for classes 1..num_classes-1.
nlohmann::json score_cases(const std::vector<std::pair<LabelVolume, LabelVolume>>& pred_gt, int num_classes,
                           double nsd_tolerance_mm = 2.0);

template <class Real>
nlohmann::json evaluate_network(const Network<Real>& net, const DatasetManifest& data, const std::string& split,
                                const Dims3& window, std::size_t max_cases = 0);

// Loads `checkpoint` at the config's precision and scores `split`.
nlohmann::json evaluate(const TrainConfig& config, const std::filesystem::path& checkpoint, const std::string& split);

// ---------------------------------------------------------------------------
// Timeline
// ---------------------------------------------------------------------------

std::vector<ControllerEvent> read_events(const std::filesystem::path& jsonl);

// Per-epoch branch-state matrix rebuilt from an event log that starts with Init.
nlohmann::json build_timeline(const std::vector<ControllerEvent>& events);

}  // namespace pspseg
