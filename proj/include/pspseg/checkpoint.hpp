#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "pspseg/network.hpp"
#include "pspseg/optim.hpp"
#include "pspseg/pruning.hpp"

namespace pspseg {

inline constexpr const char* kCheckpointMagic = "pspseg-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// A checkpoint is a directory holding manifest.json and blobs.bin. The blob
// file starts with an 8-byte tag followed by every parameter and optimizer
// buffer in manifest order, little-endian, in the stored precision.
template <class Real>
struct Checkpoint {
  Network<Real> network;
  std::optional<Optimizer<Real>> optimizer;
  ControllerState controller;
  int epoch = 0;                // last completed epoch
  nlohmann::json train_config;  // as given to train()
  nlohmann::json records;       // epoch records written so far
  nlohmann::json extra;         // evaluation history and other run metadata
  std::uint64_t seed = 0;       // network initialisation seed
};

template <class Real>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<Real>& ckpt);

// Values stored at another precision are converted.
template <class Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& dir);

// Manifest only: architecture, epoch, controller state, without blobs.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

}  // namespace pspseg
