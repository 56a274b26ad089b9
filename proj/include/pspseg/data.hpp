#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pspseg/losses.hpp"

namespace pspseg {

using Dims3 = std::array<std::int64_t, 3>;  // D, H, W
using Spacing3 = std::array<double, 3>;     // mm per voxel along D, H, W

std::int64_t dims_volume(const Dims3& dims);

// Grids are stored with x (W) fastest.
struct Volume {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1, 1, 1};
  std::vector<float> voxels;

  void validate() const;
};

struct LabelVolume {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1, 1, 1};
  std::vector<std::uint16_t> labels;

  void validate(int num_classes = 3) const;
};

struct PhantomSpec {
  Dims3 dims{32, 32, 32};
  Spacing3 spacing{1, 1, 1};
  std::array<double, 2> organ_semi_axes{8, 12};  // voxels, [min, max]
  std::array<double, 2> tumor_radius{2, 4};      // voxels, [min, max]
  std::array<double, 3> intensity_mean{0.2, 0.55, 0.8};  // background, organ, tumor
  double noise_sigma = 0.1;
  bool tumor_inside_organ = true;

  void validate() const;
  // Defaults with organ and tumour sizes scaled by min(dims) / 32.
  static PhantomSpec for_dims(const Dims3& dims);
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

// Axis-aligned ellipsoid organ (label 1) at a random interior centre and a
// spherical tumour (label 2) carved from it. Only integer RNG output and basic
// IEEE arithmetic are involved, so the result is platform independent.
std::pair<Volume, LabelVolume> generate_phantom(std::uint64_t seed, const PhantomSpec& spec);

std::vector<LabelVolume> label_pyramid(const LabelVolume& labels, int levels);

// 2|P n G| / (|P| + |G|); 1 when both are empty.
double dice_score(const LabelVolume& pred, const LabelVolume& gt, int cls);

// Foreground voxels with a 6-neighbour that is background or off the grid.
std::vector<std::array<int, 3>> boundary_voxels(const std::vector<std::uint8_t>& mask, const Dims3& dims);

// Normalized surface dice at `tolerance_mm`; 1 when both masks are empty, 0
// when exactly one is.
double nsd_score(const LabelVolume& pred, const LabelVolume& gt, int cls, double tolerance_mm);
double nsd_masks(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, const Dims3& dims,
                 const Spacing3& spacing, double tolerance_mm);

// ---------------------------------------------------------------------------
// Raw volume files: little-endian payload plus a JSON sidecar at path + ".json".
// ---------------------------------------------------------------------------

void write_volume(const std::filesystem::path& path, const Volume& v);
void write_volume(const std::filesystem::path& path, const LabelVolume& v);
Volume read_volume(const std::filesystem::path& path);
LabelVolume read_label_volume(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetCase {
  std::string id;
  std::filesystem::path image;  // relative to the manifest directory
  std::filesystem::path label;
  std::string split;  // "train" or "test"
};

struct DatasetManifest {
  std::filesystem::path root;  // directory holding manifest.json
  std::vector<DatasetCase> cases;
  nlohmann::json generator;  // how the data was produced, if synthetic

  std::vector<std::size_t> split_indices(const std::string& split) const;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);

// Writes `count` phantoms plus manifest.json into out_dir; the last
// floor(count * test_fraction) cases form the test split.
DatasetManifest generate_dataset(const std::filesystem::path& out_dir, std::size_t count, const PhantomSpec& spec,
                                 std::uint64_t seed, double test_fraction = 0.2);

struct LoadedCase {
  Volume image;
  LabelVolume label;
};

LoadedCase load_case(const DatasetManifest& m, std::size_t index);

}  // namespace pspseg
