#include "pspseg/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pspseg/errors.hpp"
#include "pspseg/rng.hpp"

namespace pspseg {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kPhantomStream = 0x9a47;
constexpr std::uint32_t kDatasetStream = 0xda7a;

std::string dims_str(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

void check_grid(const Dims3& dims, const Spacing3& spacing, std::size_t count, const char* what) {
  for (auto d : dims) {
    if (d <= 0) throw ShapeError(std::string(what) + " dims must be positive, got " + dims_str(dims));
  }
  for (auto s : spacing) {
    if (!(s > 0) || !std::isfinite(s)) throw DataError(std::string(what) + " spacing must be positive");
  }
  if (static_cast<std::int64_t>(count) != dims_volume(dims)) {
    throw ShapeError(std::string(what) + " holds " + std::to_string(count) + " voxels, dims " + dims_str(dims) +
                     " need " + std::to_string(dims_volume(dims)));
  }
}

std::vector<std::uint8_t> class_mask(const LabelVolume& v, int cls) {
  std::vector<std::uint8_t> m(v.labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = v.labels[i] == cls ? 1 : 0;
  return m;
}

void check_pair(const LabelVolume& a, const LabelVolume& b, bool spacing) {
  if (a.dims != b.dims) throw ShapeError("label volumes differ in dims: " + dims_str(a.dims) + " vs " + dims_str(b.dims));
  if (spacing && a.spacing != b.spacing) throw ShapeError("label volumes differ in spacing");
}

template <class T>
void write_le(std::ofstream& out, const std::vector<T>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (const T& v : values) {
      char bytes[sizeof(T)];
      std::memcpy(bytes, &v, sizeof(T));
      std::reverse(bytes, bytes + sizeof(T));
      out.write(bytes, sizeof(T));
    }
  }
}

template <class T>
std::vector<T> read_le(const fs::path& path, std::int64_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::int64_t>(in.tellg());
  if (bytes != expected * static_cast<std::int64_t>(sizeof(T))) {
    throw DataError(path.string() + ": sidecar dims need " + std::to_string(expected) + " values (" +
                    std::to_string(expected * static_cast<std::int64_t>(sizeof(T))) + " bytes), payload has " +
                    std::to_string(bytes) + " bytes");
  }
  in.seekg(0);
  std::vector<T> values(static_cast<std::size_t>(expected));
  in.read(reinterpret_cast<char*>(values.data()), bytes);
  if (!in) throw IoError("short read from " + path.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : values) {
      char b[sizeof(T)];
      std::memcpy(b, &v, sizeof(T));
      std::reverse(b, b + sizeof(T));
      std::memcpy(&v, b, sizeof(T));
    }
  }
  return values;
}

fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".json"); }

void write_sidecar(const fs::path& path, const Dims3& dims, const Spacing3& spacing, const char* dtype) {
  nlohmann::json j = {{"dims", dims}, {"spacing", spacing}, {"dtype", dtype}, {"order", "x-fastest"}};
  std::ofstream out(sidecar_path(path));
  if (!out) throw IoError("cannot write " + sidecar_path(path).string());
  out << j.dump(2) << "\n";
}

nlohmann::json read_sidecar(const fs::path& path, Dims3& dims, Spacing3& spacing) {
  const auto side = sidecar_path(path);
  std::ifstream in(side);
  if (!in) throw IoError("missing sidecar " + side.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    dims = j.at("dims").get<Dims3>();
    spacing = j.at("spacing").get<Spacing3>();
    if (j.value("order", std::string("x-fastest")) != "x-fastest") throw DataError("unsupported voxel order");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(side.string() + ": " + e.what());
  }
  return j;
}

}  // namespace

std::int64_t dims_volume(const Dims3& dims) { return dims[0] * dims[1] * dims[2]; }

void Volume::validate() const { check_grid(dims, spacing, voxels.size(), "volume"); }

void LabelVolume::validate(int num_classes) const {
  check_grid(dims, spacing, labels.size(), "label volume");
  for (auto v : labels) {
    if (v >= num_classes) throw DataError("label " + std::to_string(v) + " outside [0," + std::to_string(num_classes) + ")");
  }
}

void PhantomSpec::validate() const {
  check_grid(dims, spacing, static_cast<std::size_t>(dims_volume(dims)), "phantom");
  if (!(organ_semi_axes[0] > 0) || organ_semi_axes[1] < organ_semi_axes[0]) throw ConfigError("bad organ semi-axis range");
  if (!(tumor_radius[0] > 0) || tumor_radius[1] < tumor_radius[0]) throw ConfigError("bad tumor radius range");
  if (noise_sigma < 0) throw ConfigError("noise_sigma must be non-negative");
  for (auto d : dims) {
    if (2 * organ_semi_axes[1] + 1 > static_cast<double>(d)) {
      throw ConfigError("organ semi-axes up to " + std::to_string(organ_semi_axes[1]) + " do not fit dims " +
                        dims_str(dims));
    }
  }
  if (tumor_inside_organ && tumor_radius[1] >= organ_semi_axes[0]) {
    throw ConfigError("tumor radius must stay below the smallest organ semi-axis");
  }
}

PhantomSpec PhantomSpec::for_dims(const Dims3& dims) {
  PhantomSpec s;
  s.dims = dims;
  const double f = static_cast<double>(*std::min_element(dims.begin(), dims.end())) / 32.0;
  for (auto& a : s.organ_semi_axes) a *= f;
  for (auto& r : s.tumor_radius) r *= f;
  return s;
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"dims", s.dims},
       {"spacing", s.spacing},
       {"organ_semi_axes", s.organ_semi_axes},
       {"tumor_radius", s.tumor_radius},
       {"intensity_mean", s.intensity_mean},
       {"noise_sigma", s.noise_sigma},
       {"tumor_inside_organ", s.tumor_inside_organ}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  s = PhantomSpec{};
  s.dims = j.value("dims", s.dims);
  s.spacing = j.value("spacing", s.spacing);
  s.organ_semi_axes = j.value("organ_semi_axes", s.organ_semi_axes);
  s.tumor_radius = j.value("tumor_radius", s.tumor_radius);
  s.intensity_mean = j.value("intensity_mean", s.intensity_mean);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.tumor_inside_organ = j.value("tumor_inside_organ", s.tumor_inside_organ);
}

std::pair<Volume, LabelVolume> generate_phantom(std::uint64_t seed, const PhantomSpec& spec) {
  spec.validate();
  Philox rng(seed, stream_id(kPhantomStream));
  const auto [D, H, W] = spec.dims;
  const Dims3 dims = spec.dims;

  std::array<double, 3> axes{}, centre{};
  for (int a = 0; a < 3; ++a) axes[a] = rng.uniform(spec.organ_semi_axes[0], spec.organ_semi_axes[1]);
  for (int a = 0; a < 3; ++a) {
    const double lo = axes[a], hi = static_cast<double>(dims[a] - 1) - axes[a];
    centre[a] = rng.uniform(lo, hi);
  }
  auto in_organ = [&](double z, double y, double x) {
    const double dz = (z - centre[0]) / axes[0], dy = (y - centre[1]) / axes[1], dx = (x - centre[2]) / axes[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  };

  const double r = rng.uniform(spec.tumor_radius[0], spec.tumor_radius[1]);
  std::array<double, 3> tc{};
  if (spec.tumor_inside_organ) {
    // Rejection sample a centre inside the organ shrunk by r.
    for (;;) {
      for (int a = 0; a < 3; ++a) tc[a] = centre[a] + rng.uniform(-(axes[a] - r), axes[a] - r);
      double q = 0;
      for (int a = 0; a < 3; ++a) q += ((tc[a] - centre[a]) / (axes[a] - r)) * ((tc[a] - centre[a]) / (axes[a] - r));
      if (q <= 1.0) break;
    }
  } else {
    for (int a = 0; a < 3; ++a) tc[a] = rng.uniform(r, static_cast<double>(dims[a] - 1) - r);
  }

  Volume img{dims, spec.spacing, std::vector<float>(static_cast<std::size_t>(dims_volume(dims)))};
  LabelVolume lab{dims, spec.spacing, std::vector<std::uint16_t>(img.voxels.size())};
  std::size_t i = 0;
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x, ++i) {
        const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
        std::uint16_t cls = 0;
        if (in_organ(fz, fy, fx)) {
          cls = 1;
          const double dz = fz - tc[0], dy = fy - tc[1], dx = fx - tc[2];
          if (dz * dz + dy * dy + dx * dx <= r * r) cls = 2;
        } else if (!spec.tumor_inside_organ) {
          const double dz = fz - tc[0], dy = fy - tc[1], dx = fx - tc[2];
          if (dz * dz + dy * dy + dx * dx <= r * r) cls = 2;
        }
        lab.labels[i] = cls;
        const double v = spec.intensity_mean[cls] + spec.noise_sigma * rng.normal();
        img.voxels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return {std::move(img), std::move(lab)};
}

std::vector<LabelVolume> label_pyramid(const LabelVolume& labels, int levels) {
  labels.validate(65536);
  LabelTensor t{{1, labels.dims[0], labels.dims[1], labels.dims[2]},
                std::vector<std::int32_t>(labels.labels.begin(), labels.labels.end())};
  std::vector<LabelVolume> out;
  Spacing3 spacing = labels.spacing;
  for (const auto& level : label_pyramid(t, levels)) {
    out.push_back({{level.shape[1], level.shape[2], level.shape[3]},
                   spacing,
                   std::vector<std::uint16_t>(level.labels.begin(), level.labels.end())});
    for (auto& s : spacing) s *= 2;
  }
  return out;
}

double dice_score(const LabelVolume& pred, const LabelVolume& gt, int cls) {
  check_pair(pred, gt, false);
  std::int64_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const bool a = pred.labels[i] == cls, b = gt.labels[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::array<int, 3>> boundary_voxels(const std::vector<std::uint8_t>& mask, const Dims3& dims) {
  const int D = static_cast<int>(dims[0]), H = static_cast<int>(dims[1]), W = static_cast<int>(dims[2]);
  auto fg = [&](int z, int y, int x) {
    if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
    return mask[(static_cast<std::size_t>(z) * H + y) * W + x] != 0;
  };
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!fg(z, y, x)) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
            !fg(z, y, x + 1)) {
          out.push_back({z, y, x});
        }
      }
  return out;
}

double nsd_masks(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, const Dims3& dims,
                 const Spacing3& spacing, double tolerance_mm) {
  if (static_cast<std::int64_t>(pred.size()) != dims_volume(dims) || pred.size() != gt.size()) {
    throw ShapeError("nsd: mask sizes do not match dims " + dims_str(dims));
  }
  if (!(tolerance_mm >= 0)) throw ContractError("nsd tolerance must be non-negative");
  const auto bp = boundary_voxels(pred, dims);
  const auto bg = boundary_voxels(gt, dims);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;

  const int D = static_cast<int>(dims[0]), H = static_cast<int>(dims[1]), W = static_cast<int>(dims[2]);
  // Offsets within the tolerance ball, in voxels.
  std::vector<std::array<int, 3>> ball;
  std::array<int, 3> reach{};
  for (int a = 0; a < 3; ++a) reach[a] = static_cast<int>(std::floor(tolerance_mm / spacing[a])) + 1;
  const double tol2 = tolerance_mm * tolerance_mm;
  for (int oz = -reach[0]; oz <= reach[0]; ++oz)
    for (int oy = -reach[1]; oy <= reach[1]; ++oy)
      for (int ox = -reach[2]; ox <= reach[2]; ++ox) {
        const double dz = oz * spacing[0], dy = oy * spacing[1], dx = ox * spacing[2];
        if (dz * dz + dy * dy + dx * dx <= tol2) ball.push_back({oz, oy, ox});
      }

  auto surface_grid = [&](const std::vector<std::array<int, 3>>& pts) {
    std::vector<std::uint8_t> g(pred.size(), 0);
    for (const auto& p : pts) g[(static_cast<std::size_t>(p[0]) * H + p[1]) * W + p[2]] = 1;
    return g;
  };
  const auto sp = surface_grid(bp), sg = surface_grid(bg);
  auto hits = [&](const std::vector<std::array<int, 3>>& pts, const std::vector<std::uint8_t>& other) {
    std::size_t n = 0;
    for (const auto& p : pts) {
      for (const auto& o : ball) {
        const int z = p[0] + o[0], y = p[1] + o[1], x = p[2] + o[2];
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) continue;
        if (other[(static_cast<std::size_t>(z) * H + y) * W + x]) {
          ++n;
          break;
        }
      }
    }
    return n;
  };
  const std::size_t total = hits(bp, sg) + hits(bg, sp);
  return static_cast<double>(total) / static_cast<double>(bp.size() + bg.size());
}

double nsd_score(const LabelVolume& pred, const LabelVolume& gt, int cls, double tolerance_mm) {
  check_pair(pred, gt, true);
  return nsd_masks(class_mask(pred, cls), class_mask(gt, cls), gt.dims, gt.spacing, tolerance_mm);
}

void write_volume(const fs::path& path, const Volume& v) {
  v.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_le(out, v.voxels);
  write_sidecar(path, v.dims, v.spacing, "float32");
}

void write_volume(const fs::path& path, const LabelVolume& v) {
  v.validate(65536);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_le(out, v.labels);
  write_sidecar(path, v.dims, v.spacing, "uint16");
}

Volume read_volume(const fs::path& path) {
  Volume v;
  const auto side = read_sidecar(path, v.dims, v.spacing);
  const auto dtype = side.value("dtype", std::string{});
  if (dtype != "float32") throw DataError(path.string() + ": expected dtype float32, got '" + dtype + "'");
  v.voxels = read_le<float>(path, dims_volume(v.dims));
  v.validate();
  return v;
}

LabelVolume read_label_volume(const fs::path& path) {
  LabelVolume v;
  const auto side = read_sidecar(path, v.dims, v.spacing);
  const auto dtype = side.value("dtype", std::string{});
  if (dtype != "uint16") throw DataError(path.string() + ": expected dtype uint16, got '" + dtype + "'");
  v.labels = read_le<std::uint16_t>(path, dims_volume(v.dims));
  v.validate(65536);
  return v;
}

std::vector<std::size_t> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (cases[i].split == split) idx.push_back(i);
  }
  return idx;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& c : j.at("cases")) {
      m.cases.push_back({c.at("id").get<std::string>(), c.at("image").get<std::string>(),
                         c.at("label").get<std::string>(), c.at("split").get<std::string>()});
    }
    if (j.contains("generator")) m.generator = j.at("generator");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (m.cases.empty()) throw DataError(path.string() + " lists no cases");
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : m.cases) {
    cases.push_back({{"id", c.id}, {"image", c.image.string()}, {"label", c.label.string()}, {"split", c.split}});
  }
  nlohmann::json j = {{"format", "pspseg-dataset"}, {"version", 1}, {"cases", cases}};
  if (!m.generator.is_null()) j["generator"] = m.generator;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

DatasetManifest generate_dataset(const fs::path& out_dir, std::size_t count, const PhantomSpec& spec,
                                 std::uint64_t seed, double test_fraction) {
  if (count == 0) throw ConfigError("dataset count must be positive");
  if (!(test_fraction >= 0 && test_fraction < 1)) throw ConfigError("test_fraction must lie in [0,1)");
  fs::create_directories(out_dir);
  DatasetManifest m;
  m.root = out_dir;
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(count) * test_fraction));
  for (std::size_t i = 0; i < count; ++i) {
    std::ostringstream id;
    id << "case_" << std::setw(4) << std::setfill('0') << i;
    const auto [img, lab] = generate_phantom(stream_id(kDatasetStream, seed, i), spec);
    const std::string image = id.str() + "_image.raw", label = id.str() + "_label.raw";
    write_volume(out_dir / image, img);
    write_volume(out_dir / label, lab);
    m.cases.push_back({id.str(), image, label, i + n_test >= count ? "test" : "train"});
  }
  m.generator = {{"kind", "phantom"}, {"seed", seed}, {"count", count}, {"spec", spec}};
  write_manifest(out_dir / "manifest.json", m);
  return m;
}

LoadedCase load_case(const DatasetManifest& m, std::size_t index) {
  const auto& c = m.cases.at(index);
  LoadedCase lc{read_volume(m.root / c.image), read_label_volume(m.root / c.label)};
  if (lc.image.dims != lc.label.dims) throw DataError(c.id + ": image and label dims differ");
  return lc;
}

}  // namespace pspseg
