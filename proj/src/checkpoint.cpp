#include "pspseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "pspseg/errors.hpp"

namespace pspseg {

namespace fs = std::filesystem;

namespace {

constexpr char kBlobTag[8] = {'P', 'S', 'P', 'S', 'B', 'L', 'O', 'B'};

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

template <class Real>
const char* dtype_name() {
  return std::is_same_v<Real, float> ? "float32" : "float64";
}

class BlobWriter {
 public:
  template <class T>
  std::int64_t put(const T* data, std::size_t count) {
    const auto offset = static_cast<std::int64_t>(bytes_.size());
    const auto* p = reinterpret_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + count * sizeof(T));
    return offset;
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

// Reads `count` values stored as `dtype` at `offset` and converts them to Real.
template <class Real>
std::vector<Real> take(const std::vector<char>& blob, std::int64_t offset, std::int64_t count, const std::string& dtype,
                       const std::string& what) {
  const std::size_t width = dtype == "float32" ? 4 : 8;
  if (offset < 0 || count < 0 || static_cast<std::size_t>(offset) + count * width > blob.size()) {
    throw CorruptionError(what + " lies outside the blob (" + std::to_string(blob.size()) + " bytes)");
  }
  std::vector<Real> out(static_cast<std::size_t>(count));
  const char* p = blob.data() + offset;
  for (std::int64_t i = 0; i < count; ++i) {
    if (width == 4) {
      float v;
      std::memcpy(&v, p + i * 4, 4);
      out[i] = static_cast<Real>(v);
    } else {
      double v;
      std::memcpy(&v, p + i * 8, 8);
      out[i] = static_cast<Real>(v);
    }
  }
  return out;
}

std::vector<char> read_blob(const fs::path& path, std::int64_t expected_bytes, std::uint64_t expected_hash) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto size = static_cast<std::int64_t>(in.tellg());
  const auto want = expected_bytes + static_cast<std::int64_t>(sizeof(kBlobTag));
  if (size != want) {
    throw CorruptionError(path.string() + " is " + std::to_string(size) + " bytes, manifest expects " +
                          std::to_string(want) + (size < want ? " (truncated)" : ""));
  }
  in.seekg(0);
  char tag[sizeof(kBlobTag)];
  in.read(tag, sizeof(tag));
  if (!in || std::memcmp(tag, kBlobTag, sizeof(tag)) != 0) throw CorruptionError(path.string() + ": bad blob tag");
  std::vector<char> blob(static_cast<std::size_t>(expected_bytes));
  in.read(blob.data(), expected_bytes);
  if (!in) throw CorruptionError("short read from " + path.string());
  if (fnv1a(blob.data(), blob.size()) != expected_hash) throw CorruptionError(path.string() + ": checksum mismatch");
  return blob;
}

}  // namespace

nlohmann::json read_checkpoint_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("no checkpoint manifest at " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
  if (j.value("magic", std::string{}) != kCheckpointMagic) throw CorruptionError(path.string() + ": not a checkpoint");
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion) {
    throw CorruptionError(path.string() + ": checkpoint version " + std::to_string(version) + ", supported " +
                          std::to_string(kCheckpointVersion));
  }
  return j;
}

template <class Real>
void save_checkpoint(const fs::path& dir, const Checkpoint<Real>& ckpt) {
  fs::create_directories(dir);
  BlobWriter blob;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : ckpt.network.parameters()) {
    const auto off = blob.put(p.tensor.ptr(), static_cast<std::size_t>(p.tensor.numel()));
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", off}, {"count", p.tensor.numel()}});
  }
  nlohmann::json opt;
  if (ckpt.optimizer) {
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& [name, s] : ckpt.optimizer->slots()) {
      nlohmann::json e = {{"name", name}, {"step", s.step}, {"count", s.m.size()}};
      e["m_offset"] = blob.put(s.m.data(), s.m.size());
      e["v_count"] = s.v.size();
      e["v_offset"] = blob.put(s.v.data(), s.v.size());
      slots.push_back(std::move(e));
    }
    opt = {{"config", ckpt.optimizer->config()}, {"slots", slots}};
  }
  const auto& bytes = blob.bytes();
  nlohmann::json m = {{"magic", kCheckpointMagic},
                      {"version", kCheckpointVersion},
                      {"dtype", dtype_name<Real>()},
                      {"epoch", ckpt.epoch},
                      {"seed", ckpt.seed},
                      {"architecture", ckpt.network.descriptor()},
                      {"parameters", params},
                      {"optimizer", opt},
                      {"controller", ckpt.controller},
                      {"train_config", ckpt.train_config},
                      {"records", ckpt.records},
                      {"extra", ckpt.extra},
                      {"rng", {{"generator", "philox4x32-10"}, {"seed", ckpt.seed}, {"next_epoch", ckpt.epoch + 1}}},
                      {"blob", {{"file", "blobs.bin"}, {"bytes", bytes.size()}, {"fnv1a64", fnv1a(bytes.data(), bytes.size())}}}};

  // Write to temporaries first so an interrupted save never leaves a torn pair.
  const auto blob_tmp = dir / "blobs.bin.tmp", manifest_tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(blob_tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + blob_tmp.string());
    out.write(kBlobTag, sizeof(kBlobTag));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + blob_tmp.string());
  }
  {
    std::ofstream out(manifest_tmp);
    if (!out) throw IoError("cannot write " + manifest_tmp.string());
    out << m.dump(1) << "\n";
  }
  fs::rename(blob_tmp, dir / "blobs.bin");
  fs::rename(manifest_tmp, dir / "manifest.json");
}

template <class Real>
Checkpoint<Real> load_checkpoint(const fs::path& dir) {
  const auto m = read_checkpoint_manifest(dir);
  Checkpoint<Real> ckpt;
  try {
    const auto dtype = m.at("dtype").get<std::string>();
    if (dtype != "float32" && dtype != "float64") throw CorruptionError("unknown dtype '" + dtype + "'");
    const auto& b = m.at("blob");
    const auto blob = read_blob(dir / b.at("file").get<std::string>(), b.at("bytes").get<std::int64_t>(),
                                b.at("fnv1a64").get<std::uint64_t>());

    ckpt.seed = m.at("seed").get<std::uint64_t>();
    ckpt.epoch = m.at("epoch").get<int>();
    const auto descriptor = m.at("architecture").get<ArchitectureDescriptor>();
    ckpt.network = Network<Real>::from_descriptor(descriptor, ckpt.seed);

    std::map<std::string, nlohmann::json> stored;
    for (const auto& p : m.at("parameters")) stored[p.at("name").get<std::string>()] = p;
    const auto live = ckpt.network.parameters();
    if (live.size() != stored.size()) {
      throw CorruptionError("architecture implies " + std::to_string(live.size()) + " parameter tensors, checkpoint holds " +
                            std::to_string(stored.size()));
    }
    for (const auto& p : live) {
      const std::string name = p.name;
      const auto it = stored.find(name);
      if (it == stored.end()) throw CorruptionError("checkpoint lacks parameter " + name);
      const nlohmann::json& e = it->second;
      const auto shape = e.at("shape").get<Shape>();
      if (shape != p.tensor.shape()) {
        throw CorruptionError(p.name + ": stored shape " + shape_str(shape) + " but the architecture needs " +
                              shape_str(p.tensor.shape()));
      }
      const auto values = take<Real>(blob, e.at("offset").get<std::int64_t>(),
                                     e.at("count").get<std::int64_t>(), dtype, name);
      if (static_cast<std::int64_t>(values.size()) != p.tensor.numel()) throw CorruptionError(p.name + ": count mismatch");
      auto t = p.tensor;
      std::copy(values.begin(), values.end(), t.data().begin());
    }

    const auto& opt = m.at("optimizer");
    if (!opt.is_null() && !opt.empty()) {
      Optimizer<Real> o(opt.at("config").get<OptimizerConfig>());
      for (const auto& s : opt.at("slots")) {
        SlotState<Real> slot;
        const auto name = s.at("name").get<std::string>();
        slot.step = s.at("step").get<std::int64_t>();
        slot.m = take<Real>(blob, s.at("m_offset").get<std::int64_t>(), s.at("count").get<std::int64_t>(), dtype,
                            name + " (m)");
        slot.v = take<Real>(blob, s.at("v_offset").get<std::int64_t>(), s.at("v_count").get<std::int64_t>(), dtype,
                            name + " (v)");
        o.slots()[name] = std::move(slot);
      }
      ckpt.optimizer = std::move(o);
    }
    ckpt.controller = m.at("controller").get<ControllerState>();
    ckpt.train_config = m.value("train_config", nlohmann::json{});
    ckpt.records = m.value("records", nlohmann::json::array());
    ckpt.extra = m.value("extra", nlohmann::json{});
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError((dir / "manifest.json").string() + ": " + e.what());
  }
  return ckpt;
}

template void save_checkpoint(const fs::path&, const Checkpoint<float>&);
template void save_checkpoint(const fs::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint(const fs::path&);
template Checkpoint<double> load_checkpoint(const fs::path&);

}  // namespace pspseg
