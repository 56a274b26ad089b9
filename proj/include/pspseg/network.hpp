#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pspseg/ops.hpp"
#include "pspseg/tensor.hpp"

namespace pspseg {

enum class BranchState { Active, Masked, Pruned };

std::string_view to_string(BranchState state);
BranchState parse_branch_state(std::string_view text);

// Squeeze (1x1x1) -> instance norm -> leaky ReLU -> expand (k1 x k2 x k3).
struct EfficientBlockSpec {
  Index3 kernel{1, 1, 1};
  std::int64_t channels = 1;
  double squeeze_ratio = 0.5;

  std::int64_t squeeze_channels() const;
  // Closed-form count of squeeze conv + norm affine + expand conv parameters.
  std::int64_t parameter_count() const;
};

template <class Real>
struct EfficientBlockParams {
  Tensor<Real> squeeze_weight, squeeze_bias;
  Tensor<Real> norm_scale, norm_shift;
  Tensor<Real> expand_weight, expand_bias;
};

template <class Real>
struct Branch {
  EfficientBlockSpec spec;
  std::optional<EfficientBlockParams<Real>> params;  // empty once pruned
  Tensor<Real> weight;                               // learnable scalar w, shape [1]
  BranchState state = BranchState::Active;

  // Block parameters plus w; 0 when pruned.
  std::int64_t parameter_count() const;
};

template <class Real>
struct Prm {
  std::string id;  // enc<i>, bn, dec<i>
  std::int64_t channels = 0;
  std::vector<Branch<Real>> branches;

  std::size_t count(BranchState state) const;
};

template <class Real>
Tensor<Real> eb_forward(const Branch<Real>& branch, const Tensor<Real>& x);

// x + sum over active branches of w_i * EB_i(x), accumulated in branch order.
template <class Real>
Tensor<Real> prm_forward(const Prm<Real>& prm, const Tensor<Real>& x);

struct ModelConfig {
  std::string variant = "custom";
  int depth = 3;
  std::vector<std::int64_t> channels;
  std::vector<Index3> kernels;  // branch kernel set shared by every PRM
  std::int64_t num_classes = 3;
  std::int64_t in_channels = 1;
  double squeeze_ratio = 0.5;
  // Optional per-PRM kernel lists, forward order; overrides `kernels` for
  // compact architectures whose PRMs kept different branches.
  std::vector<std::vector<Index3>> prm_kernels;

  void validate() const;
  int supervision_levels() const { return depth - 1; }
  std::size_t prm_count() const { return static_cast<std::size_t>(2 * depth - 1); }
  // Spatial extents must be multiples of this.
  std::int64_t extent_multiple() const { return std::int64_t{1} << (depth - 1); }
  const std::vector<Index3>& kernels_for(std::size_t prm_index) const;

  // "S", "B", "L" as published, plus "mini" (d=3, channels 8/16/32, S kernels).
  static ModelConfig from_variant(std::string_view name);
  // Initial prune step: 2 for L, 1 otherwise.
  int default_prune_step() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// JSON-serializable architecture: what checkpoints and the retrain mode consume.
struct ArchitectureDescriptor {
  ModelConfig config;
  std::vector<std::vector<BranchState>> branch_states;  // [prm][branch]
  std::vector<std::string> prm_ids;

  // Config of a fresh network holding only the surviving (Active) branches.
  ModelConfig compact_config() const;
};

void to_json(nlohmann::json& j, const ArchitectureDescriptor& d);
void from_json(const nlohmann::json& j, ArchitectureDescriptor& d);

struct ParameterCounts {
  std::int64_t effective = 0;  // parameters that take part in the forward pass
  std::int64_t masked = 0;     // held by masked branches
  std::int64_t total = 0;      // effective + masked
};

template <class Real>
struct NamedParameter {
  std::string name;
  Tensor<Real> tensor;
  bool trainable = true;  // false while the owning branch is masked
};

template <class Real>
struct ForwardOutputs {
  std::vector<Tensor<Real>> logits;    // one per decoder level, finest first
  std::vector<Tensor<Real>> features;  // pre-head decoder features F_i, finest first
  Tensor<Real> encoding;               // input of the bottleneck PRM
};

template <class Real>
using PrmObserver = std::function<void(std::size_t prm_index, const Tensor<Real>& input, const Tensor<Real>& output)>;

template <class Real>
struct ConvBlock {
  Tensor<Real> weight, bias;
  Tensor<Real> norm_scale, norm_shift;  // undefined for plain convolutions
  Index3 stride{1, 1, 1};
  Index3 padding{0, 0, 0};
  bool transposed = false;

  Tensor<Real> forward(const Tensor<Real>& x) const;
};

// U-shaped network: stem and stride-2 encoder convs, one PRM per stage,
// transposed-conv decoder with concatenated skips, a 1x1x1 fuse conv, and a
// segmentation head per decoder level.
template <class Real>
class Network {
 public:
  static Network build(const ModelConfig& config, std::uint64_t seed);
  // Skeleton with branch states applied; pruned branches carry no parameters.
  static Network from_descriptor(const ArchitectureDescriptor& descriptor, std::uint64_t seed = 0);

  // Deep copy; the default copy shares parameter storage.
  Network clone() const;

  const ModelConfig& config() const { return config_; }

  ForwardOutputs<Real> forward(const Tensor<Real>& x, const PrmObserver<Real>* observer = nullptr) const;
  // Stem through the bottleneck downsample; equals forward(x).encoding.
  Tensor<Real> encode(const Tensor<Real>& x) const;

  std::size_t prm_count() const { return prms_.size(); }
  Prm<Real>& prm(std::size_t i) { return prms_.at(i); }
  const Prm<Real>& prm(std::size_t i) const { return prms_.at(i); }

  // Every parameter tensor still owned by the network, in a fixed order.
  std::vector<NamedParameter<Real>> parameters() const;
  ParameterCounts parameter_counts() const;
  ArchitectureDescriptor descriptor() const;

  void check_input_extents(const Shape& shape) const;

 private:
  Tensor<Real> run_encoder(const Tensor<Real>& x, std::vector<Tensor<Real>>* skips,
                           const PrmObserver<Real>* observer) const;

  ModelConfig config_;
  ConvBlock<Real> stem_;
  std::vector<ConvBlock<Real>> down_;  // down_[i] enters stage i + 1
  std::vector<Prm<Real>> prms_;        // forward order: enc..., bn, dec (deepest first)
  std::vector<ConvBlock<Real>> up_;    // per decoder level, finest first
  std::vector<ConvBlock<Real>> fuse_;
  std::vector<ConvBlock<Real>> heads_;
};

}  // namespace pspseg
