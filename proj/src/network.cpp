#include "pspseg/network.hpp"

#include <cmath>

#include "pspseg/errors.hpp"
#include "pspseg/rng.hpp"

namespace pspseg {

namespace {

constexpr std::uint32_t kInitStream = 0x1a17u;

bool valid_branch_kernel(const Index3& k) {
  for (auto e : k) {
    if (e != 1 && e != 3) return false;
  }
  return true;
}

std::int64_t volume(const Index3& k) { return k[0] * k[1] * k[2]; }

template <class Real>
Tensor<Real> uniform_tensor(const Shape& shape, double bound, Philox& rng) {
  Tensor<Real> t(shape);
  for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <class Real>
Tensor<Real> filled(const Shape& shape, Real value) {
  Tensor<Real> t(shape, value);
  t.set_requires_grad(true);
  return t;
}

// He-uniform bound for a leaky-ReLU network: variance 2 / fan_in.
double he_bound(std::int64_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

template <class Real>
ConvBlock<Real> make_conv(std::int64_t cin, std::int64_t cout, const Index3& k, const Index3& stride,
                          const Index3& padding, bool normalized, Philox& rng) {
  ConvBlock<Real> b;
  b.weight = uniform_tensor<Real>({cout, cin, k[0], k[1], k[2]}, he_bound(cin * volume(k)), rng);
  b.bias = filled<Real>({cout}, Real(0));
  if (normalized) {
    b.norm_scale = filled<Real>({cout}, Real(1));
    b.norm_shift = filled<Real>({cout}, Real(0));
  }
  b.stride = stride;
  b.padding = padding;
  return b;
}

template <class Real>
ConvBlock<Real> make_upsample(std::int64_t cin, std::int64_t cout, Philox& rng) {
  ConvBlock<Real> b;
  b.weight = uniform_tensor<Real>({cin, cout, 2, 2, 2}, he_bound(cin), rng);
  b.bias = filled<Real>({cout}, Real(0));
  b.stride = {2, 2, 2};
  b.transposed = true;
  return b;
}

template <class Real>
Branch<Real> make_branch(const EfficientBlockSpec& spec, std::size_t n_branches, Philox& rng) {
  Branch<Real> br;
  br.spec = spec;
  const std::int64_t c = spec.channels, s = spec.squeeze_channels();
  const Index3& k = spec.kernel;
  EfficientBlockParams<Real> p;
  p.squeeze_weight = uniform_tensor<Real>({s, c, 1, 1, 1}, he_bound(c), rng);
  p.squeeze_bias = filled<Real>({s}, Real(0));
  p.norm_scale = filled<Real>({s}, Real(1));
  p.norm_shift = filled<Real>({s}, Real(0));
  p.expand_weight = uniform_tensor<Real>({c, s, k[0], k[1], k[2]}, he_bound(s * volume(k)), rng);
  p.expand_bias = filled<Real>({c}, Real(0));
  br.params = std::move(p);
  br.weight = filled<Real>({1}, static_cast<Real>(1.0 / static_cast<double>(n_branches)));
  return br;
}

}  // namespace

std::string_view to_string(BranchState state) {
  switch (state) {
    case BranchState::Active:
      return "Active";
    case BranchState::Masked:
      return "Masked";
    case BranchState::Pruned:
      return "Pruned";
  }
  return "?";
}

BranchState parse_branch_state(std::string_view text) {
  if (text == "Active") return BranchState::Active;
  if (text == "Masked") return BranchState::Masked;
  if (text == "Pruned") return BranchState::Pruned;
  throw ConfigError("unknown branch state '" + std::string(text) + "'");
}

std::int64_t EfficientBlockSpec::squeeze_channels() const {
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(static_cast<double>(channels) * squeeze_ratio)));
}

std::int64_t EfficientBlockSpec::parameter_count() const {
  const std::int64_t c = channels, s = squeeze_channels();
  return (s * c + s) + 2 * s + (c * s * volume(kernel) + c);
}

template <class Real>
std::int64_t Branch<Real>::parameter_count() const {
  if (state == BranchState::Pruned || !params) return 0;
  const auto& p = *params;
  return p.squeeze_weight.numel() + p.squeeze_bias.numel() + p.norm_scale.numel() + p.norm_shift.numel() +
         p.expand_weight.numel() + p.expand_bias.numel() + weight.numel();
}

template <class Real>
std::size_t Prm<Real>::count(BranchState state) const {
  std::size_t n = 0;
  for (const auto& b : branches) n += b.state == state ? 1 : 0;
  return n;
}

template <class Real>
Tensor<Real> eb_forward(const Branch<Real>& branch, const Tensor<Real>& x) {
  if (branch.state == BranchState::Pruned || !branch.params) {
    throw LifecycleError("eb_forward on a pruned branch");
  }
  if (x.rank() != 5 || x.dim(1) != branch.spec.channels) {
    throw ShapeError("eb_forward expects " + std::to_string(branch.spec.channels) + " channels, got " +
                     shape_str(x.shape()));
  }
  const auto& p = *branch.params;
  auto h = conv3(x, p.squeeze_weight, p.squeeze_bias, {1, 1, 1}, {0, 0, 0});
  h = instance_norm(h, p.norm_scale, p.norm_shift, Real(1e-5));
  h = leaky_relu(h, Real(0.01));
  return conv3(h, p.expand_weight, p.expand_bias, {1, 1, 1}, same_padding(branch.spec.kernel));
}

template <class Real>
Tensor<Real> prm_forward(const Prm<Real>& prm, const Tensor<Real>& x) {
  Tensor<Real> out = x;
  for (const auto& br : prm.branches) {
    if (br.state != BranchState::Active) continue;
    out = add(out, scalar_multiply(eb_forward(br, x), br.weight));
  }
  return out;
}

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (depth < 2) throw ConfigError("model depth must be >= 2, got " + std::to_string(depth));
  if (static_cast<int>(channels.size()) != depth) {
    throw ConfigError("expected " + std::to_string(depth) + " channel widths, got " + std::to_string(channels.size()));
  }
  for (auto c : channels) {
    if (c < 1) throw ConfigError("channel widths must be positive");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (!(squeeze_ratio > 0 && squeeze_ratio <= 1)) throw ConfigError("squeeze_ratio must be in (0, 1]");
  if (!prm_kernels.empty() && prm_kernels.size() != prm_count()) {
    throw ConfigError("prm_kernels must list " + std::to_string(prm_count()) + " PRMs");
  }
  if (prm_kernels.empty() && kernels.empty()) throw ConfigError("kernel set is empty");
  auto check = [](const std::vector<Index3>& ks) {
    for (const auto& k : ks) {
      if (!valid_branch_kernel(k)) {
        throw ConfigError("branch kernel " + std::to_string(k[0]) + "x" + std::to_string(k[1]) + "x" +
                          std::to_string(k[2]) + " outside {1,3}^3");
      }
    }
  };
  check(kernels);
  for (const auto& ks : prm_kernels) check(ks);
}

const std::vector<Index3>& ModelConfig::kernels_for(std::size_t prm_index) const {
  return prm_kernels.empty() ? kernels : prm_kernels.at(prm_index);
}

ModelConfig ModelConfig::from_variant(std::string_view name) {
  ModelConfig c;
  c.variant = std::string(name);
  std::vector<Index3> small{{1, 1, 1}, {1, 3, 3}, {3, 1, 3}, {3, 3, 1}};
  std::vector<Index3> large{{1, 1, 1}, {1, 1, 3}, {1, 3, 1}, {3, 1, 1}, {1, 3, 3}, {3, 1, 3}, {3, 3, 1}};
  if (name == "S") {
    c.depth = 5;
    c.channels = {16, 32, 64, 128, 256};
    c.kernels = small;
  } else if (name == "B") {
    c.depth = 5;
    c.channels = {16, 32, 64, 128, 256};
    c.kernels = large;
  } else if (name == "L") {
    c.depth = 6;
    c.channels = {16, 32, 64, 128, 256, 320};
    c.kernels = large;
  } else if (name == "mini") {
    c.depth = 3;
    c.channels = {8, 16, 32};
    c.kernels = small;
  } else {
    throw ConfigError("unknown model variant '" + std::string(name) + "'");
  }
  return c;
}

int ModelConfig::default_prune_step() const { return variant == "L" ? 2 : 1; }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", c.variant},       {"depth", c.depth},
                     {"channels", c.channels},     {"kernels", c.kernels},
                     {"num_classes", c.num_classes}, {"in_channels", c.in_channels},
                     {"squeeze_ratio", c.squeeze_ratio}};
  if (!c.prm_kernels.empty()) j["prm_kernels"] = c.prm_kernels;
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("variant") && j.at("variant").get<std::string>() != "custom" && !j.contains("depth")) {
    c = ModelConfig::from_variant(j.at("variant").get<std::string>());
  } else {
    c.variant = j.value("variant", std::string("custom"));
    c.depth = j.at("depth").get<int>();
    c.channels = j.at("channels").get<std::vector<std::int64_t>>();
    c.kernels = j.value("kernels", std::vector<Index3>{});
    c.prm_kernels = j.value("prm_kernels", std::vector<std::vector<Index3>>{});
  }
  c.num_classes = j.value("num_classes", c.num_classes);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.squeeze_ratio = j.value("squeeze_ratio", c.squeeze_ratio);
  c.validate();
}

void to_json(nlohmann::json& j, const ArchitectureDescriptor& d) {
  j = nlohmann::json{{"depth", d.config.depth},
                     {"channels", d.config.channels},
                     {"kernels", d.config.kernels},
                     {"num_classes", d.config.num_classes},
                     {"in_channels", d.config.in_channels},
                     {"squeeze_ratio", d.config.squeeze_ratio},
                     {"variant", d.config.variant},
                     {"prm_ids", d.prm_ids}};
  if (!d.config.prm_kernels.empty()) j["prm_kernels"] = d.config.prm_kernels;
  auto states = nlohmann::json::array();
  for (const auto& row : d.branch_states) {
    auto r = nlohmann::json::array();
    for (auto s : row) r.push_back(std::string(to_string(s)));
    states.push_back(std::move(r));
  }
  j["branch_states"] = std::move(states);
}

void from_json(const nlohmann::json& j, ArchitectureDescriptor& d) {
  ModelConfig c;
  c.variant = j.value("variant", std::string("custom"));
  c.depth = j.at("depth").get<int>();
  c.channels = j.at("channels").get<std::vector<std::int64_t>>();
  c.kernels = j.value("kernels", std::vector<Index3>{});
  c.prm_kernels = j.value("prm_kernels", std::vector<std::vector<Index3>>{});
  c.num_classes = j.at("num_classes").get<std::int64_t>();
  c.in_channels = j.value("in_channels", std::int64_t{1});
  c.squeeze_ratio = j.value("squeeze_ratio", 0.5);
  c.validate();
  d.config = std::move(c);
  d.prm_ids = j.value("prm_ids", std::vector<std::string>{});
  d.branch_states.clear();
  for (const auto& row : j.at("branch_states")) {
    std::vector<BranchState> r;
    for (const auto& s : row) r.push_back(parse_branch_state(s.get<std::string>()));
    d.branch_states.push_back(std::move(r));
  }
  if (d.branch_states.size() != d.config.prm_count()) {
    throw ConfigError("branch_states lists " + std::to_string(d.branch_states.size()) + " PRMs, expected " +
                      std::to_string(d.config.prm_count()));
  }
  for (std::size_t i = 0; i < d.branch_states.size(); ++i) {
    if (d.branch_states[i].size() != d.config.kernels_for(i).size()) {
      throw ConfigError("branch_states row " + std::to_string(i) + " does not match its kernel list");
    }
  }
}

ModelConfig ArchitectureDescriptor::compact_config() const {
  ModelConfig c = config;
  c.variant = "custom";
  c.prm_kernels.clear();
  for (std::size_t i = 0; i < branch_states.size(); ++i) {
    std::vector<Index3> kept;
    const auto& ks = config.kernels_for(i);
    for (std::size_t b = 0; b < ks.size(); ++b) {
      if (branch_states[i][b] == BranchState::Active) kept.push_back(ks[b]);
    }
    c.prm_kernels.push_back(std::move(kept));
  }
  return c;
}

// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> ConvBlock<Real>::forward(const Tensor<Real>& x) const {
  Tensor<Real> h = transposed ? transposed_conv3(x, weight, bias, stride) : conv3(x, weight, bias, stride, padding);
  if (norm_scale.defined()) {
    h = instance_norm(h, norm_scale, norm_shift, Real(1e-5));
    h = leaky_relu(h, Real(0.01));
  }
  return h;
}

template <class Real>
Network<Real> Network<Real>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Network net;
  net.config_ = config;
  Philox rng(seed, stream_id(kInitStream));
  const int d = config.depth;
  const auto& ch = config.channels;

  net.stem_ = make_conv<Real>(config.in_channels, ch[0], {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, true, rng);
  for (int i = 1; i < d; ++i) {
    net.down_.push_back(make_conv<Real>(ch[i - 1], ch[i], {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, true, rng));
  }

  auto make_prm = [&](std::string id, std::int64_t channels, std::size_t index) {
    Prm<Real> prm;
    prm.id = std::move(id);
    prm.channels = channels;
    const auto& ks = config.kernels_for(index);
    for (const auto& k : ks) {
      EfficientBlockSpec spec{k, channels, config.squeeze_ratio};
      prm.branches.push_back(make_branch<Real>(spec, ks.size(), rng));
    }
    return prm;
  };
  std::size_t index = 0;
  for (int i = 0; i < d - 1; ++i, ++index) net.prms_.push_back(make_prm("enc" + std::to_string(i), ch[i], index));
  net.prms_.push_back(make_prm("bn", ch[d - 1], index++));
  for (int k = d - 2; k >= 0; --k, ++index) net.prms_.push_back(make_prm("dec" + std::to_string(k), ch[k], index));

  net.up_.resize(d - 1);
  net.fuse_.resize(d - 1);
  net.heads_.resize(d - 1);
  for (int k = d - 2; k >= 0; --k) {
    net.up_[k] = make_upsample<Real>(ch[k + 1], ch[k], rng);
    net.fuse_[k] = make_conv<Real>(2 * ch[k], ch[k], {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true, rng);
    net.heads_[k] = make_conv<Real>(ch[k], config.num_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, false, rng);
  }
  return net;
}

template <class Real>
Network<Real> Network<Real>::from_descriptor(const ArchitectureDescriptor& descriptor, std::uint64_t seed) {
  Network net = build(descriptor.config, seed);
  if (descriptor.branch_states.size() != net.prms_.size()) throw ConfigError("descriptor PRM count mismatch");
  for (std::size_t i = 0; i < net.prms_.size(); ++i) {
    auto& prm = net.prms_[i];
    if (descriptor.branch_states[i].size() != prm.branches.size()) {
      throw ConfigError("descriptor branch count mismatch in " + prm.id);
    }
    for (std::size_t b = 0; b < prm.branches.size(); ++b) {
      auto& br = prm.branches[b];
      br.state = descriptor.branch_states[i][b];
      if (br.state == BranchState::Pruned) {
        br.params.reset();
        br.weight = Tensor<Real>();
      }
    }
  }
  return net;
}

template <class Real>
Network<Real> Network<Real>::clone() const {
  Network c = *this;
  auto deep = [](Tensor<Real>& t) {
    if (!t.defined()) return;
    const bool rg = t.requires_grad();
    t = t.clone();
    t.set_requires_grad(rg);
  };
  auto deep_block = [&](ConvBlock<Real>& b) {
    deep(b.weight);
    deep(b.bias);
    deep(b.norm_scale);
    deep(b.norm_shift);
  };
  deep_block(c.stem_);
  for (auto* list : {&c.down_, &c.up_, &c.fuse_, &c.heads_}) {
    for (auto& b : *list) deep_block(b);
  }
  for (auto& prm : c.prms_) {
    for (auto& br : prm.branches) {
      deep(br.weight);
      if (br.params) {
        auto& q = *br.params;
        for (auto* t : {&q.squeeze_weight, &q.squeeze_bias, &q.norm_scale, &q.norm_shift, &q.expand_weight,
                        &q.expand_bias}) {
          deep(*t);
        }
      }
    }
  }
  return c;
}

template <class Real>
void Network<Real>::check_input_extents(const Shape& shape) const {
  if (shape.size() != 5) throw ShapeError("network input must be [N,C,D,H,W], got " + shape_str(shape));
  if (shape[1] != config_.in_channels) {
    throw ShapeError("network expects " + std::to_string(config_.in_channels) + " input channels, got " +
                     std::to_string(shape[1]));
  }
  const std::int64_t m = config_.extent_multiple();
  for (std::size_t i = 2; i < 5; ++i) {
    if (shape[i] % m != 0) {
      const std::int64_t next = (shape[i] / m + 1) * m;
      throw ShapeError("spatial extent " + std::to_string(shape[i]) + " is not a multiple of " + std::to_string(m) +
                       "; minimal valid extent >= input is " + std::to_string(next));
    }
  }
}

template <class Real>
Tensor<Real> Network<Real>::run_encoder(const Tensor<Real>& x, std::vector<Tensor<Real>>* skips,
                                        const PrmObserver<Real>* observer) const {
  check_input_extents(x.shape());
  const int d = config_.depth;
  auto run_prm = [&](std::size_t i, const Tensor<Real>& in) {
    auto out = prm_forward(prms_[i], in);
    if (observer) (*observer)(i, in, out);
    return out;
  };
  Tensor<Real> h = run_prm(0, stem_.forward(x));
  if (skips) skips->push_back(h);
  for (int i = 1; i < d - 1; ++i) {
    h = run_prm(static_cast<std::size_t>(i), down_[i - 1].forward(h));
    if (skips) skips->push_back(h);
  }
  return down_[d - 2].forward(h);
}

template <class Real>
Tensor<Real> Network<Real>::encode(const Tensor<Real>& x) const {
  return run_encoder(x, nullptr, nullptr);
}

template <class Real>
ForwardOutputs<Real> Network<Real>::forward(const Tensor<Real>& x, const PrmObserver<Real>* observer) const {
  const int d = config_.depth;
  ForwardOutputs<Real> out;
  std::vector<Tensor<Real>> skips;
  out.encoding = run_encoder(x, &skips, observer);

  std::size_t index = static_cast<std::size_t>(d - 1);
  Tensor<Real> h = prm_forward(prms_[index], out.encoding);
  if (observer) (*observer)(index, out.encoding, h);
  ++index;

  out.features.resize(d - 1);
  out.logits.resize(d - 1);
  for (int k = d - 2; k >= 0; --k, ++index) {
    auto up = up_[k].forward(h);
    auto fused = fuse_[k].forward(concat_channels(up, skips[k]));
    h = prm_forward(prms_[index], fused);
    if (observer) (*observer)(index, fused, h);
    out.features[k] = h;
    out.logits[k] = heads_[k].forward(h);
  }
  return out;
}

template <class Real>
std::vector<NamedParameter<Real>> Network<Real>::parameters() const {
  std::vector<NamedParameter<Real>> ps;
  auto add_block = [&](const std::string& prefix, const ConvBlock<Real>& b) {
    ps.push_back({prefix + ".weight", b.weight, true});
    ps.push_back({prefix + ".bias", b.bias, true});
    if (b.norm_scale.defined()) {
      ps.push_back({prefix + ".norm_scale", b.norm_scale, true});
      ps.push_back({prefix + ".norm_shift", b.norm_shift, true});
    }
  };
  add_block("stem", stem_);
  for (std::size_t i = 0; i < down_.size(); ++i) add_block("down" + std::to_string(i + 1), down_[i]);
  for (const auto& prm : prms_) {
    for (std::size_t b = 0; b < prm.branches.size(); ++b) {
      const auto& br = prm.branches[b];
      if (br.state == BranchState::Pruned) continue;
      const bool trainable = br.state == BranchState::Active;
      const std::string p = prm.id + ".b" + std::to_string(b) + ".";
      const auto& q = *br.params;
      ps.push_back({p + "squeeze_weight", q.squeeze_weight, trainable});
      ps.push_back({p + "squeeze_bias", q.squeeze_bias, trainable});
      ps.push_back({p + "norm_scale", q.norm_scale, trainable});
      ps.push_back({p + "norm_shift", q.norm_shift, trainable});
      ps.push_back({p + "expand_weight", q.expand_weight, trainable});
      ps.push_back({p + "expand_bias", q.expand_bias, trainable});
      ps.push_back({p + "w", br.weight, trainable});
    }
  }
  for (std::size_t k = 0; k < up_.size(); ++k) {
    add_block("up" + std::to_string(k), up_[k]);
    add_block("fuse" + std::to_string(k), fuse_[k]);
    add_block("head" + std::to_string(k), heads_[k]);
  }
  return ps;
}

template <class Real>
ParameterCounts Network<Real>::parameter_counts() const {
  ParameterCounts c;
  for (const auto& p : parameters()) {
    (p.trainable ? c.effective : c.masked) += p.tensor.numel();
  }
  c.total = c.effective + c.masked;
  return c;
}

template <class Real>
ArchitectureDescriptor Network<Real>::descriptor() const {
  ArchitectureDescriptor d;
  d.config = config_;
  for (const auto& prm : prms_) {
    d.prm_ids.push_back(prm.id);
    std::vector<BranchState> row;
    for (const auto& br : prm.branches) row.push_back(br.state);
    d.branch_states.push_back(std::move(row));
  }
  return d;
}

template struct Branch<float>;
template struct Branch<double>;
template struct Prm<float>;
template struct Prm<double>;
template struct ConvBlock<float>;
template struct ConvBlock<double>;
template class Network<float>;
template class Network<double>;
template Tensor<float> eb_forward(const Branch<float>&, const Tensor<float>&);
template Tensor<double> eb_forward(const Branch<double>&, const Tensor<double>&);
template Tensor<float> prm_forward(const Prm<float>&, const Tensor<float>&);
template Tensor<double> prm_forward(const Prm<double>&, const Tensor<double>&);

}  // namespace pspseg
