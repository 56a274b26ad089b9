#include "pspseg/optim.hpp"

#include <cmath>
#include <set>

#include "pspseg/errors.hpp"

namespace pspseg {

void OptimizerConfig::validate() const {
  if (kind != "adamw" && kind != "sgd") throw ConfigError("unknown optimizer '" + kind + "'");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0,1)");
  if (!(eps > 0)) throw ConfigError("eps must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", c.kind},   {"lr", c.lr},   {"beta1", c.beta1},       {"beta2", c.beta2},
       {"eps", c.eps},     {"weight_decay", c.weight_decay},        {"momentum", c.momentum},
       {"nesterov", c.nesterov}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c = OptimizerConfig{};
  c.kind = j.value("kind", c.kind);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.momentum = j.value("momentum", c.momentum);
  c.nesterov = j.value("nesterov", c.nesterov);
}

namespace {

template <class Real>
void prepare(std::span<Real> theta, std::span<const Real> grad, SlotState<Real>& s, bool second, const std::string& name) {
  if (theta.size() != grad.size()) throw ShapeError(name + ": gradient size does not match parameter");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) throw NumericError("non-finite gradient in " + name + " at element " + std::to_string(i));
  }
  if (s.m.size() != theta.size()) s.m.assign(theta.size(), Real(0));
  if (second && s.v.size() != theta.size()) s.v.assign(theta.size(), Real(0));
  ++s.step;
}

}  // namespace

template <class Real>
void adamw_step(std::span<Real> theta, std::span<const Real> grad, SlotState<Real>& s, const OptimizerConfig& c,
                const std::string& name) {
  prepare(theta, grad, s, true, name);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  const Real b1 = static_cast<Real>(c.beta1), b2 = static_cast<Real>(c.beta2);
  const Real lr = static_cast<Real>(c.lr), wd = static_cast<Real>(c.weight_decay), eps = static_cast<Real>(c.eps);
  const Real inv_bc1 = static_cast<Real>(1.0 / bc1), inv_bc2 = static_cast<Real>(1.0 / bc2);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const Real g = grad[i];
    s.m[i] = b1 * s.m[i] + (Real(1) - b1) * g;
    s.v[i] = b2 * s.v[i] + (Real(1) - b2) * g * g;
    const Real m_hat = s.m[i] * inv_bc1;
    const Real v_hat = s.v[i] * inv_bc2;
    theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * theta[i]);
  }
}

template <class Real>
void sgd_step(std::span<Real> theta, std::span<const Real> grad, SlotState<Real>& s, const OptimizerConfig& c,
              const std::string& name) {
  prepare(theta, grad, s, false, name);
  const Real mu = static_cast<Real>(c.momentum), lr = static_cast<Real>(c.lr), wd = static_cast<Real>(c.weight_decay);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const Real g = grad[i] + wd * theta[i];
    s.m[i] = mu * s.m[i] + g;
    theta[i] -= lr * (c.nesterov ? g + mu * s.m[i] : s.m[i]);
  }
}

template <class Real>
void Optimizer<Real>::step(const std::vector<NamedParameter<Real>>& params) {
  for (const auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    auto t = p.tensor;  // shares storage
    auto& slot = slots_[p.name];
    if (config_.kind == "adamw") {
      adamw_step<Real>(t.data(), t.grad(), slot, config_, p.name);
    } else {
      sgd_step<Real>(t.data(), t.grad(), slot, config_, p.name);
    }
  }
}

template <class Real>
void Optimizer<Real>::forget_missing(const std::vector<NamedParameter<Real>>& params) {
  std::set<std::string> names;
  for (const auto& p : params) names.insert(p.name);
  for (auto it = slots_.begin(); it != slots_.end();) {
    it = names.count(it->first) ? std::next(it) : slots_.erase(it);
  }
}

template void adamw_step(std::span<float>, std::span<const float>, SlotState<float>&, const OptimizerConfig&,
                         const std::string&);
template void adamw_step(std::span<double>, std::span<const double>, SlotState<double>&, const OptimizerConfig&,
                         const std::string&);
template void sgd_step(std::span<float>, std::span<const float>, SlotState<float>&, const OptimizerConfig&,
                       const std::string&);
template void sgd_step(std::span<double>, std::span<const double>, SlotState<double>&, const OptimizerConfig&,
                       const std::string&);
template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace pspseg
