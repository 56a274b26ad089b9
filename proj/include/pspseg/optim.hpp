#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pspseg/network.hpp"

namespace pspseg {

struct OptimizerConfig {
  std::string kind = "adamw";  // adamw | sgd
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double momentum = 0.99;  // sgd
  bool nesterov = true;    // sgd

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

// Per-parameter state. AdamW uses both moments; SGD keeps its momentum buffer in m.
template <class Real>
struct SlotState {
  std::int64_t step = 0;
  std::vector<Real> m, v;
};

// One AdamW update with bias correction and decoupled weight decay:
// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
template <class Real>
void adamw_step(std::span<Real> theta, std::span<const Real> grad, SlotState<Real>& state, const OptimizerConfig& c,
                const std::string& name = "parameter");

template <class Real>
void sgd_step(std::span<Real> theta, std::span<const Real> grad, SlotState<Real>& state, const OptimizerConfig& c,
              const std::string& name = "parameter");

template <class Real>
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig config) : config_(std::move(config)) { config_.validate(); }

  // Updates every trainable parameter that holds a gradient; others keep
  // their state untouched.
  void step(const std::vector<NamedParameter<Real>>& params);

  const OptimizerConfig& config() const { return config_; }
  std::map<std::string, SlotState<Real>>& slots() { return slots_; }
  const std::map<std::string, SlotState<Real>>& slots() const { return slots_; }
  // Drops state of parameters that no longer exist (pruned branches).
  void forget_missing(const std::vector<NamedParameter<Real>>& params);

 private:
  OptimizerConfig config_;
  std::map<std::string, SlotState<Real>> slots_;
};

}  // namespace pspseg
