#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <vector>

#include "pspseg/tensor.hpp"

namespace pspseg {

// Thread-local switch; when disabled no operation is recorded.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Ordered record of differentiable operations. A tape supports exactly one
// backward pass; reset() starts a fresh recording.
template <class Real>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  // Appends `out` as the result of an operation. The backward rule reads
  // out's gradient and accumulates into its inputs.
  void record(Tensor<Real>& out, BackwardFn backward);

  // Reverse traversal from `loss`; each reachable record runs once.
  void backward(const Tensor<Real>& loss);

  void reset();

  // Tape that operations currently record into, or nullptr.
  static Tape* active();

 private:
  template <class> friend class TapeScope;
  struct Record {
    std::shared_ptr<TensorImpl<Real>> output;
    BackwardFn backward;
  };

  static Tape*& active_slot();

  std::uint64_t id_;
  std::vector<Record> records_;
  bool consumed_ = false;
};

// Makes `tape` the recording target for the current thread for the guard's lifetime.
template <class Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

// Backward through the active tape.
template <class Real>
void backward(const Tensor<Real>& loss);

namespace detail {

// True when an op over `inputs` must be recorded on the active tape.
template <class Real>
bool recording(std::initializer_list<const Tensor<Real>*> inputs) {
  if (!GradMode::enabled() || Tape<Real>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <class Real>
bool recording(const std::vector<Tensor<Real>>& inputs) {
  if (!GradMode::enabled() || Tape<Real>::active() == nullptr) return false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

template <class Real>
void record(Tensor<Real>& out, typename Tape<Real>::BackwardFn fn) {
  Tape<Real>::active()->record(out, std::move(fn));
}

// Gradient sink for an input, or nullptr when it does not take gradients.
template <class Real>
Real* grad_sink(const std::shared_ptr<TensorImpl<Real>>& impl) {
  if (!impl || !impl->requires_grad) return nullptr;
  return impl->grad_buffer().data();
}

}  // namespace detail
}  // namespace pspseg
