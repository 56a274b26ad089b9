#include "pspseg/autograd.hpp"

#include <atomic>

namespace pspseg {

namespace {

thread_local bool grad_enabled = true;
std::atomic<std::uint64_t> next_tape_id{1};

}  // namespace

bool GradMode::enabled() { return grad_enabled; }
void GradMode::set_enabled(bool enabled) { grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }

template <class Real>
Tape<Real>*& Tape<Real>::active_slot() {
  thread_local Tape<Real>* slot = nullptr;
  return slot;
}

template <class Real>
Tape<Real>* Tape<Real>::active() {
  return active_slot();
}

template <class Real>
Tape<Real>::Tape() : id_(next_tape_id.fetch_add(1)) {}

template <class Real>
Tape<Real>::~Tape() {
  if (active_slot() == this) active_slot() = nullptr;
}

template <class Real>
void Tape<Real>::record(Tensor<Real>& out, BackwardFn backward) {
  if (consumed_) throw ContractError("recording onto a tape that already ran backward; call reset()");
  auto& impl = *out.handle();
  impl.requires_grad = true;
  impl.tape_id = id_;
  impl.tape_slot = records_.size();
  records_.push_back(Record{out.handle(), std::move(backward)});
}

template <class Real>
void Tape<Real>::backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (consumed_) throw ContractError("tape already consumed by a previous backward; re-run the forward pass");
  const auto& impl = *loss.handle();
  if (impl.tape_id != id_ || impl.tape_slot >= records_.size() ||
      records_[impl.tape_slot].output.get() != loss.handle().get()) {
    throw ContractError("loss was not recorded on this tape (stale tape)");
  }

  loss.handle()->grad_buffer()[0] += Real(1);
  for (std::size_t i = impl.tape_slot + 1; i-- > 0;) {
    auto& rec = records_[i];
    if (rec.output->grad.empty()) continue;
    rec.backward();
  }
  consumed_ = true;
  records_.clear();
}

template <class Real>
void Tape<Real>::reset() {
  records_.clear();
  consumed_ = false;
  id_ = next_tape_id.fetch_add(1);
}

template <class Real>
TapeScope<Real>::TapeScope(Tape<Real>& tape) : previous_(Tape<Real>::active_slot()) {
  Tape<Real>::active_slot() = &tape;
}

template <class Real>
TapeScope<Real>::~TapeScope() {
  Tape<Real>::active_slot() = previous_;
}

template <class Real>
void backward(const Tensor<Real>& loss) {
  auto* tape = Tape<Real>::active();
  if (tape == nullptr) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace pspseg
