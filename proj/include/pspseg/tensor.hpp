#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pspseg/errors.hpp"

namespace pspseg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class Real>
struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  // Empty until a gradient is first accumulated.
  std::vector<Real> grad;
  bool requires_grad = false;
  // Set when the tensor was produced by a recorded operation; 0 for leaves.
  std::uint64_t tape_id = 0;
  std::size_t tape_slot = 0;

  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
    return grad;
  }
};

// Dense row-major array. Copies share storage (handle semantics); clone() makes
// an independent copy. Volumetric activations use the N x C x D x H x W layout.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : impl_(std::make_shared<TensorImpl<Real>>()) {
    const auto n = shape_numel(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(n), fill);
  }

  Tensor(Shape shape, std::vector<Real> values) : impl_(std::make_shared<TensorImpl<Real>>()) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(Real value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  Real* ptr() { return impl_->data.data(); }
  const Real* ptr() const { return impl_->data.data(); }

  Real item() const {
    if (impl_->data.size() != 1) throw ContractError("item() on a tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    if (!flag) impl_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zero-filled when nothing has been accumulated yet.
  std::span<const Real> grad() const { return impl_->grad_buffer(); }
  std::span<Real> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  // Same values, no gradient tracking, independent storage.
  Tensor clone() const {
    Tensor out;
    out.impl_ = std::make_shared<TensorImpl<Real>>();
    out.impl_->shape = impl_->shape;
    out.impl_->data = impl_->data;
    return out;
  }

  const void* id() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<Real>>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<Real>> impl_;
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(values));
}

}  // namespace pspseg
