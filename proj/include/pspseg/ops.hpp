#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pspseg/autograd.hpp"
#include "pspseg/tensor.hpp"

namespace pspseg {

using Index3 = std::array<std::int64_t, 3>;

// "Same" padding for an odd kernel.
Index3 same_padding(const Index3& kernel);

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// Direct 3D cross-correlation. input [N,Cin,D,H,W], kernel [Cout,Cin,kd,kh,kw],
// bias [Cout] or undefined. Output extents are floor((in + 2p - k) / s) + 1.
template <class Real>
Tensor<Real> conv3(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias,
                   const Index3& stride, const Index3& padding);

// Adjoint of conv3 with zero padding. input [N,Cin,D,H,W], kernel
// [Cin,Cout,kd,kh,kw]; output extents (in - 1) * s + k.
template <class Real>
Tensor<Real> transposed_conv3(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias,
                              const Index3& stride);

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

// Per-sample, per-channel standardization over the D*H*W voxels followed by
// a per-channel affine map.
template <class Real>
Tensor<Real> instance_norm(const Tensor<Real>& x, const Tensor<Real>& scale, const Tensor<Real>& shift,
                           Real eps = Real(1e-5));

// Derivative at exactly 0 is `slope`.
template <class Real>
Tensor<Real> leaky_relu(const Tensor<Real>& x, Real slope = Real(0.01));

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x);

template <class Real>
Tensor<Real> natural_log(const Tensor<Real>& x);

// Identity forward; contributes no gradient to x.
template <class Real>
Tensor<Real> stop_gradient(const Tensor<Real>& x);

// ---------------------------------------------------------------------------
// Elementwise arithmetic (shapes must match exactly; no broadcasting)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b);

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor);
template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real offset);

// x times a learnable one-element tensor.
template <class Real>
Tensor<Real> scalar_multiply(const Tensor<Real>& x, const Tensor<Real>& factor);

// ---------------------------------------------------------------------------
// Reductions and channel manipulation
// ---------------------------------------------------------------------------

// Same elements under a new shape with equal element count.
template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, const Shape& shape);

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x);
template <class Real>
Tensor<Real> mean(const Tensor<Real>& x);

// [N,C,...] -> [N,C]
template <class Real>
Tensor<Real> sum_spatial(const Tensor<Real>& x);

// [N,C,D,H,W] -> [N,1,D,H,W]
template <class Real>
Tensor<Real> channel_mean(const Tensor<Real>& x);

template <class Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b);

// Channels [begin, end) of an [N,C,...] tensor.
template <class Real>
Tensor<Real> slice_channels(const Tensor<Real>& x, std::int64_t begin, std::int64_t end);

template <class Real>
Tensor<Real> softmax_channels(const Tensor<Real>& x);
template <class Real>
Tensor<Real> log_softmax_channels(const Tensor<Real>& x);

// Cosine similarity of the flattened tensors: <a,b> / (max(|a|,eps) max(|b|,eps)).
template <class Real>
Tensor<Real> cosine_similarity(const Tensor<Real>& a, const Tensor<Real>& b, Real eps = Real(1e-8));

// Cosine similarity per leading-axis slice: [N,...] x [N,...] -> [N].
template <class Real>
Tensor<Real> batched_cosine_similarity(const Tensor<Real>& a, const Tensor<Real>& b, Real eps = Real(1e-8));

// Mean over elements of the numerically stable binary cross-entropy between
// sigmoid(logits) and constant targets in [0,1].
template <class Real>
Tensor<Real> binary_cross_entropy_with_logits(const Tensor<Real>& logits, const Tensor<Real>& targets);

}  // namespace pspseg
