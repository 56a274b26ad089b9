#include <algorithm>
#include <type_traits>

#include <cblas.h>

#include "pspseg/ops.hpp"

namespace pspseg {

namespace {

struct ConvGeom {
  std::int64_t n, cin, cout;
  std::int64_t d, h, w;  // input extents
  std::int64_t kd, kh, kw;
  std::int64_t sd, sh, sw;
  std::int64_t pd, ph, pw;
  std::int64_t od, oh, ow;  // output extents
};

// Output positions o in [0, out) whose input coordinate o*s + k - p lies in [0, in).
struct Range {
  std::int64_t lo, hi;
};

Range valid_range(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t s, std::int64_t p) {
  const std::int64_t num_lo = p - k;
  std::int64_t lo = num_lo <= 0 ? 0 : (num_lo + s - 1) / s;
  const std::int64_t num_hi = in - 1 - k + p;
  if (num_hi < 0) return {0, 0};
  std::int64_t hi = std::min(out, num_hi / s + 1);
  return {lo, std::max(lo, hi)};
}

template <class Real>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const Real* a, std::int64_t lda,
          const Real* b, std::int64_t ldb, Real beta, Real* c, std::int64_t ldc) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<Real, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
  } else {
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, a, lda, b, ldb, beta, c, ldc);
  }
}

// Geometry helpers shared by the im2col-based kernels.
struct Sizes {
  std::int64_t in_plane, in_vol, out_plane, out_vol, taps, rows;
};

Sizes sizes(const ConvGeom& g) {
  const std::int64_t taps = g.kd * g.kh * g.kw;
  return {g.h * g.w, g.d * g.h * g.w, g.oh * g.ow, g.od * g.oh * g.ow, taps, g.cin * taps};
}

// A 1x1x1 unit-stride unpadded conv reads its input as the column matrix.
bool pointwise(const ConvGeom& g) {
  return g.kd == 1 && g.kh == 1 && g.kw == 1 && g.sd == 1 && g.sh == 1 && g.sw == 1 && g.pd == 0 && g.ph == 0 &&
         g.pw == 0;
}

// Visits every (column row, output row) pair: fn(dst_row, src_row or nullptr, lo, hi, step, shift).
template <class Fn>
void for_each_patch_row(const ConvGeom& g, const std::vector<Range>& wr, Fn&& fn) {
  const Sizes z = sizes(g);
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t a = 0; a < g.kd; ++a) {
      for (std::int64_t b = 0; b < g.kh; ++b) {
        for (std::int64_t c = 0; c < g.kw; ++c) {
          const std::int64_t row = ci * z.taps + (a * g.kh + b) * g.kw + c;
          for (std::int64_t od = 0; od < g.od; ++od) {
            const std::int64_t id = od * g.sd + a - g.pd;
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = oh * g.sh + b - g.ph;
              const std::int64_t col_off = row * z.out_vol + od * z.out_plane + oh * g.ow;
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                fn(col_off, std::int64_t{-1}, Range{0, 0}, c - g.pw);
              } else {
                fn(col_off, ci * z.in_vol + id * z.in_plane + ih * g.w, wr[c], c - g.pw);
              }
            }
          }
        }
      }
    }
  }
}

std::vector<Range> width_ranges(const ConvGeom& g) {
  std::vector<Range> wr(static_cast<std::size_t>(g.kw));
  for (std::int64_t c = 0; c < g.kw; ++c) wr[c] = valid_range(g.w, g.ow, c, g.sw, g.pw);
  return wr;
}

// col[ci*taps + tap, o] = x[ci, shifted(o, tap)] or 0 in the padding.
template <class Real>
void im2col(const ConvGeom& g, const Real* x, Real* col) {
  const auto wr = width_ranges(g);
  const std::int64_t sw = g.sw, ow = g.ow;
  for_each_patch_row(g, wr, [&](std::int64_t dst, std::int64_t src, Range r, std::int64_t shift) {
    Real* d = col + dst;
    if (src < 0) {
      std::fill(d, d + ow, Real(0));
      return;
    }
    const Real* s = x + src;
    std::fill(d, d + r.lo, Real(0));
    if (sw == 1) {
      std::copy(s + r.lo + shift, s + r.hi + shift, d + r.lo);
    } else {
      for (std::int64_t o = r.lo; o < r.hi; ++o) d[o] = s[o * sw + shift];
    }
    std::fill(d + r.hi, d + ow, Real(0));
  });
}

// Scatter-add of a column matrix back onto the input grid.
template <class Real>
void col2im_add(const ConvGeom& g, const Real* col, Real* x) {
  const auto wr = width_ranges(g);
  const std::int64_t sw = g.sw;
  for_each_patch_row(g, wr, [&](std::int64_t dst, std::int64_t src, Range r, std::int64_t shift) {
    if (src < 0) return;
    const Real* d = col + dst;
    Real* s = x + src;
    if (sw == 1) {
#pragma omp simd
      for (std::int64_t o = r.lo; o < r.hi; ++o) s[o + shift] += d[o];
    } else {
      for (std::int64_t o = r.lo; o < r.hi; ++o) s[o * sw + shift] += d[o];
    }
  });
}

// out[n] = K * col(x[n]) + bias, or added onto out when accumulate is set.
template <class Real>
void conv_forward(const ConvGeom& g, const Real* x, const Real* k, const Real* bias, Real* out,
                  bool accumulate = false) {
  const Sizes z = sizes(g);
  std::vector<Real> col;
  if (!pointwise(g)) col.resize(static_cast<std::size_t>(z.rows * z.out_vol));
  for (std::int64_t n = 0; n < g.n; ++n) {
    const Real* xn = x + n * g.cin * z.in_vol;
    Real* on = out + n * g.cout * z.out_vol;
    if (bias) {
      for (std::int64_t co = 0; co < g.cout; ++co) {
        Real* o = on + co * z.out_vol;
        if (accumulate) {
          for (std::int64_t i = 0; i < z.out_vol; ++i) o[i] += bias[co];
        } else {
          std::fill(o, o + z.out_vol, bias[co]);
        }
      }
    }
    const Real* b = xn;
    if (!col.empty()) {
      im2col(g, xn, col.data());
      b = col.data();
    }
    gemm<Real>(false, false, g.cout, z.out_vol, z.rows, k, z.rows, b, z.out_vol,
               (bias || accumulate) ? Real(1) : Real(0), on, z.out_vol);
  }
}

// gx[n] += col2im(K^T * gout[n]).
template <class Real>
void conv_backward_data(const ConvGeom& g, const Real* gout, const Real* k, Real* gx) {
  const Sizes z = sizes(g);
  const bool pw = pointwise(g);
  std::vector<Real> col;
  if (!pw) col.resize(static_cast<std::size_t>(z.rows * z.out_vol));
  for (std::int64_t n = 0; n < g.n; ++n) {
    const Real* gon = gout + n * g.cout * z.out_vol;
    Real* gxn = gx + n * g.cin * z.in_vol;
    if (pw) {
      gemm<Real>(true, false, z.rows, z.out_vol, g.cout, k, z.rows, gon, z.out_vol, Real(1), gxn, z.out_vol);
    } else {
      gemm<Real>(true, false, z.rows, z.out_vol, g.cout, k, z.rows, gon, z.out_vol, Real(0), col.data(), z.out_vol);
      col2im_add(g, col.data(), gxn);
    }
  }
}

// gk += sum_n gout[n] * col(x[n])^T; gbias[co] += sum gout[n,co].
template <class Real>
void conv_backward_weight(const ConvGeom& g, const Real* gout, const Real* x, Real* gk, Real* gbias) {
  const Sizes z = sizes(g);
  std::vector<Real> col;
  if (gk && !pointwise(g)) col.resize(static_cast<std::size_t>(z.rows * z.out_vol));
  for (std::int64_t n = 0; n < g.n; ++n) {
    const Real* gon = gout + n * g.cout * z.out_vol;
    if (gbias) {
      for (std::int64_t co = 0; co < g.cout; ++co) {
        const Real* p = gon + co * z.out_vol;
        Real s = 0;
        for (std::int64_t i = 0; i < z.out_vol; ++i) s += p[i];
        gbias[co] += s;
      }
    }
    if (!gk) continue;
    const Real* xn = x + n * g.cin * z.in_vol;
    const Real* b = xn;
    if (!col.empty()) {
      im2col(g, xn, col.data());
      b = col.data();
    }
    gemm<Real>(false, true, g.cout, z.rows, z.out_vol, gon, z.out_vol, b, z.out_vol, Real(1), gk, z.rows);
  }
}

void require_rank5(const Shape& s, const char* what) {
  if (s.size() != 5) throw ShapeError(std::string(what) + " must be rank 5, got " + shape_str(s));
}

template <class Real>
void check_bias(const Tensor<Real>& bias, std::int64_t channels) {
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != channels)) {
    throw ShapeError("bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(channels) +
                     " output channels");
  }
}

}  // namespace

Index3 same_padding(const Index3& kernel) {
  Index3 pad{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (kernel[i] % 2 == 0) throw ShapeError("same padding needs odd kernel extents");
    pad[i] = (kernel[i] - 1) / 2;
  }
  return pad;
}

template <class Real>
Tensor<Real> conv3(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias,
                   const Index3& stride, const Index3& padding) {
  require_rank5(input.shape(), "conv3 input");
  require_rank5(kernel.shape(), "conv3 kernel");
  if (input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv3 channel mismatch: input has " + std::to_string(input.dim(1)) + ", kernel expects " +
                     std::to_string(kernel.dim(1)));
  }
  check_bias(bias, kernel.dim(0));
  ConvGeom g{input.dim(0), input.dim(1), kernel.dim(0), input.dim(2), input.dim(3), input.dim(4),
             kernel.dim(2), kernel.dim(3), kernel.dim(4), stride[0], stride[1], stride[2],
             padding[0], padding[1], padding[2], 0, 0, 0};
  for (std::size_t i = 0; i < 3; ++i) {
    if (stride[i] < 1) throw ShapeError("conv3 stride must be >= 1");
    if (padding[i] < 0) throw ShapeError("conv3 padding must be >= 0");
  }
  auto out_extent = [](std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
    const std::int64_t span = in + 2 * p - k;
    if (span < 0) throw ShapeError("conv3 kernel larger than padded input");
    return span / s + 1;
  };
  g.od = out_extent(g.d, g.kd, g.sd, g.pd);
  g.oh = out_extent(g.h, g.kh, g.sh, g.ph);
  g.ow = out_extent(g.w, g.kw, g.sw, g.pw);

  Tensor<Real> out(Shape{g.n, g.cout, g.od, g.oh, g.ow});
  conv_forward(g, input.ptr(), kernel.ptr(), bias.defined() ? bias.ptr() : nullptr, out.ptr());

  if (detail::recording<Real>({&input, &kernel, &bias})) {
    detail::record(out, [g, x = input.handle(), k = kernel.handle(), b = bias.handle(), o = out.handle()] {
      const Real* gout = o->grad.data();
      if (Real* gx = detail::grad_sink(x)) conv_backward_data(g, gout, k->data.data(), gx);
      Real* gk = detail::grad_sink(k);
      Real* gb = detail::grad_sink(b);
      if (gk || gb) conv_backward_weight(g, gout, x->data.data(), gk, gb);
    });
  }
  return out;
}

template <class Real>
Tensor<Real> transposed_conv3(const Tensor<Real>& input, const Tensor<Real>& kernel, const Tensor<Real>& bias,
                              const Index3& stride) {
  require_rank5(input.shape(), "transposed_conv3 input");
  require_rank5(kernel.shape(), "transposed_conv3 kernel");
  if (input.dim(1) != kernel.dim(0)) {
    throw ShapeError("transposed_conv3 channel mismatch: input has " + std::to_string(input.dim(1)) +
                     ", kernel expects " + std::to_string(kernel.dim(0)));
  }
  check_bias(bias, kernel.dim(1));
  for (auto s : stride) {
    if (s < 1) throw ShapeError("transposed_conv3 stride must be >= 1");
  }
  // Geometry of the conv3 this operator is the adjoint of: its input is our
  // output and its output is our input.
  ConvGeom g{input.dim(0),  kernel.dim(1), kernel.dim(0), (input.dim(2) - 1) * stride[0] + kernel.dim(2),
             (input.dim(3) - 1) * stride[1] + kernel.dim(3), (input.dim(4) - 1) * stride[2] + kernel.dim(4),
             kernel.dim(2), kernel.dim(3), kernel.dim(4), stride[0], stride[1], stride[2],
             0, 0, 0, input.dim(2), input.dim(3), input.dim(4)};

  Tensor<Real> out(Shape{g.n, g.cin, g.d, g.h, g.w});
  if (bias.defined()) {
    const std::int64_t vol = g.d * g.h * g.w;
    Real* o = out.ptr();
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t c = 0; c < g.cin; ++c) {
        std::fill(o + (n * g.cin + c) * vol, o + (n * g.cin + c + 1) * vol, bias.data()[c]);
      }
    }
  }
  conv_backward_data(g, input.ptr(), kernel.ptr(), out.ptr());

  if (detail::recording<Real>({&input, &kernel, &bias})) {
    detail::record(out, [g, y = input.handle(), k = kernel.handle(), b = bias.handle(), o = out.handle()] {
      const Real* gout = o->grad.data();
      if (Real* gy = detail::grad_sink(y)) conv_forward<Real>(g, gout, k->data.data(), nullptr, gy, true);
      if (Real* gk = detail::grad_sink(k)) conv_backward_weight<Real>(g, y->data.data(), gout, gk, nullptr);
      if (Real* gb = detail::grad_sink(b)) {
        const std::int64_t vol = g.d * g.h * g.w;
        for (std::int64_t n = 0; n < g.n; ++n) {
          for (std::int64_t c = 0; c < g.cin; ++c) {
            const Real* p = gout + (n * g.cin + c) * vol;
            Real s = 0;
            for (std::int64_t i = 0; i < vol; ++i) s += p[i];
            gb[c] += s;
          }
        }
      }
    });
  }
  return out;
}

template Tensor<float> conv3(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, const Index3&,
                             const Index3&);
template Tensor<double> conv3(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, const Index3&,
                              const Index3&);
template Tensor<float> transposed_conv3(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                        const Index3&);
template Tensor<double> transposed_conv3(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                         const Index3&);

}  // namespace pspseg
