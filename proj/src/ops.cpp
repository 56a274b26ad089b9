#include <algorithm>
#include <cmath>

#include "pspseg/ops.hpp"

namespace pspseg {

namespace {

template <class Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class Real>
void require_channels_layout(const Tensor<Real>& x, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + " needs an [N,C,...] tensor, got " + shape_str(x.shape()));
}

std::int64_t spatial_size(const Shape& s) {
  std::int64_t v = 1;
  for (std::size_t i = 2; i < s.size(); ++i) v *= s[i];
  return v;
}

// Elementwise unary op whose derivative is a function of (input, output).
template <class Real, class Fwd, class Deriv>
Tensor<Real> unary(const Tensor<Real>& x, Fwd fwd, Deriv deriv) {
  Tensor<Real> out(x.shape());
  const Real* xi = x.ptr();
  Real* o = out.ptr();
  const auto n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = fwd(xi[i]);
  if (detail::recording<Real>({&x})) {
    detail::record(out, [xh = x.handle(), oh = out.handle(), deriv] {
      Real* gx = detail::grad_sink(xh);
      if (!gx) return;
      const Real* g = oh->grad.data();
      const Real* xv = xh->data.data();
      const Real* ov = oh->data.data();
      for (std::size_t i = 0; i < oh->data.size(); ++i) gx[i] += g[i] * deriv(xv[i], ov[i]);
    });
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> instance_norm(const Tensor<Real>& x, const Tensor<Real>& scale, const Tensor<Real>& shift, Real eps) {
  require_channels_layout(x, "instance_norm");
  const std::int64_t n = x.dim(0), c = x.dim(1), m = spatial_size(x.shape());
  if (scale.numel() != c || shift.numel() != c) {
    throw ShapeError("instance_norm affine parameters must have " + std::to_string(c) + " entries");
  }
  if (!(eps > 0)) throw ContractError("instance_norm eps must be positive");

  Tensor<Real> out(x.shape());
  std::vector<Real> means(static_cast<std::size_t>(n * c)), inv_std(static_cast<std::size_t>(n * c));
  const Real* xv = x.ptr();
  Real* o = out.ptr();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const Real* p = xv + nc * m;
    double s = 0;
    for (std::int64_t i = 0; i < m; ++i) s += p[i];
    const double mu = s / static_cast<double>(m);
    double ss = 0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double dlt = p[i] - mu;
      ss += dlt * dlt;
    }
    const double var = ss / static_cast<double>(m);
    const Real mean_r = static_cast<Real>(mu);
    const Real istd = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    means[nc] = mean_r;
    inv_std[nc] = istd;
    const Real g = scale.data()[nc % c], b = shift.data()[nc % c];
    Real* q = o + nc * m;
    for (std::int64_t i = 0; i < m; ++i) q[i] = (p[i] - mean_r) * istd * g + b;
  }

  if (detail::recording<Real>({&x, &scale, &shift})) {
    detail::record(out, [n, c, m, means = std::move(means), inv_std = std::move(inv_std), xh = x.handle(),
                         sh = scale.handle(), bh = shift.handle(), oh = out.handle()] {
      Real* gx = detail::grad_sink(xh);
      Real* gs = detail::grad_sink(sh);
      Real* gb = detail::grad_sink(bh);
      const Real* g = oh->grad.data();
      const Real* xv = xh->data.data();
      for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const std::int64_t ch = nc % c;
        const Real* gp = g + nc * m;
        const Real* xp = xv + nc * m;
        const Real mu = means[nc], istd = inv_std[nc];
        double sum_g = 0, sum_gx = 0;
        for (std::int64_t i = 0; i < m; ++i) {
          const double xhat = static_cast<double>((xp[i] - mu) * istd);
          sum_g += gp[i];
          sum_gx += gp[i] * xhat;
        }
        if (gs) gs[ch] += static_cast<Real>(sum_gx);
        if (gb) gb[ch] += static_cast<Real>(sum_g);
        if (gx) {
          const double gamma = sh->data[ch];
          const double k = gamma * istd / static_cast<double>(m);
          Real* gxp = gx + nc * m;
          for (std::int64_t i = 0; i < m; ++i) {
            const double xhat = static_cast<double>((xp[i] - mu) * istd);
            gxp[i] += static_cast<Real>(k * (static_cast<double>(m) * gp[i] - sum_g - xhat * sum_gx));
          }
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> leaky_relu(const Tensor<Real>& x, Real slope) {
  return unary(
      x, [slope](Real v) { return v >= 0 ? v : slope * v; },
      [slope](Real v, Real) { return v > 0 ? Real(1) : slope; });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  return unary(
      x,
      [](Real v) {
        if (v >= 0) return Real(1) / (Real(1) + std::exp(-v));
        const Real e = std::exp(v);
        return e / (Real(1) + e);
      },
      [](Real, Real s) { return s * (Real(1) - s); });
}

template <class Real>
Tensor<Real> natural_log(const Tensor<Real>& x) {
  for (auto v : x.data()) {
    if (!(v > 0)) throw NumericError("natural_log of a non-positive value");
  }
  return unary(
      x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

template <class Real>
Tensor<Real> stop_gradient(const Tensor<Real>& x) {
  Tensor<Real> out = x.clone();
  // Recorded so the tape reflects the op, but the rule propagates nothing.
  if (detail::recording<Real>({&x})) detail::record(out, [] {});
  return out;
}

// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "add");
  Tensor<Real> out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  if (detail::recording<Real>({&a, &b})) {
    detail::record(out, [ah = a.handle(), bh = b.handle(), oh = out.handle()] {
      const Real* g = oh->grad.data();
      const auto n = oh->data.size();
      if (Real* ga = detail::grad_sink(ah)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (Real* gb = detail::grad_sink(bh)) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "sub");
  Tensor<Real> out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  if (detail::recording<Real>({&a, &b})) {
    detail::record(out, [ah = a.handle(), bh = b.handle(), oh = out.handle()] {
      const Real* g = oh->grad.data();
      const auto n = oh->data.size();
      if (Real* ga = detail::grad_sink(ah)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (Real* gb = detail::grad_sink(bh)) {
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "mul");
  Tensor<Real> out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  if (detail::recording<Real>({&a, &b})) {
    detail::record(out, [ah = a.handle(), bh = b.handle(), oh = out.handle()] {
      const Real* g = oh->grad.data();
      const auto n = oh->data.size();
      if (Real* ga = detail::grad_sink(ah)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bh->data[i];
      }
      if (Real* gb = detail::grad_sink(bh)) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ah->data[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "div");
  Tensor<Real> out(a.shape());
  const auto n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] / b.ptr()[i];
  if (detail::recording<Real>({&a, &b})) {
    detail::record(out, [ah = a.handle(), bh = b.handle(), oh = out.handle()] {
      const Real* g = oh->grad.data();
      const auto n = oh->data.size();
      if (Real* ga = detail::grad_sink(ah)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / bh->data[i];
      }
      if (Real* gb = detail::grad_sink(bh)) {
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * oh->data[i] / bh->data[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor) {
  return unary(
      x, [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real offset) {
  return unary(
      x, [offset](Real v) { return v + offset; }, [](Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> scalar_multiply(const Tensor<Real>& x, const Tensor<Real>& factor) {
  if (factor.numel() != 1) throw ShapeError("scalar_multiply factor must have one element");
  const Real w = factor.data()[0];
  Tensor<Real> out(x.shape());
  const auto n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.ptr()[i] = w * x.ptr()[i];
  if (detail::recording<Real>({&x, &factor})) {
    detail::record(out, [xh = x.handle(), fh = factor.handle(), oh = out.handle()] {
      const Real* g = oh->grad.data();
      const auto n = oh->data.size();
      if (Real* gx = detail::grad_sink(xh)) {
        const Real w = fh->data[0];
        for (std::size_t i = 0; i < n; ++i) gx[i] += w * g[i];
      }
      if (Real* gf = detail::grad_sink(fh)) {
        Real s = 0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * xh->data[i];
        gf[0] += s;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<Real> out(shape, std::vector<Real>(x.data().begin(), x.data().end()));
  if (detail::recording<Real>({&x})) {
    detail::record(out, [xh = x.handle(), oh = out.handle()] {
      if (Real* gx = detail::grad_sink(xh)) {
        for (std::size_t i = 0; i < oh->grad.size(); ++i) gx[i] += oh->grad[i];
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real s = 0;
  for (auto v : x.data()) s += v;
  auto out = Tensor<Real>::scalar(s);
  if (detail::recording<Real>({&x})) {
    detail::record(out, [xh = x.handle(), oh = out.handle()] {
      if (Real* gx = detail::grad_sink(xh)) {
        const Real g = oh->grad[0];
        for (std::size_t i = 0; i < xh->data.size(); ++i) gx[i] += g;
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

template <class Real>
Tensor<Real> sum_spatial(const Tensor<Real>& x) {
  require_channels_layout(x, "sum_spatial");
  const std::int64_t n = x.dim(0), c = x.dim(1), m = spatial_size(x.shape());
  Tensor<Real> out(Shape{n, c});
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    Real s = 0;
    const Real* p = x.ptr() + nc * m;
    for (std::int64_t i = 0; i < m; ++i) s += p[i];
    out.ptr()[nc] = s;
  }
  if (detail::recording<Real>({&x})) {
    detail::record(out, [n, c, m, xh = x.handle(), oh = out.handle()] {
      if (Real* gx = detail::grad_sink(xh)) {
        for (std::int64_t nc = 0; nc < n * c; ++nc) {
          const Real g = oh->grad[nc];
          Real* p = gx + nc * m;
          for (std::int64_t i = 0; i < m; ++i) p[i] += g;
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> channel_mean(const Tensor<Real>& x) {
  require_channels_layout(x, "channel_mean");
  const std::int64_t n = x.dim(0), c = x.dim(1), m = spatial_size(x.shape());
  Shape shape = x.shape();
  shape[1] = 1;
  Tensor<Real> out(shape);
  const Real inv = Real(1) / static_cast<Real>(c);
  for (std::int64_t b = 0; b < n; ++b) {
    Real* o = out.ptr() + b * m;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const Real* p = x.ptr() + (b * c + ch) * m;
      for (std::int64_t i = 0; i < m; ++i) o[i] += p[i];
    }
    for (std::int64_t i = 0; i < m; ++i) o[i] *= inv;
  }
  if (detail::recording<Real>({&x})) {
    detail::record(out, [n, c, m, inv, xh = x.handle(), oh = out.handle()] {
      if (Real* gx = detail::grad_sink(xh)) {
        for (std::int64_t b = 0; b < n; ++b) {
          const Real* g = oh->grad.data() + b * m;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            Real* p = gx + (b * c + ch) * m;
            for (std::int64_t i = 0; i < m; ++i) p[i] += g[i] * inv;
          }
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_channels_layout(a, "concat_channels");
  require_channels_layout(b, "concat_channels");
  Shape sa = a.shape(), sb = b.shape();
  sa[1] = sb[1] = 0;
  if (sa != sb) {
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), m = spatial_size(a.shape());
  Shape shape = a.shape();
  shape[1] = ca + cb;
  Tensor<Real> out(shape);
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + i * ca * m, ca * m, out.ptr() + i * (ca + cb) * m);
    std::copy_n(b.ptr() + i * cb * m, cb * m, out.ptr() + (i * (ca + cb) + ca) * m);
  }
  if (detail::recording<Real>({&a, &b})) {
    detail::record(out, [n, ca, cb, m, ah = a.handle(), bh = b.handle(), oh = out.handle()] {
      const Real* g = oh->grad.data();
      Real* ga = detail::grad_sink(ah);
      Real* gb = detail::grad_sink(bh);
      for (std::int64_t i = 0; i < n; ++i) {
        const Real* gi = g + i * (ca + cb) * m;
        if (ga) {
          for (std::int64_t j = 0; j < ca * m; ++j) ga[i * ca * m + j] += gi[j];
        }
        if (gb) {
          for (std::int64_t j = 0; j < cb * m; ++j) gb[i * cb * m + j] += gi[ca * m + j];
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> slice_channels(const Tensor<Real>& x, std::int64_t begin, std::int64_t end) {
  require_channels_layout(x, "slice_channels");
  const std::int64_t n = x.dim(0), c = x.dim(1), m = spatial_size(x.shape());
  if (begin < 0 || end > c || begin >= end) {
    throw ShapeError("slice_channels: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") for " + std::to_string(c) + " channels");
  }
  const std::int64_t k = end - begin;
  Shape shape = x.shape();
  shape[1] = k;
  Tensor<Real> out(shape);
  for (std::int64_t i = 0; i < n; ++i) std::copy_n(x.ptr() + (i * c + begin) * m, k * m, out.ptr() + i * k * m);
  if (detail::recording<Real>({&x})) {
    detail::record(out, [n, c, m, k, begin, xh = x.handle(), oh = out.handle()] {
      if (Real* gx = detail::grad_sink(xh)) {
        for (std::int64_t i = 0; i < n; ++i) {
          const Real* g = oh->grad.data() + i * k * m;
          Real* p = gx + (i * c + begin) * m;
          for (std::int64_t j = 0; j < k * m; ++j) p[j] += g[j];
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> log_softmax_channels(const Tensor<Real>& x) {
  require_channels_layout(x, "log_softmax_channels");
  const std::int64_t n = x.dim(0), c = x.dim(1), m = spatial_size(x.shape());
  Tensor<Real> out(x.shape());
  for (std::int64_t b = 0; b < n; ++b) {
    const Real* p = x.ptr() + b * c * m;
    Real* o = out.ptr() + b * c * m;
    for (std::int64_t i = 0; i < m; ++i) {
      Real mx = p[i];
      for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, p[ch * m + i]);
      Real s = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) s += std::exp(p[ch * m + i] - mx);
      const Real lse = mx + std::log(s);
      for (std::int64_t ch = 0; ch < c; ++ch) o[ch * m + i] = p[ch * m + i] - lse;
    }
  }
  if (detail::recording<Real>({&x})) {
    detail::record(out, [n, c, m, xh = x.handle(), oh = out.handle()] {
      Real* gx = detail::grad_sink(xh);
      if (!gx) return;
      for (std::int64_t b = 0; b < n; ++b) {
        const Real* g = oh->grad.data() + b * c * m;
        const Real* o = oh->data.data() + b * c * m;
        Real* q = gx + b * c * m;
        for (std::int64_t i = 0; i < m; ++i) {
          Real gs = 0;
          for (std::int64_t ch = 0; ch < c; ++ch) gs += g[ch * m + i];
          for (std::int64_t ch = 0; ch < c; ++ch) q[ch * m + i] += g[ch * m + i] - std::exp(o[ch * m + i]) * gs;
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> softmax_channels(const Tensor<Real>& x) {
  require_channels_layout(x, "softmax_channels");
  const std::int64_t n = x.dim(0), c = x.dim(1), m = spatial_size(x.shape());
  Tensor<Real> out(x.shape());
  for (std::int64_t b = 0; b < n; ++b) {
    const Real* p = x.ptr() + b * c * m;
    Real* o = out.ptr() + b * c * m;
    for (std::int64_t i = 0; i < m; ++i) {
      Real mx = p[i];
      for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, p[ch * m + i]);
      Real s = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        o[ch * m + i] = std::exp(p[ch * m + i] - mx);
        s += o[ch * m + i];
      }
      for (std::int64_t ch = 0; ch < c; ++ch) o[ch * m + i] /= s;
    }
  }
  if (detail::recording<Real>({&x})) {
    detail::record(out, [n, c, m, xh = x.handle(), oh = out.handle()] {
      Real* gx = detail::grad_sink(xh);
      if (!gx) return;
      for (std::int64_t b = 0; b < n; ++b) {
        const Real* g = oh->grad.data() + b * c * m;
        const Real* s = oh->data.data() + b * c * m;
        Real* q = gx + b * c * m;
        for (std::int64_t i = 0; i < m; ++i) {
          Real dot = 0;
          for (std::int64_t ch = 0; ch < c; ++ch) dot += g[ch * m + i] * s[ch * m + i];
          for (std::int64_t ch = 0; ch < c; ++ch) q[ch * m + i] += s[ch * m + i] * (g[ch * m + i] - dot);
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> batched_cosine_similarity(const Tensor<Real>& a, const Tensor<Real>& b, Real eps) {
  require_same_shape(a, b, "cosine_similarity");
  if (!(eps > 0)) throw ContractError("cosine_similarity eps must be positive");
  const std::int64_t rows = a.dim(0), len = a.numel() / rows;
  Tensor<Real> out(Shape{rows});
  // Per row: dot, |a|, |b| kept for the backward rule.
  std::vector<double> stats(static_cast<std::size_t>(3 * rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* pa = a.ptr() + r * len;
    const Real* pb = b.ptr() + r * len;
    double dot = 0, aa = 0, bb = 0;
    for (std::int64_t i = 0; i < len; ++i) {
      dot += static_cast<double>(pa[i]) * pb[i];
      aa += static_cast<double>(pa[i]) * pa[i];
      bb += static_cast<double>(pb[i]) * pb[i];
    }
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    stats[3 * r] = dot;
    stats[3 * r + 1] = na;
    stats[3 * r + 2] = nb;
    out.ptr()[r] = static_cast<Real>(dot / (std::max(na, double(eps)) * std::max(nb, double(eps))));
  }
  if (detail::recording<Real>({&a, &b})) {
    detail::record(out, [rows, len, eps, stats = std::move(stats), ah = a.handle(), bh = b.handle(),
                         oh = out.handle()] {
      Real* ga = detail::grad_sink(ah);
      Real* gb = detail::grad_sink(bh);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double g = oh->grad[r];
        const double dot = stats[3 * r], na = stats[3 * r + 1], nb = stats[3 * r + 2];
        const double da = std::max(na, double(eps)), db = std::max(nb, double(eps));
        const double cos = dot / (da * db);
        const Real* pa = ah->data.data() + r * len;
        const Real* pb = bh->data.data() + r * len;
        // d/da = b/(da db) - cos * a / na^2, the second term only while |a| > eps.
        const double ka = na > eps ? cos / (na * na) : 0.0;
        const double kb = nb > eps ? cos / (nb * nb) : 0.0;
        if (ga) {
          for (std::int64_t i = 0; i < len; ++i) {
            ga[r * len + i] += static_cast<Real>(g * (pb[i] / (da * db) - ka * pa[i]));
          }
        }
        if (gb) {
          for (std::int64_t i = 0; i < len; ++i) {
            gb[r * len + i] += static_cast<Real>(g * (pa[i] / (da * db) - kb * pb[i]));
          }
        }
      }
    });
  }
  return out;
}

template <class Real>
Tensor<Real> cosine_similarity(const Tensor<Real>& a, const Tensor<Real>& b, Real eps) {
  require_same_shape(a, b, "cosine_similarity");
  const Shape row{1, a.numel()};
  return batched_cosine_similarity(reshape(a, row), reshape(b, row), eps);
}

template <class Real>
Tensor<Real> binary_cross_entropy_with_logits(const Tensor<Real>& logits, const Tensor<Real>& targets) {
  require_same_shape(logits, targets, "binary_cross_entropy_with_logits");
  const auto n = logits.numel();
  double s = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double z = logits.ptr()[i], t = targets.ptr()[i];
    s += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  auto out = Tensor<Real>::scalar(static_cast<Real>(s / static_cast<double>(n)));
  if (detail::recording<Real>({&logits})) {
    detail::record(out, [n, zh = logits.handle(), th = targets.handle(), oh = out.handle()] {
      if (Real* gz = detail::grad_sink(zh)) {
        const double g = oh->grad[0] / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
          const double z = zh->data[i];
          const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
          gz[i] += static_cast<Real>(g * (sig - th->data[i]));
        }
      }
    });
  }
  return out;
}

#define PSPSEG_INSTANTIATE_OPS(R)                                                                   \
  template Tensor<R> instance_norm(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&, R);       \
  template Tensor<R> leaky_relu(const Tensor<R>&, R);                                              \
  template Tensor<R> sigmoid(const Tensor<R>&);                                                    \
  template Tensor<R> natural_log(const Tensor<R>&);                                                \
  template Tensor<R> stop_gradient(const Tensor<R>&);                                              \
  template Tensor<R> add(const Tensor<R>&, const Tensor<R>&);                                      \
  template Tensor<R> sub(const Tensor<R>&, const Tensor<R>&);                                      \
  template Tensor<R> mul(const Tensor<R>&, const Tensor<R>&);                                      \
  template Tensor<R> div(const Tensor<R>&, const Tensor<R>&);                                      \
  template Tensor<R> scale(const Tensor<R>&, R);                                                   \
  template Tensor<R> add_scalar(const Tensor<R>&, R);                                              \
  template Tensor<R> scalar_multiply(const Tensor<R>&, const Tensor<R>&);                          \
  template Tensor<R> reshape(const Tensor<R>&, const Shape&);                                      \
  template Tensor<R> sum(const Tensor<R>&);                                                        \
  template Tensor<R> mean(const Tensor<R>&);                                                       \
  template Tensor<R> sum_spatial(const Tensor<R>&);                                                \
  template Tensor<R> channel_mean(const Tensor<R>&);                                               \
  template Tensor<R> concat_channels(const Tensor<R>&, const Tensor<R>&);                          \
  template Tensor<R> slice_channels(const Tensor<R>&, std::int64_t, std::int64_t);                 \
  template Tensor<R> softmax_channels(const Tensor<R>&);                                           \
  template Tensor<R> log_softmax_channels(const Tensor<R>&);                                       \
  template Tensor<R> cosine_similarity(const Tensor<R>&, const Tensor<R>&, R);                     \
  template Tensor<R> batched_cosine_similarity(const Tensor<R>&, const Tensor<R>&, R);             \
  template Tensor<R> binary_cross_entropy_with_logits(const Tensor<R>&, const Tensor<R>&);

PSPSEG_INSTANTIATE_OPS(float)
PSPSEG_INSTANTIATE_OPS(double)

#undef PSPSEG_INSTANTIATE_OPS

}  // namespace pspseg
