#include "pspseg/losses.hpp"

#include <cmath>

#include "pspseg/errors.hpp"
#include "pspseg/ops.hpp"

namespace pspseg {

std::int64_t LabelTensor::voxels() const {
  std::int64_t v = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) v *= shape[i];
  return v;
}

namespace {

void check_labels(const LabelTensor& y) {
  if (y.shape.size() != 4) throw ShapeError("labels must be [N,D,H,W], got " + shape_str(y.shape));
  if (static_cast<std::int64_t>(y.labels.size()) != shape_numel(y.shape)) {
    throw ShapeError("label count " + std::to_string(y.labels.size()) + " does not match " + shape_str(y.shape));
  }
}

// [N,D,H,W] labels against an [N,C,D,H,W] tensor.
template <class Real>
void check_aligned(const Tensor<Real>& t, const LabelTensor& y, const char* what) {
  check_labels(y);
  const auto& s = t.shape();
  if (s.size() != 5 || s[0] != y.shape[0] || s[2] != y.shape[1] || s[3] != y.shape[2] || s[4] != y.shape[3]) {
    throw ShapeError(std::string(what) + ": tensor " + shape_str(s) + " not aligned with labels " + shape_str(y.shape));
  }
}

template <class Real>
Tensor<Real> one_minus(const Tensor<Real>& x) {
  return add_scalar(scale(x, Real(-1)), Real(1));
}

}  // namespace

std::vector<LabelTensor> label_pyramid(const LabelTensor& labels, int levels) {
  check_labels(labels);
  if (levels < 1) throw ContractError("label_pyramid needs at least one level");
  const std::int64_t factor = std::int64_t{1} << (levels - 1);
  for (int a = 1; a <= 3; ++a) {
    if (labels.shape[a] % factor != 0) {
      throw ShapeError("label dims " + shape_str(labels.shape) + " not divisible by " + std::to_string(factor));
    }
  }
  std::vector<LabelTensor> out{labels};
  for (int k = 1; k < levels; ++k) {
    const LabelTensor& prev = out.back();
    const std::int64_t n = prev.shape[0], d = prev.shape[1], h = prev.shape[2], w = prev.shape[3];
    LabelTensor next{{n, d / 2, h / 2, w / 2}, {}};
    next.labels.reserve(static_cast<std::size_t>(n * (d / 2) * (h / 2) * (w / 2)));
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t z = 0; z < d; z += 2)
        for (std::int64_t y = 0; y < h; y += 2)
          for (std::int64_t x = 0; x < w; x += 2) next.labels.push_back(prev.labels[((b * d + z) * h + y) * w + x]);
    out.push_back(std::move(next));
  }
  return out;
}

std::vector<double> supervision_weights(int levels) {
  if (levels < 1) throw ContractError("supervision_weights needs at least one level");
  std::vector<double> w(static_cast<std::size_t>(levels));
  double total = 0;
  for (int i = 0; i < levels; ++i) total += w[i] = std::ldexp(1.0, -i);
  for (auto& v : w) v /= total;
  return w;
}

void LossConfig::validate() const {
  if (!(alpha >= 0) || !(beta >= 0)) throw ConfigError("loss alpha and beta must be non-negative");
  if (!(dice_smooth > 0)) throw ConfigError("dice_smooth must be positive");
  if (bce_reduction != "voxel-mean") throw ConfigError("unsupported bce_reduction '" + bce_reduction + "'");
  if (!supervision_weights.empty()) {
    double s = 0;
    for (double w : supervision_weights) {
      if (!(w >= 0)) throw ConfigError("supervision weights must be non-negative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("supervision weights must sum to 1, got " + std::to_string(s));
  }
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"supervision_weights", c.supervision_weights},
       {"dice_smooth", c.dice_smooth},
       {"bce_reduction", c.bce_reduction}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  c = LossConfig{};
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.supervision_weights = j.value("supervision_weights", c.supervision_weights);
  c.dice_smooth = j.value("dice_smooth", c.dice_smooth);
  c.bce_reduction = j.value("bce_reduction", c.bce_reduction);
}

template <class Real>
Tensor<Real> binarize(const LabelTensor& labels) {
  check_labels(labels);
  Tensor<Real> out(Shape{labels.shape[0], 1, labels.shape[1], labels.shape[2], labels.shape[3]});
  auto o = out.data();
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const auto v = labels.labels[i];
    if (v < 0) throw DataError("negative label " + std::to_string(v) + " at index " + std::to_string(i));
    o[i] = v > 0 ? Real(1) : Real(0);
  }
  return out;
}

template <class Real>
Tensor<Real> gt_mask_image(const Tensor<Real>& image, const LabelTensor& labels) {
  check_aligned(image, labels, "gt_mask_image");
  if (image.dim(1) != 1) throw ShapeError("gt_mask_image expects a single-channel image");
  return mul(image, binarize<Real>(labels));
}

template <class Real>
Tensor<Real> one_hot(const LabelTensor& labels, std::int64_t num_classes) {
  check_labels(labels);
  const std::int64_t n = labels.shape[0], m = labels.voxels();
  Tensor<Real> out(Shape{n, num_classes, labels.shape[1], labels.shape[2], labels.shape[3]});
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < m; ++i) {
      const auto v = labels.labels[b * m + i];
      if (v < 0 || v >= num_classes) {
        throw DataError("label " + std::to_string(v) + " outside [0," + std::to_string(num_classes) + ")");
      }
      out.ptr()[(b * num_classes + v) * m + i] = Real(1);
    }
  }
  return out;
}

template <class Real>
Tensor<Real> tr_loss(const Tensor<Real>& enc_x, const Tensor<Real>& enc_target) {
  if (enc_x.shape() != enc_target.shape()) {
    throw ShapeError("tr_loss: " + shape_str(enc_x.shape()) + " vs " + shape_str(enc_target.shape()));
  }
  return one_minus(mean(batched_cosine_similarity(enc_x, enc_target)));
}

template <class Real>
Tensor<Real> rl_loss(const std::vector<Tensor<Real>>& features, const std::vector<LabelTensor>& labels) {
  if (features.empty() || features.size() != labels.size()) {
    throw ShapeError("rl_loss: " + std::to_string(features.size()) + " feature levels vs " +
                     std::to_string(labels.size()) + " label levels");
  }
  Tensor<Real> total;
  for (std::size_t i = 0; i < features.size(); ++i) {
    check_aligned(features[i], labels[i], "rl_loss");
    auto level = binary_cross_entropy_with_logits(channel_mean(features[i]), binarize<Real>(labels[i]));
    total = total.defined() ? add(total, level) : level;
  }
  return total;
}

template <class Real>
Tensor<Real> dice_ce(const Tensor<Real>& logits, const LabelTensor& labels, double smooth) {
  check_aligned(logits, labels, "dice_ce");
  const std::int64_t c = logits.dim(1);
  if (c < 2) throw ShapeError("dice_ce needs at least two classes");
  const auto target = one_hot<Real>(labels, c);

  const auto ce = scale(mean(mul(log_softmax_channels(logits), target)), -static_cast<Real>(c));

  const auto probs = softmax_channels(logits);
  const auto s = static_cast<Real>(smooth);
  const auto inter = sum_spatial(mul(probs, target));
  const auto denom = add(sum_spatial(probs), sum_spatial(target));
  const auto dice = div(add_scalar(scale(inter, Real(2)), s), add_scalar(denom, s));
  const auto dice_loss = one_minus(mean(slice_channels(dice, 1, c)));
  return add(dice_loss, ce);
}

template <class Real>
Tensor<Real> dice_ce_deep_supervision(const std::vector<Tensor<Real>>& logits, const std::vector<LabelTensor>& labels,
                                      const std::vector<double>& weights, double smooth) {
  if (logits.empty() || logits.size() != labels.size() || logits.size() != weights.size()) {
    throw ShapeError("dice_ce_deep_supervision: " + std::to_string(logits.size()) + " logit levels, " +
                     std::to_string(labels.size()) + " label levels, " + std::to_string(weights.size()) + " weights");
  }
  Tensor<Real> total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto level = scale(dice_ce(logits[i], labels[i], smooth), static_cast<Real>(weights[i]));
    total = total.defined() ? add(total, level) : level;
  }
  return total;
}

template <class Real>
Tensor<Real> combine_losses(const Tensor<Real>& l_seg, const Tensor<Real>& l_tr, const Tensor<Real>& l_rl,
                            const LossConfig& cfg) {
  return add(l_seg, add(scale(l_tr, static_cast<Real>(cfg.alpha)), scale(l_rl, static_cast<Real>(cfg.beta))));
}

LossBreakdown total_loss(double l_seg, double l_tr, double l_rl, const LossConfig& cfg) {
  const std::pair<const char*, double> parts[] = {{"l_seg", l_seg}, {"l_tr", l_tr}, {"l_rl", l_rl}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NumericError(std::string(name) + " is not finite (" + std::to_string(v) + ")");
  }
  return {l_seg, l_tr, l_rl, l_seg + cfg.alpha * l_tr + cfg.beta * l_rl};
}

#define PSPSEG_INSTANTIATE_LOSSES(R)                                                                        \
  template Tensor<R> binarize<R>(const LabelTensor&);                                                     \
  template Tensor<R> gt_mask_image(const Tensor<R>&, const LabelTensor&);                                 \
  template Tensor<R> one_hot<R>(const LabelTensor&, std::int64_t);                                        \
  template Tensor<R> tr_loss(const Tensor<R>&, const Tensor<R>&);                                         \
  template Tensor<R> rl_loss(const std::vector<Tensor<R>>&, const std::vector<LabelTensor>&);             \
  template Tensor<R> dice_ce(const Tensor<R>&, const LabelTensor&, double);                               \
  template Tensor<R> dice_ce_deep_supervision(const std::vector<Tensor<R>>&, const std::vector<LabelTensor>&, \
                                              const std::vector<double>&, double);                        \
  template Tensor<R> combine_losses(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&, const LossConfig&);

PSPSEG_INSTANTIATE_LOSSES(float)
PSPSEG_INSTANTIATE_LOSSES(double)

#undef PSPSEG_INSTANTIATE_LOSSES

}  // namespace pspseg
