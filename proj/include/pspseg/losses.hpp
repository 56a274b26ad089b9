#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pspseg/tensor.hpp"

namespace pspseg {

// Batched integer labels, shape [N,D,H,W], x fastest.
struct LabelTensor {
  Shape shape;
  std::vector<std::int32_t> labels;

  std::int64_t batch() const { return shape.at(0); }
  std::int64_t voxels() const;  // per sample
};

// Nearest-neighbour pyramid: level k samples the even-index voxels of level k-1.
std::vector<LabelTensor> label_pyramid(const LabelTensor& labels, int levels);

// Finest-first weights 2^-level, normalized to sum to 1.
std::vector<double> supervision_weights(int levels);

struct LossConfig {
  double alpha = 0.1;
  double beta = 0.1;
  std::vector<double> supervision_weights;  // empty: derived from the level count
  double dice_smooth = 1e-5;
  std::string bce_reduction = "voxel-mean";

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

struct LossBreakdown {
  double l_seg = 0, l_tr = 0, l_rl = 0, l_total = 0;
};

// [N,1,D,H,W] mask: 1 where label > 0.
template <class Real>
Tensor<Real> binarize(const LabelTensor& labels);

// image [N,1,D,H,W] times binarize(labels).
template <class Real>
Tensor<Real> gt_mask_image(const Tensor<Real>& image, const LabelTensor& labels);

// One-hot [N,C,D,H,W]; labels outside [0,C) raise DataError.
template <class Real>
Tensor<Real> one_hot(const LabelTensor& labels, std::int64_t num_classes);

// Mean over the batch of 1 - cos(enc_x[b], enc_target[b]).
template <class Real>
Tensor<Real> tr_loss(const Tensor<Real>& enc_x, const Tensor<Real>& enc_target);

// Sum over levels of the voxel-mean BCE between sigmoid(channel_mean(F_i))
// and binarize(y_i).
template <class Real>
Tensor<Real> rl_loss(const std::vector<Tensor<Real>>& features, const std::vector<LabelTensor>& labels);

// Soft Dice over foreground classes plus cross-entropy, for one level.
template <class Real>
Tensor<Real> dice_ce(const Tensor<Real>& logits, const LabelTensor& labels, double smooth = 1e-5);

template <class Real>
Tensor<Real> dice_ce_deep_supervision(const std::vector<Tensor<Real>>& logits, const std::vector<LabelTensor>& labels,
                                      const std::vector<double>& weights, double smooth = 1e-5);

// l_seg + alpha * l_tr + beta * l_rl on the tape.
template <class Real>
Tensor<Real> combine_losses(const Tensor<Real>& l_seg, const Tensor<Real>& l_tr, const Tensor<Real>& l_rl,
                            const LossConfig& cfg);

// Scalar version; NumericError names the first non-finite component.
LossBreakdown total_loss(double l_seg, double l_tr, double l_rl, const LossConfig& cfg);

}  // namespace pspseg
