#pragma once

#include "volseg/tensor.hpp"
#include "volseg/volume.hpp"

// Losses and metrics for two-class (background, foreground) segmentation.
// Probability tensors are softmax outputs shaped (2, D, H, W) with channel 0
// background and channel 1 foreground. Loss gradients are taken w.r.t. the
// probabilities; chain them through softmax_voxelwise_backward to reach
// logits. Both losses only touch the probability of the relevant channel, so
// the returned gradient is zero elsewhere.

namespace volseg {

struct DiceScore {
  float value = 0.0f;
};

// 2|X n Y| / (|X| + |Y|) over foreground voxels. Both sets empty -> 1 by
// convention (a correct all-background prediction is not penalized).
DiceScore dice_coefficient(const LabelMap& pred, const LabelMap& truth);

struct LossResult {
  float loss = 0.0f;
  Tensor grad;  // dLoss/dprobs, same shape as probs
};

// Soft dice over the foreground channel p and one-hot truth g:
//   D = (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps),  loss = 1 - D
// with eps = 1e-5 in numerator and denominator so the both-empty case gives
// D = 1 without a special branch.
LossResult soft_dice_loss(const Tensor& probs, const LabelMap& truth);

// -mean_v w_c(v) * log p_c(v) with w_bg = 1 and w_fg = fg_weight; p is
// clamped to [1e-7, 1 - 1e-7] before the log (clamped voxels get zero
// gradient). fg_weight = 1 is plain unweighted cross-entropy.
LossResult weighted_cross_entropy(const Tensor& probs, const LabelMap& truth,
                                  float fg_weight);

// Per-voxel argmax; an exact tie goes to background.
LabelMap binarize(const Tensor& probs);

}  // namespace volseg
