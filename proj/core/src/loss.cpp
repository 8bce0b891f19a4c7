#include "volseg/loss.hpp"

#include <algorithm>
#include <cmath>

#include "volseg/errors.hpp"

namespace volseg {

namespace {

constexpr double kDiceEps = 1e-5;
constexpr double kProbFloor = 1e-7;

// probs must be (2, D, H, W) matching the truth extents; returns voxel count.
int64_t check_probs_truth(const Tensor& probs, const LabelMap& truth,
                          const char* op) {
  if (probs.shape().rank() != 4 || probs.shape().extent(0) != 2) {
    throw ShapeError(std::string(op) + ": probs must be (2, D, H, W), got " +
                     probs.shape().str());
  }
  truth.validate();
  const Shape spatial{probs.shape().extent(1), probs.shape().extent(2),
                      probs.shape().extent(3)};
  if (truth.shape != spatial) {
    throw ShapeError(std::string(op) + ": truth shape " + truth.shape.str() +
                     " does not match probs " + spatial.str());
  }
  return spatial.elements();
}

}  // namespace

DiceScore dice_coefficient(const LabelMap& pred, const LabelMap& truth) {
  pred.validate();
  truth.validate();
  if (pred.shape != truth.shape) {
    throw ShapeError("dice_coefficient: shapes " + pred.shape.str() + " and " +
                     truth.shape.str() + " differ");
  }
  int64_t x = 0, y = 0, both = 0;
  for (int64_t i = 0; i < pred.size(); ++i) {
    const uint8_t a = pred.voxels[static_cast<size_t>(i)];
    const uint8_t b = truth.voxels[static_cast<size_t>(i)];
    x += a;
    y += b;
    both += a & b;
  }
  if (x + y == 0) return {1.0f};
  return {static_cast<float>(2.0 * static_cast<double>(both) /
                             static_cast<double>(x + y))};
}

LossResult soft_dice_loss(const Tensor& probs, const LabelMap& truth) {
  const int64_t V = check_probs_truth(probs, truth, "soft_dice_loss");
  const float* p = probs.data() + V;  // foreground channel

  double sum_pg = 0.0, sum_p2 = 0.0, sum_g2 = 0.0;
  for (int64_t i = 0; i < V; ++i) {
    const double pi = p[i];
    const double gi = truth.voxels[static_cast<size_t>(i)];
    sum_pg += pi * gi;
    sum_p2 += pi * pi;
    sum_g2 += gi;  // g is 0/1, so g^2 = g
  }
  const double num = 2.0 * sum_pg + kDiceEps;
  const double den = sum_p2 + sum_g2 + kDiceEps;
  const double dice = num / den;

  LossResult out;
  out.loss = static_cast<float>(1.0 - dice);
  out.grad = Tensor(probs.shape());
  float* g = out.grad.mutable_data() + V;
  const double inv_den2 = 1.0 / (den * den);
  for (int64_t i = 0; i < V; ++i) {
    const double pi = p[i];
    const double gi = truth.voxels[static_cast<size_t>(i)];
    // d(dice)/dp_i by the quotient rule; loss flips the sign.
    g[i] = static_cast<float>(-(2.0 * gi * den - 2.0 * pi * num) * inv_den2);
  }
  return out;
}

LossResult weighted_cross_entropy(const Tensor& probs, const LabelMap& truth,
                                  float fg_weight) {
  const int64_t V = check_probs_truth(probs, truth, "weighted_cross_entropy");
  if (!(fg_weight > 0.0f)) {
    throw ConfigError("weighted_cross_entropy: fg_weight must be > 0, got " +
                      std::to_string(fg_weight));
  }
  const float* pr = probs.data();

  LossResult out;
  out.grad = Tensor(probs.shape());
  float* g = out.grad.mutable_data();

  double loss = 0.0;
  const double inv_v = 1.0 / static_cast<double>(V);
  for (int64_t i = 0; i < V; ++i) {
    const uint8_t t = truth.voxels[static_cast<size_t>(i)];
    const double w = t ? static_cast<double>(fg_weight) : 1.0;
    const int64_t idx = t ? V + i : i;
    const double p = pr[idx];
    const double pc = std::clamp(p, kProbFloor, 1.0 - kProbFloor);
    loss += w * std::log(pc);
    if (p > kProbFloor && p < 1.0 - kProbFloor) {
      g[idx] = static_cast<float>(-w * inv_v / pc);
    }
  }
  out.loss = static_cast<float>(-loss * inv_v);
  return out;
}

LabelMap binarize(const Tensor& probs) {
  if (probs.shape().rank() != 4 || probs.shape().extent(0) != 2) {
    throw ShapeError("binarize: probs must be (2, D, H, W), got " +
                     probs.shape().str());
  }
  const Shape spatial{probs.shape().extent(1), probs.shape().extent(2),
                      probs.shape().extent(3)};
  const int64_t V = spatial.elements();
  const float* bg = probs.data();
  const float* fg = probs.data() + V;

  LabelMap out = LabelMap::zeros(spatial);
  for (int64_t i = 0; i < V; ++i) {
    out.voxels[static_cast<size_t>(i)] = fg[i] > bg[i] ? 1 : 0;
  }
  return out;
}

}  // namespace volseg
