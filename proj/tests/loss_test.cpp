#include "volseg/loss.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "test_util.hpp"
#include "volseg/errors.hpp"
#include "volseg/nn_ops.hpp"
#include "volseg/rng.hpp"

using namespace volseg;
using namespace volseg::testing;

namespace {

LabelMap random_label(const Shape& spatial, Rng& rng, double fg_prob) {
  LabelMap m = LabelMap::zeros(spatial);
  for (auto& v : m.voxels) {
    v = rng.uniform(0.0f, 1.0f) < fg_prob ? 1 : 0;
  }
  return m;
}

// Double-precision softmax + loss recomputations for the finite-difference
// checks; evaluating the production float path would cap the achievable
// accuracy at the float quantization of the returned loss.
double dice_loss_oracle(const Tensor& z, const LabelMap& truth) {
  const int64_t v = truth.size();
  double sum_pg = 0.0, sum_p2 = 0.0, sum_g2 = 0.0;
  for (int64_t i = 0; i < v; ++i) {
    const double a = z[i];
    const double b = z[v + i];
    const double m = std::max(a, b);
    const double eb = std::exp(b - m);
    const double p = eb / (std::exp(a - m) + eb);
    const double g = truth.voxels[static_cast<size_t>(i)];
    sum_pg += p * g;
    sum_p2 += p * p;
    sum_g2 += g * g;
  }
  return 1.0 - (2.0 * sum_pg + 1e-5) / (sum_p2 + sum_g2 + 1e-5);
}

double wce_loss_oracle(const Tensor& z, const LabelMap& truth,
                       double fg_weight) {
  const int64_t v = truth.size();
  double loss = 0.0;
  for (int64_t i = 0; i < v; ++i) {
    const double a = z[i];
    const double b = z[v + i];
    const double m = std::max(a, b);
    const double ea = std::exp(a - m);
    const double eb = std::exp(b - m);
    const uint8_t t = truth.voxels[static_cast<size_t>(i)];
    const double p = (t ? eb : ea) / (ea + eb);
    const double pc = std::clamp(p, 1e-7, 1.0 - 1e-7);
    loss += (t ? fg_weight : 1.0) * std::log(pc);
  }
  return -loss / static_cast<double>(v);
}

TEST(DiceCoefficient, KnownOverlaps) {
  LabelMap a = LabelMap::zeros(Shape{2, 2, 2});
  LabelMap b = LabelMap::zeros(Shape{2, 2, 2});

  EXPECT_FLOAT_EQ(dice_coefficient(a, b).value, 1.0f);  // both empty

  a.voxels = {1, 1, 0, 0, 0, 0, 0, 0};
  b.voxels = {0, 0, 1, 1, 0, 0, 0, 0};
  EXPECT_FLOAT_EQ(dice_coefficient(a, b).value, 0.0f);  // disjoint

  b = a;
  EXPECT_FLOAT_EQ(dice_coefficient(a, b).value, 1.0f);  // identical

  b.voxels = {1, 0, 0, 0, 0, 0, 0, 0};  // |X|=2, |Y|=1, overlap 1
  EXPECT_FLOAT_EQ(dice_coefficient(a, b).value, 2.0f / 3.0f);
}

TEST(SoftDiceLoss, UniformProbabilitiesGiveHalf) {
  // 8 voxels, 2 foreground, p_fg = 0.5 everywhere:
  // numerator 2*(0.5*2) = 2, denominator 8*0.25 + 2 = 4, dice 0.5.
  Tensor probs(Shape{2, 2, 2, 2}, 0.5f);
  LabelMap truth = LabelMap::zeros(Shape{2, 2, 2});
  truth.voxels[0] = 1;
  truth.voxels[5] = 1;

  const LossResult r = soft_dice_loss(probs, truth);
  EXPECT_NEAR(r.loss, 0.5f, 1e-5);
}

TEST(SoftDiceLoss, EmptyPredictionAndTruthIsPerfect) {
  Tensor probs(Shape{2, 2, 2, 2});
  float* p = probs.mutable_data();
  for (int64_t i = 0; i < 8; ++i) {
    p[i] = 1.0f;  // background channel
    p[8 + i] = 0.0f;
  }
  const LossResult r = soft_dice_loss(probs, LabelMap::zeros(Shape{2, 2, 2}));
  EXPECT_NEAR(r.loss, 0.0f, 1e-5);
}

TEST(SoftDiceLoss, GradientTouchesOnlyForegroundChannel) {
  Rng rng(41);
  const Tensor z = random_tensor(Shape{2, 3, 3, 3}, rng, -2.0f, 2.0f);
  const Tensor probs = softmax_voxelwise(z);
  const LabelMap truth = random_label(Shape{3, 3, 3}, rng, 0.3);

  const LossResult r = soft_dice_loss(probs, truth);
  for (int64_t i = 0; i < 27; ++i) {
    ASSERT_EQ(r.grad[i], 0.0f) << "background grad leak at " << i;
  }
  bool any = false;
  for (int64_t i = 27; i < 54; ++i) any |= r.grad[i] != 0.0f;
  EXPECT_TRUE(any);
}

TEST(SoftDiceLoss, GradientThroughSoftmaxPassesFiniteDifferences) {
  Rng rng(42);
  Tensor z = random_tensor(Shape{2, 4, 4, 4}, rng, -2.0f, 2.0f);
  const LabelMap truth = random_label(Shape{4, 4, 4}, rng, 0.25);

  const Tensor probs = softmax_voxelwise(z);
  const LossResult r = soft_dice_loss(probs, truth);
  const Tensor dz = softmax_voxelwise_backward(probs, r.grad);

  const auto loss = [&]() { return dice_loss_oracle(z, truth); };
  EXPECT_LE(max_relative_gradient_error(loss, z, dz, 24, 1e-3), 1e-3);
}

TEST(WeightedCrossEntropy, UniformProbsGiveLogTwo) {
  Tensor probs(Shape{2, 2, 2, 2}, 0.5f);
  LabelMap truth = LabelMap::zeros(Shape{2, 2, 2});
  truth.voxels[1] = 1;
  truth.voxels[2] = 1;

  const LossResult r = weighted_cross_entropy(probs, truth, 1.0f);
  EXPECT_NEAR(r.loss, std::log(2.0f), 1e-6);
}

TEST(WeightedCrossEntropy, ForegroundWeightScalesForegroundTerms) {
  Tensor probs(Shape{2, 1, 1, 2}, {0.8f, 0.3f, 0.2f, 0.7f});
  LabelMap truth = LabelMap::zeros(Shape{1, 1, 2});
  truth.voxels[1] = 1;

  // voxel 0 is background at p=0.8, voxel 1 foreground at p=0.7
  const float base = -0.5f * std::log(0.8f);
  for (const float w : {1.0f, 4.0f, 50.0f}) {
    const LossResult r = weighted_cross_entropy(probs, truth, w);
    EXPECT_NEAR(r.loss, base - 0.5f * w * std::log(0.7f), 1e-5) << "w=" << w;
  }
}

TEST(WeightedCrossEntropy, SaturatedProbabilitiesStayFinite) {
  Tensor probs(Shape{2, 1, 1, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
  LabelMap truth = LabelMap::zeros(Shape{1, 1, 2});
  truth.voxels[0] = 1;  // foreground predicted at exactly zero

  const LossResult r = weighted_cross_entropy(probs, truth, 2.0f);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.loss, 10.0f);  // clamped log(1e-7) per voxel, still huge
}

TEST(WeightedCrossEntropy, RejectsNonPositiveWeight) {
  Tensor probs(Shape{2, 1, 1, 1}, 0.5f);
  const LabelMap truth = LabelMap::zeros(Shape{1, 1, 1});
  EXPECT_THROW(weighted_cross_entropy(probs, truth, 0.0f), ConfigError);
  EXPECT_THROW(weighted_cross_entropy(probs, truth, -3.0f), ConfigError);
}

TEST(WeightedCrossEntropy, GradientThroughSoftmaxPassesFiniteDifferences) {
  Rng rng(43);
  Tensor z = random_tensor(Shape{2, 4, 4, 4}, rng, -2.0f, 2.0f);
  const LabelMap truth = random_label(Shape{4, 4, 4}, rng, 0.2);

  const Tensor probs = softmax_voxelwise(z);
  const LossResult r = weighted_cross_entropy(probs, truth, 5.0f);
  const Tensor dz = softmax_voxelwise_backward(probs, r.grad);

  const auto loss = [&]() { return wce_loss_oracle(z, truth, 5.0); };
  EXPECT_LE(max_relative_gradient_error(loss, z, dz, 24, 1e-3), 1e-3);
}

TEST(Binarize, ArgmaxWithTiesToBackground) {
  Tensor probs(Shape{2, 1, 1, 3}, {0.4f, 0.5f, 0.7f, 0.6f, 0.5f, 0.3f});
  const LabelMap m = binarize(probs);
  EXPECT_EQ(m.voxels[0], 1);  // 0.6 > 0.4
  EXPECT_EQ(m.voxels[1], 0);  // exact tie stays background
  EXPECT_EQ(m.voxels[2], 0);
}

TEST(LossShapes, MismatchesAreRejected) {
  Tensor probs(Shape{2, 2, 2, 2}, 0.5f);
  EXPECT_THROW(soft_dice_loss(probs, LabelMap::zeros(Shape{2, 2, 3})),
               ShapeError);
  EXPECT_THROW(soft_dice_loss(Tensor(Shape{3, 2, 2, 2}, 0.5f),
                              LabelMap::zeros(Shape{2, 2, 2})),
               ShapeError);
  EXPECT_THROW(dice_coefficient(LabelMap::zeros(Shape{2, 2, 2}),
                                LabelMap::zeros(Shape{2, 2, 3})),
               ShapeError);
}

}  // namespace
