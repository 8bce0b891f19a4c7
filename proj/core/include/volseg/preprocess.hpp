#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "volseg/volume.hpp"

namespace volseg {

// Discretized Gaussian smoothing kernel: weights at integer offsets
// [-truncation_radius, +truncation_radius], normalized to sum 1.
struct GaussianSpec {
  float sigma = 1.0f;
  int truncation_radius = 3;

  explicit GaussianSpec(float sigma_);
  GaussianSpec(float sigma_, int radius);
};

// N(mu, sigma^2) density, evaluated in double internally.
float gaussian_pdf(float x, float mu, float sigma);

// The normalized 1-D kernel, size 2*radius + 1.
std::vector<double> gaussian_kernel(const GaussianSpec& spec);

// Per channel: x -> (x - mean) / std over the nonzero voxels (the zero
// background is excluded from the statistics and stays zero). A channel with
// std < 1e-8 over its nonzero voxels comes back all zeros.
VolumeImage normalize_intensity(const VolumeImage& v);

// Trilinear resize to target (D, H, W). Sample positions use the
// align-corners-false convention: source = (i + 0.5) * in/out - 0.5, clamped.
// Spacing is rescaled so the physical extent is unchanged.
VolumeImage resample_trilinear(const VolumeImage& v,
                               const std::array<int64_t, 3>& target_dims);

// Nearest-neighbor resize for label maps (same sampling convention).
LabelMap resample_nearest(const LabelMap& label,
                          const std::array<int64_t, 3>& target_dims);

// Separable Gaussian smoothing, one 1-D pass per axis, reflect padding at the
// borders, channels filtered independently.
VolumeImage gaussian_filter3d(const VolumeImage& v, const GaussianSpec& spec);

}  // namespace volseg
