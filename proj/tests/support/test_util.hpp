#pragma once

// Shared test helpers: brute-force reference kernels kept deliberately
// different in structure from the production ones, plus a central-difference
// harness for gradient checks.

#include <cstdint>
#include <functional>
#include <vector>

#include "volseg/nn_ops.hpp"
#include "volseg/rng.hpp"
#include "volseg/tensor.hpp"

namespace volseg::testing {

// Plain seven-loop convolution, double accumulation, no padding tricks:
// out[oc][z][y][x] = bias[oc] + sum over (ic,kz,ky,kx) of
//   w[oc][ic][kz][ky][kx] * in[ic][z*stride+kz-pad][...], zeros outside.
Tensor conv3d_reference(const Tensor& input, const Tensor& weights,
                        const Tensor& bias, int stride, int pad);

// Scatter-style transposed convolution: every input voxel adds its
// weighted copy into the 2x2x2 output block it feeds.
Tensor transposed_conv3d_reference(const Tensor& input, const Tensor& weights,
                                   const Tensor& bias);

Tensor random_tensor(const Shape& shape, Rng& rng, float lo = -1.0f,
                     float hi = 1.0f);

// Central finite differences against an analytic gradient. `loss` must be a
// pure function of the current contents of `param`. Probes the `probes`
// entries with the largest analytic magnitude (where the comparison is
// numerically meaningful in float) and returns the worst relative error
// |fd - analytic| / max(|fd|, |analytic|).
double max_relative_gradient_error(const std::function<double()>& loss,
                                   Tensor& param, const Tensor& analytic,
                                   int probes, double h);

// Weighted sum of a tensor's entries in double; the usual scalar head for
// gradient checks (d loss / d out = weights).
double weighted_sum(const Tensor& t, const Tensor& weights);

}  // namespace volseg::testing
