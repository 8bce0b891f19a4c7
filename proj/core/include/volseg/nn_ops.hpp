#pragma once

#include <cstdint>

#include "volseg/rng.hpp"
#include "volseg/tensor.hpp"

// Differentiable primitives over channels-first (C, D, H, W) tensors.
// Forward passes and gradient accumulation run single-threaded with a fixed
// accumulation order (in_channel, kz, ky, kx, ascending) and 64-bit
// accumulators, so identical inputs give bitwise-identical outputs.

namespace volseg {

// Convolution parameters with their gradient buffers. The same struct serves
// strided, unit-stride, and transposed layers; weights are always
// (out_ch, in_ch, k, k, k) and bias is (out_ch).
//
// Supported combinations: stride 1 with odd k (symmetric zero padding
// (k-1)/2, extents preserved), and stride 2 with k = 2 (no padding, even
// extents required, extents halved). Network configs stay within
// k in {1, 2, 5}.
struct ConvLayerParams {
  Tensor weights;
  Tensor bias;
  Tensor weight_grad;
  Tensor bias_grad;
  int kernel = 5;
  int stride = 1;

  // Weights uniform in +-sqrt(6 / (fan_in + fan_out)), bias zero.
  static ConvLayerParams create(int64_t out_ch, int64_t in_ch, int kernel,
                                int stride, Rng& rng);

  int64_t out_channels() const { return weights.shape().extent(0); }
  int64_t in_channels() const { return weights.shape().extent(1); }
  void zero_grads();
  void validate() const;
};

// Per-channel learnable slopes, initialized to 0.25.
struct PReLUParams {
  Tensor slopes;
  Tensor slope_grad;

  static PReLUParams create(int64_t channels);

  int64_t channels() const { return slopes.shape().extent(0); }
  void zero_grads();
};

// Cross-correlation plus bias (no kernel flip).
Tensor conv3d(const Tensor& input, const ConvLayerParams& p);

// Returns the input gradient and accumulates into p.weight_grad / p.bias_grad.
Tensor conv3d_backward(const Tensor& input, ConvLayerParams& p,
                       const Tensor& upstream);

// Zero-insertion upsampling with k = 2, stride 2: extents double.
Tensor transposed_conv3d(const Tensor& input, const ConvLayerParams& p);
Tensor transposed_conv3d_backward(const Tensor& input, ConvLayerParams& p,
                                  const Tensor& upstream);

// out = x for x >= 0, slope_c * x otherwise.
Tensor prelu(const Tensor& input, const PReLUParams& p);
Tensor prelu_backward(const Tensor& input, PReLUParams& p,
                      const Tensor& upstream);

// Per-voxel softmax over the channel axis, max-subtracted for stability.
Tensor softmax_voxelwise(const Tensor& logits);

// Gradient w.r.t. logits given the softmax output (not the logits).
Tensor softmax_voxelwise_backward(const Tensor& probs, const Tensor& upstream);

}  // namespace volseg
