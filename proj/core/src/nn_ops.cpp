#include "volseg/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "volseg/errors.hpp"

namespace volseg {

namespace {

void require_rank4(const Tensor& t, const char* what) {
  if (t.shape().rank() != 4) {
    throw ShapeError(std::string(what) + " must be (C, D, H, W), got " +
                     t.shape().str());
  }
}

void require_channels(const Tensor& input, const ConvLayerParams& p,
                      const char* op) {
  if (input.shape().extent(0) != p.in_channels()) {
    throw ShapeError(std::string(op) + ": input has " +
                     std::to_string(input.shape().extent(0)) +
                     " channels, layer expects " +
                     std::to_string(p.in_channels()));
  }
}

void require_shape(const Tensor& t, const Shape& want, const char* what) {
  if (t.shape() != want) {
    throw ShapeError(std::string(what) + " shape " + t.shape().str() +
                     " does not match expected " + want.str());
  }
}

Shape conv_output_shape(const Tensor& input, const ConvLayerParams& p,
                        const char* op) {
  require_rank4(input, "conv input");
  require_channels(input, p, op);
  const int64_t D = input.shape().extent(1);
  const int64_t H = input.shape().extent(2);
  const int64_t W = input.shape().extent(3);
  if (p.stride == 1) {
    return Shape{p.out_channels(), D, H, W};
  }
  if ((D | H | W) & 1) {
    throw ShapeError(std::string(op) +
                     ": stride-2 downsampling needs even extents, got " +
                     input.shape().str());
  }
  return Shape{p.out_channels(), D / 2, H / 2, W / 2};
}

// Unit-stride path: symmetric zero padding (k-1)/2, extents preserved.
// Row accumulators are doubles; per output element the accumulation order is
// bias, then (ic, kz, ky, kx) ascending, which pins the floating-point result.
void conv_s1_forward(const float* in, const float* w, const float* b, float* out,
                     int64_t OC, int64_t IC, int64_t D, int64_t H, int64_t W,
                     int64_t k) {
  const int64_t pad = (k - 1) / 2;
  std::vector<double> acc(static_cast<size_t>(W));
  for (int64_t oc = 0; oc < OC; ++oc) {
    const float* woc = w + oc * IC * k * k * k;
    for (int64_t z = 0; z < D; ++z) {
      for (int64_t y = 0; y < H; ++y) {
        std::fill(acc.begin(), acc.end(), static_cast<double>(b[oc]));
        for (int64_t ic = 0; ic < IC; ++ic) {
          const float* icbase = in + ic * D * H * W;
          const float* wic = woc + ic * k * k * k;
          for (int64_t kz = 0; kz < k; ++kz) {
            const int64_t iz = z + kz - pad;
            if (iz < 0 || iz >= D) continue;
            for (int64_t ky = 0; ky < k; ++ky) {
              const int64_t iy = y + ky - pad;
              if (iy < 0 || iy >= H) continue;
              const float* row = icbase + (iz * H + iy) * W;
              const float* wrow = wic + (kz * k + ky) * k;
              for (int64_t kx = 0; kx < k; ++kx) {
                const double wv = wrow[kx];
                const int64_t off = kx - pad;
                const int64_t lo = std::max<int64_t>(0, -off);
                const int64_t hi = std::min<int64_t>(W, W - off);
                const float* r = row + off;
                for (int64_t x = lo; x < hi; ++x) {
                  acc[static_cast<size_t>(x)] += wv * static_cast<double>(r[x]);
                }
              }
            }
          }
        }
        float* orow = out + (oc * D + z) * H * W + y * W;
        for (int64_t x = 0; x < W; ++x) {
          orow[x] = static_cast<float>(acc[static_cast<size_t>(x)]);
        }
      }
    }
  }
}

// Stride-2, k = 2, no padding: extents halve.
void conv_s2_forward(const float* in, const float* w, const float* b, float* out,
                     int64_t OC, int64_t IC, int64_t D, int64_t H, int64_t W) {
  const int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
  std::vector<double> acc(static_cast<size_t>(Wo));
  for (int64_t oc = 0; oc < OC; ++oc) {
    const float* woc = w + oc * IC * 8;
    for (int64_t zo = 0; zo < Do; ++zo) {
      for (int64_t yo = 0; yo < Ho; ++yo) {
        std::fill(acc.begin(), acc.end(), static_cast<double>(b[oc]));
        for (int64_t ic = 0; ic < IC; ++ic) {
          const float* icbase = in + ic * D * H * W;
          const float* wic = woc + ic * 8;
          for (int64_t kz = 0; kz < 2; ++kz) {
            const int64_t iz = 2 * zo + kz;
            for (int64_t ky = 0; ky < 2; ++ky) {
              const int64_t iy = 2 * yo + ky;
              const float* row = icbase + (iz * H + iy) * W;
              const float* wrow = wic + (kz * 2 + ky) * 2;
              for (int64_t kx = 0; kx < 2; ++kx) {
                const double wv = wrow[kx];
                for (int64_t xo = 0; xo < Wo; ++xo) {
                  acc[static_cast<size_t>(xo)] +=
                      wv * static_cast<double>(row[2 * xo + kx]);
                }
              }
            }
          }
        }
        float* orow = out + (oc * Do + zo) * Ho * Wo + yo * Wo;
        for (int64_t xo = 0; xo < Wo; ++xo) {
          orow[xo] = static_cast<float>(acc[static_cast<size_t>(xo)]);
        }
      }
    }
  }
}

}  // namespace

ConvLayerParams ConvLayerParams::create(int64_t out_ch, int64_t in_ch,
                                        int kernel, int stride, Rng& rng) {
  ConvLayerParams p;
  p.kernel = kernel;
  p.stride = stride;
  const int64_t k3 = static_cast<int64_t>(kernel) * kernel * kernel;
  const double fan_in = static_cast<double>(in_ch * k3);
  const double fan_out = static_cast<double>(out_ch * k3);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));

  Shape wshape{out_ch, in_ch, kernel, kernel, kernel};
  std::vector<float> w(static_cast<size_t>(wshape.elements()));
  for (float& v : w) {
    v = static_cast<float>(rng.uniform(-limit, limit));
  }
  p.weights = Tensor(wshape, std::move(w));
  p.bias = Tensor(Shape{out_ch});
  p.weight_grad = Tensor(wshape);
  p.bias_grad = Tensor(Shape{out_ch});
  p.validate();
  return p;
}

void ConvLayerParams::zero_grads() {
  float* wg = weight_grad.mutable_data();
  std::fill(wg, wg + weight_grad.shape().elements(), 0.0f);
  float* bg = bias_grad.mutable_data();
  std::fill(bg, bg + bias_grad.shape().elements(), 0.0f);
}

void ConvLayerParams::validate() const {
  if (weights.shape().rank() != 5) {
    throw ShapeError("conv weights must be rank 5, got " + weights.shape().str());
  }
  const int64_t k = kernel;
  if (weights.shape().extent(2) != k || weights.shape().extent(3) != k ||
      weights.shape().extent(4) != k) {
    throw ShapeError("conv weights " + weights.shape().str() +
                     " do not match kernel size " + std::to_string(kernel));
  }
  if (bias.shape() != Shape{out_channels()}) {
    throw ShapeError("conv bias shape " + bias.shape().str() +
                     " does not match out_channels");
  }
  if (weight_grad.shape() != weights.shape() ||
      bias_grad.shape() != bias.shape()) {
    throw ShapeError("conv grad buffers do not match parameter shapes");
  }
  const bool ok = (stride == 1 && kernel % 2 == 1 && kernel >= 1) ||
                  (stride == 2 && kernel == 2);
  if (!ok) {
    throw ShapeError("unsupported conv geometry: kernel " +
                     std::to_string(kernel) + ", stride " +
                     std::to_string(stride));
  }
}

PReLUParams PReLUParams::create(int64_t channels) {
  PReLUParams p;
  p.slopes = Tensor(Shape{channels}, 0.25f);
  p.slope_grad = Tensor(Shape{channels});
  return p;
}

void PReLUParams::zero_grads() {
  float* g = slope_grad.mutable_data();
  std::fill(g, g + slope_grad.shape().elements(), 0.0f);
}

Tensor conv3d(const Tensor& input, const ConvLayerParams& p) {
  p.validate();
  const Shape out_shape = conv_output_shape(input, p, "conv3d");
  Tensor out(out_shape);
  const int64_t IC = p.in_channels(), OC = p.out_channels();
  const int64_t D = input.shape().extent(1);
  const int64_t H = input.shape().extent(2);
  const int64_t W = input.shape().extent(3);
  if (p.stride == 1) {
    conv_s1_forward(input.data(), p.weights.data(), p.bias.data(),
                    out.mutable_data(), OC, IC, D, H, W, p.kernel);
  } else {
    conv_s2_forward(input.data(), p.weights.data(), p.bias.data(),
                    out.mutable_data(), OC, IC, D, H, W);
  }
  return out;
}

Tensor conv3d_backward(const Tensor& input, ConvLayerParams& p,
                       const Tensor& upstream) {
  p.validate();
  const Shape out_shape = conv_output_shape(input, p, "conv3d_backward");
  require_shape(upstream, out_shape, "conv3d_backward upstream");

  const int64_t IC = p.in_channels(), OC = p.out_channels();
  const int64_t D = input.shape().extent(1);
  const int64_t H = input.shape().extent(2);
  const int64_t W = input.shape().extent(3);
  const int64_t k = p.kernel;
  const int64_t Do = out_shape.extent(1), Ho = out_shape.extent(2),
                Wo = out_shape.extent(3);

  const float* in = input.data();
  const float* up = upstream.data();
  const float* w = p.weights.data();

  Tensor input_grad(input.shape());
  float* din = input_grad.mutable_data();

  // Weight and bias contributions accumulate in doubles for the whole call,
  // then flush once into the float grad buffers.
  std::vector<double> dw(static_cast<size_t>(p.weights.shape().elements()), 0.0);
  std::vector<double> db(static_cast<size_t>(OC), 0.0);

  if (p.stride == 1) {
    const int64_t pad = (k - 1) / 2;

    std::vector<double> acc(static_cast<size_t>(W));
    for (int64_t ic = 0; ic < IC; ++ic) {
      for (int64_t iz = 0; iz < D; ++iz) {
        for (int64_t iy = 0; iy < H; ++iy) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (int64_t oc = 0; oc < OC; ++oc) {
            const float* upoc = up + oc * D * H * W;
            const float* wic = w + (oc * IC + ic) * k * k * k;
            for (int64_t kz = 0; kz < k; ++kz) {
              const int64_t oz = iz + pad - kz;
              if (oz < 0 || oz >= D) continue;
              for (int64_t ky = 0; ky < k; ++ky) {
                const int64_t oy = iy + pad - ky;
                if (oy < 0 || oy >= H) continue;
                const float* uprow = upoc + (oz * H + oy) * W;
                const float* wrow = wic + (kz * k + ky) * k;
                for (int64_t kx = 0; kx < k; ++kx) {
                  const double wv = wrow[kx];
                  const int64_t off = pad - kx;
                  const int64_t lo = std::max<int64_t>(0, -off);
                  const int64_t hi = std::min<int64_t>(W, W - off);
                  const float* r = uprow + off;
                  for (int64_t x = lo; x < hi; ++x) {
                    acc[static_cast<size_t>(x)] +=
                        wv * static_cast<double>(r[x]);
                  }
                }
              }
            }
          }
          float* drow = din + (ic * D + iz) * H * W + iy * W;
          for (int64_t x = 0; x < W; ++x) {
            drow[x] = static_cast<float>(acc[static_cast<size_t>(x)]);
          }
        }
      }
    }

    for (int64_t oc = 0; oc < OC; ++oc) {
      const float* upoc = up + oc * D * H * W;
      double bsum = 0.0;
      for (int64_t i = 0; i < D * H * W; ++i) bsum += upoc[i];
      db[static_cast<size_t>(oc)] += bsum;

      for (int64_t z = 0; z < D; ++z) {
        for (int64_t y = 0; y < H; ++y) {
          const float* uprow = upoc + (z * H + y) * W;
          for (int64_t ic = 0; ic < IC; ++ic) {
            const float* icbase = in + ic * D * H * W;
            double* dwic = dw.data() + (oc * IC + ic) * k * k * k;
            for (int64_t kz = 0; kz < k; ++kz) {
              const int64_t iz = z + kz - pad;
              if (iz < 0 || iz >= D) continue;
              for (int64_t ky = 0; ky < k; ++ky) {
                const int64_t iy = y + ky - pad;
                if (iy < 0 || iy >= H) continue;
                const float* inrow = icbase + (iz * H + iy) * W;
                double* dwrow = dwic + (kz * k + ky) * k;
                for (int64_t kx = 0; kx < k; ++kx) {
                  const int64_t off = kx - pad;
                  const int64_t lo = std::max<int64_t>(0, -off);
                  const int64_t hi = std::min<int64_t>(W, W - off);
                  const float* r = inrow + off;
                  double s = 0.0;
                  for (int64_t x = lo; x < hi; ++x) {
                    s += static_cast<double>(uprow[x]) *
                         static_cast<double>(r[x]);
                  }
                  dwrow[kx] += s;
                }
              }
            }
          }
        }
      }
    }
  } else {
    // Stride 2, k = 2: every input voxel feeds exactly one output voxel per
    // output channel, selected by coordinate parity.
    for (int64_t ic = 0; ic < IC; ++ic) {
      for (int64_t iz = 0; iz < D; ++iz) {
        const int64_t kz = iz & 1, oz = iz >> 1;
        for (int64_t iy = 0; iy < H; ++iy) {
          const int64_t ky = iy & 1, oy = iy >> 1;
          float* drow = din + (ic * D + iz) * H * W + iy * W;
          for (int64_t ix = 0; ix < W; ++ix) {
            const int64_t kx = ix & 1, ox = ix >> 1;
            double s = 0.0;
            for (int64_t oc = 0; oc < OC; ++oc) {
              const double wv =
                  w[(((oc * IC + ic) * 2 + kz) * 2 + ky) * 2 + kx];
              s += wv * static_cast<double>(
                            up[(oc * Do + oz) * Ho * Wo + oy * Wo + ox]);
            }
            drow[ix] = static_cast<float>(s);
          }
        }
      }
    }

    for (int64_t oc = 0; oc < OC; ++oc) {
      const float* upoc = up + oc * Do * Ho * Wo;
      double bsum = 0.0;
      for (int64_t i = 0; i < Do * Ho * Wo; ++i) bsum += upoc[i];
      db[static_cast<size_t>(oc)] += bsum;

      for (int64_t ic = 0; ic < IC; ++ic) {
        const float* icbase = in + ic * D * H * W;
        double* dwic = dw.data() + (oc * IC + ic) * 8;
        for (int64_t kz = 0; kz < 2; ++kz) {
          for (int64_t ky = 0; ky < 2; ++ky) {
            for (int64_t kx = 0; kx < 2; ++kx) {
              double s = 0.0;
              for (int64_t zo = 0; zo < Do; ++zo) {
                for (int64_t yo = 0; yo < Ho; ++yo) {
                  const float* uprow = upoc + (zo * Ho + yo) * Wo;
                  const float* inrow =
                      icbase + ((2 * zo + kz) * H + 2 * yo + ky) * W;
                  for (int64_t xo = 0; xo < Wo; ++xo) {
                    s += static_cast<double>(uprow[xo]) *
                         static_cast<double>(inrow[2 * xo + kx]);
                  }
                }
              }
              dwic[(kz * 2 + ky) * 2 + kx] += s;
            }
          }
        }
      }
    }
  }

  float* wg = p.weight_grad.mutable_data();
  for (int64_t i = 0; i < p.weights.shape().elements(); ++i) {
    wg[i] += static_cast<float>(dw[static_cast<size_t>(i)]);
  }
  float* bg = p.bias_grad.mutable_data();
  for (int64_t i = 0; i < OC; ++i) {
    bg[i] += static_cast<float>(db[static_cast<size_t>(i)]);
  }
  return input_grad;
}

Tensor transposed_conv3d(const Tensor& input, const ConvLayerParams& p) {
  p.validate();
  require_rank4(input, "transposed conv input");
  require_channels(input, p, "transposed_conv3d");
  if (p.kernel != 2 || p.stride != 2) {
    throw ShapeError("transposed_conv3d supports kernel 2 / stride 2 only");
  }
  const int64_t IC = p.in_channels(), OC = p.out_channels();
  const int64_t D = input.shape().extent(1);
  const int64_t H = input.shape().extent(2);
  const int64_t W = input.shape().extent(3);

  Tensor out(Shape{OC, 2 * D, 2 * H, 2 * W});
  const float* in = input.data();
  const float* w = p.weights.data();
  const float* b = p.bias.data();
  float* o = out.mutable_data();

  std::vector<double> acc(static_cast<size_t>(2 * W));
  for (int64_t oc = 0; oc < OC; ++oc) {
    for (int64_t zo = 0; zo < 2 * D; ++zo) {
      const int64_t kz = zo & 1, zi = zo >> 1;
      for (int64_t yo = 0; yo < 2 * H; ++yo) {
        const int64_t ky = yo & 1, yi = yo >> 1;
        std::fill(acc.begin(), acc.end(), static_cast<double>(b[oc]));
        for (int64_t ic = 0; ic < IC; ++ic) {
          const float* inrow = in + (ic * D + zi) * H * W + yi * W;
          const float* wpair = w + (((oc * IC + ic) * 2 + kz) * 2 + ky) * 2;
          const double w0 = wpair[0], w1 = wpair[1];
          for (int64_t xi = 0; xi < W; ++xi) {
            const double v = inrow[xi];
            acc[static_cast<size_t>(2 * xi)] += w0 * v;
            acc[static_cast<size_t>(2 * xi + 1)] += w1 * v;
          }
        }
        float* orow = o + (oc * 2 * D + zo) * 4 * H * W + yo * 2 * W;
        for (int64_t xo = 0; xo < 2 * W; ++xo) {
          orow[xo] = static_cast<float>(acc[static_cast<size_t>(xo)]);
        }
      }
    }
  }
  return out;
}

Tensor transposed_conv3d_backward(const Tensor& input, ConvLayerParams& p,
                                  const Tensor& upstream) {
  p.validate();
  require_rank4(input, "transposed conv input");
  require_channels(input, p, "transposed_conv3d_backward");
  if (p.kernel != 2 || p.stride != 2) {
    throw ShapeError("transposed_conv3d supports kernel 2 / stride 2 only");
  }
  const int64_t IC = p.in_channels(), OC = p.out_channels();
  const int64_t D = input.shape().extent(1);
  const int64_t H = input.shape().extent(2);
  const int64_t W = input.shape().extent(3);
  require_shape(upstream, Shape{OC, 2 * D, 2 * H, 2 * W},
                "transposed_conv3d_backward upstream");

  const float* in = input.data();
  const float* up = upstream.data();
  const float* w = p.weights.data();

  Tensor input_grad(input.shape());
  float* din = input_grad.mutable_data();

  std::vector<double> dw(static_cast<size_t>(p.weights.shape().elements()), 0.0);
  std::vector<double> db(static_cast<size_t>(OC), 0.0);

  for (int64_t ic = 0; ic < IC; ++ic) {
    for (int64_t zi = 0; zi < D; ++zi) {
      for (int64_t yi = 0; yi < H; ++yi) {
        float* drow = din + (ic * D + zi) * H * W + yi * W;
        for (int64_t xi = 0; xi < W; ++xi) {
          double s = 0.0;
          for (int64_t oc = 0; oc < OC; ++oc) {
            const float* woc = w + (oc * IC + ic) * 8;
            const float* upoc = up + oc * 8 * D * H * W;
            for (int64_t kz = 0; kz < 2; ++kz) {
              for (int64_t ky = 0; ky < 2; ++ky) {
                const float* uprow =
                    upoc + ((2 * zi + kz) * 2 * H + 2 * yi + ky) * 2 * W;
                s += static_cast<double>(woc[(kz * 2 + ky) * 2]) *
                     static_cast<double>(uprow[2 * xi]);
                s += static_cast<double>(woc[(kz * 2 + ky) * 2 + 1]) *
                     static_cast<double>(uprow[2 * xi + 1]);
              }
            }
          }
          drow[xi] = static_cast<float>(s);
        }
      }
    }
  }

  for (int64_t oc = 0; oc < OC; ++oc) {
    const float* upoc = up + oc * 8 * D * H * W;
    double bsum = 0.0;
    for (int64_t i = 0; i < 8 * D * H * W; ++i) bsum += upoc[i];
    db[static_cast<size_t>(oc)] += bsum;

    for (int64_t ic = 0; ic < IC; ++ic) {
      const float* icbase = in + ic * D * H * W;
      double* dwic = dw.data() + (oc * IC + ic) * 8;
      for (int64_t kz = 0; kz < 2; ++kz) {
        for (int64_t ky = 0; ky < 2; ++ky) {
          for (int64_t kx = 0; kx < 2; ++kx) {
            double s = 0.0;
            for (int64_t zi = 0; zi < D; ++zi) {
              for (int64_t yi = 0; yi < H; ++yi) {
                const float* inrow = icbase + (zi * H + yi) * W;
                const float* uprow =
                    upoc + ((2 * zi + kz) * 2 * H + 2 * yi + ky) * 2 * W + kx;
                for (int64_t xi = 0; xi < W; ++xi) {
                  s += static_cast<double>(uprow[2 * xi]) *
                       static_cast<double>(inrow[xi]);
                }
              }
            }
            dwic[(kz * 2 + ky) * 2 + kx] += s;
          }
        }
      }
    }
  }

  float* wg = p.weight_grad.mutable_data();
  for (int64_t i = 0; i < p.weights.shape().elements(); ++i) {
    wg[i] += static_cast<float>(dw[static_cast<size_t>(i)]);
  }
  float* bg = p.bias_grad.mutable_data();
  for (int64_t i = 0; i < OC; ++i) {
    bg[i] += static_cast<float>(db[static_cast<size_t>(i)]);
  }
  return input_grad;
}

Tensor prelu(const Tensor& input, const PReLUParams& p) {
  require_rank4(input, "prelu input");
  const int64_t C = input.shape().extent(0);
  if (C != p.channels()) {
    throw ShapeError("prelu: " + std::to_string(p.channels()) +
                     " slopes for " + std::to_string(C) + " channels");
  }
  const int64_t S = input.shape().elements() / C;
  Tensor out(input.shape());
  const float* in = input.data();
  const float* a = p.slopes.data();
  float* o = out.mutable_data();
  for (int64_t c = 0; c < C; ++c) {
    const float slope = a[c];
    const float* irow = in + c * S;
    float* orow = o + c * S;
    for (int64_t i = 0; i < S; ++i) {
      const float x = irow[i];
      orow[i] = x >= 0.0f ? x : slope * x;
    }
  }
  return out;
}

Tensor prelu_backward(const Tensor& input, PReLUParams& p,
                      const Tensor& upstream) {
  require_rank4(input, "prelu input");
  require_shape(upstream, input.shape(), "prelu upstream");
  const int64_t C = input.shape().extent(0);
  if (C != p.channels()) {
    throw ShapeError("prelu: " + std::to_string(p.channels()) +
                     " slopes for " + std::to_string(C) + " channels");
  }
  const int64_t S = input.shape().elements() / C;

  Tensor input_grad(input.shape());
  const float* in = input.data();
  const float* up = upstream.data();
  const float* a = p.slopes.data();
  float* din = input_grad.mutable_data();
  float* da = p.slope_grad.mutable_data();

  for (int64_t c = 0; c < C; ++c) {
    const float slope = a[c];
    const float* irow = in + c * S;
    const float* uprow = up + c * S;
    float* drow = din + c * S;
    double dslope = 0.0;
    for (int64_t i = 0; i < S; ++i) {
      const float x = irow[i];
      if (x >= 0.0f) {
        drow[i] = uprow[i];
      } else {
        drow[i] = slope * uprow[i];
        dslope += static_cast<double>(x) * static_cast<double>(uprow[i]);
      }
    }
    da[c] += static_cast<float>(dslope);
  }
  return input_grad;
}

Tensor softmax_voxelwise(const Tensor& logits) {
  require_rank4(logits, "softmax input");
  const int64_t C = logits.shape().extent(0);
  const int64_t S = logits.shape().elements() / C;
  Tensor out(logits.shape());
  const float* in = logits.data();
  float* o = out.mutable_data();
  for (int64_t v = 0; v < S; ++v) {
    float m = in[v];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, in[c * S + v]);
    double sum = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double e = std::exp(static_cast<double>(in[c * S + v] - m));
      o[c * S + v] = static_cast<float>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < C; ++c) {
      o[c * S + v] = static_cast<float>(o[c * S + v] * inv);
    }
  }
  return out;
}

Tensor softmax_voxelwise_backward(const Tensor& probs, const Tensor& upstream) {
  require_rank4(probs, "softmax output");
  require_shape(upstream, probs.shape(), "softmax upstream");
  const int64_t C = probs.shape().extent(0);
  const int64_t S = probs.shape().elements() / C;
  Tensor grad(probs.shape());
  const float* pr = probs.data();
  const float* up = upstream.data();
  float* g = grad.mutable_data();
  for (int64_t v = 0; v < S; ++v) {
    double dot = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      dot += static_cast<double>(up[c * S + v]) *
             static_cast<double>(pr[c * S + v]);
    }
    for (int64_t c = 0; c < C; ++c) {
      g[c * S + v] = static_cast<float>(
          static_cast<double>(pr[c * S + v]) *
          (static_cast<double>(up[c * S + v]) - dot));
    }
  }
  return grad;
}

}  // namespace volseg
