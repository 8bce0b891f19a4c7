#include "volseg/preprocess.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "volseg/errors.hpp"

namespace volseg {

namespace {

void require_sigma(float sigma) {
  if (!(sigma > 0.0f)) {
    throw std::domain_error("gaussian sigma must be > 0, got " +
                            std::to_string(sigma));
  }
}

// Half-sample symmetric reflection: ... d c b a | a b c d | d c b a ...
int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// One separable pass over every line along one axis. Lines have `n` elements
// `stride` apart; line starts are every `inner` elements within blocks of
// `n * inner`, repeated `outer` times.
void filter_axis(const float* src, float* dst, int64_t outer, int64_t n,
                 int64_t inner, const std::vector<double>& kernel) {
  const auto radius = static_cast<int64_t>(kernel.size() / 2);
  for (int64_t o = 0; o < outer; ++o) {
    const float* sblock = src + o * n * inner;
    float* dblock = dst + o * n * inner;
    for (int64_t j = 0; j < inner; ++j) {
      for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int64_t t = -radius; t <= radius; ++t) {
          const int64_t s = reflect_index(i + t, n);
          acc += kernel[static_cast<size_t>(t + radius)] *
                 static_cast<double>(sblock[s * inner + j]);
        }
        dblock[i * inner + j] = static_cast<float>(acc);
      }
    }
  }
}

double sample_coord(int64_t out_index, int64_t in_dim, int64_t out_dim) {
  const double scale = static_cast<double>(in_dim) / static_cast<double>(out_dim);
  double s = (static_cast<double>(out_index) + 0.5) * scale - 0.5;
  if (s < 0.0) s = 0.0;
  const double hi = static_cast<double>(in_dim - 1);
  if (s > hi) s = hi;
  return s;
}

void check_target(const std::array<int64_t, 3>& target) {
  for (int64_t d : target) {
    if (d < 1) throw ShapeError("resample target extents must be >= 1");
  }
}

}  // namespace

GaussianSpec::GaussianSpec(float sigma_)
    : sigma(sigma_),
      truncation_radius(static_cast<int>(
          std::ceil(3.0 * static_cast<double>(sigma_)))) {
  require_sigma(sigma_);
}

GaussianSpec::GaussianSpec(float sigma_, int radius)
    : sigma(sigma_), truncation_radius(radius) {
  require_sigma(sigma_);
  if (radius < 0) throw std::domain_error("truncation radius must be >= 0");
}

float gaussian_pdf(float x, float mu, float sigma) {
  require_sigma(sigma);
  const double s = sigma;
  const double d = (static_cast<double>(x) - static_cast<double>(mu)) / s;
  const double norm = 1.0 / (s * std::sqrt(2.0 * std::numbers::pi));
  return static_cast<float>(norm * std::exp(-0.5 * d * d));
}

std::vector<double> gaussian_kernel(const GaussianSpec& spec) {
  const int r = spec.truncation_radius;
  std::vector<double> k(static_cast<size_t>(2 * r + 1));
  const double s = spec.sigma;
  double sum = 0.0;
  for (int t = -r; t <= r; ++t) {
    const double d = static_cast<double>(t) / s;
    const double w = std::exp(-0.5 * d * d);
    k[static_cast<size_t>(t + r)] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

VolumeImage normalize_intensity(const VolumeImage& v) {
  v.validate();
  const int64_t voxels = v.depth() * v.height() * v.width();

  VolumeImage out = v;
  float* data = out.data.mutable_data();
  for (int64_t c = 0; c < v.channels(); ++c) {
    float* ch = data + c * voxels;

    double sum = 0.0, sum_sq = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < voxels; ++i) {
      if (ch[i] != 0.0f) {
        const double x = ch[i];
        sum += x;
        sum_sq += x * x;
        ++count;
      }
    }

    if (count == 0) continue;  // all-zero channel stays as is
    const double mean = sum / static_cast<double>(count);
    const double var =
        std::max(0.0, sum_sq / static_cast<double>(count) - mean * mean);
    const double std_dev = std::sqrt(var);

    if (std_dev < 1e-8) {
      for (int64_t i = 0; i < voxels; ++i) ch[i] = 0.0f;
      continue;
    }
    for (int64_t i = 0; i < voxels; ++i) {
      if (ch[i] != 0.0f) {
        ch[i] = static_cast<float>((ch[i] - mean) / std_dev);
      }
    }
  }
  return out;
}

VolumeImage resample_trilinear(const VolumeImage& v,
                               const std::array<int64_t, 3>& target_dims) {
  v.validate();
  check_target(target_dims);
  const int64_t C = v.channels();
  const int64_t iD = v.depth(), iH = v.height(), iW = v.width();
  const int64_t oD = target_dims[0], oH = target_dims[1], oW = target_dims[2];

  Tensor result(Shape{C, oD, oH, oW});
  float* dst = result.mutable_data();
  const float* src = v.data.data();

  for (int64_t c = 0; c < C; ++c) {
    const float* in = src + c * iD * iH * iW;
    float* out = dst + c * oD * oH * oW;
    for (int64_t z = 0; z < oD; ++z) {
      const double fz = sample_coord(z, iD, oD);
      const int64_t z0 = static_cast<int64_t>(fz);
      const int64_t z1 = std::min(z0 + 1, iD - 1);
      const double wz = fz - static_cast<double>(z0);
      for (int64_t y = 0; y < oH; ++y) {
        const double fy = sample_coord(y, iH, oH);
        const int64_t y0 = static_cast<int64_t>(fy);
        const int64_t y1 = std::min(y0 + 1, iH - 1);
        const double wy = fy - static_cast<double>(y0);
        for (int64_t x = 0; x < oW; ++x) {
          const double fx = sample_coord(x, iW, oW);
          const int64_t x0 = static_cast<int64_t>(fx);
          const int64_t x1 = std::min(x0 + 1, iW - 1);
          const double wx = fx - static_cast<double>(x0);

          auto at = [&](int64_t zz, int64_t yy, int64_t xx) -> double {
            return in[(zz * iH + yy) * iW + xx];
          };
          const double c00 = at(z0, y0, x0) * (1 - wx) + at(z0, y0, x1) * wx;
          const double c01 = at(z0, y1, x0) * (1 - wx) + at(z0, y1, x1) * wx;
          const double c10 = at(z1, y0, x0) * (1 - wx) + at(z1, y0, x1) * wx;
          const double c11 = at(z1, y1, x0) * (1 - wx) + at(z1, y1, x1) * wx;
          const double c0 = c00 * (1 - wy) + c01 * wy;
          const double c1 = c10 * (1 - wy) + c11 * wy;
          out[(z * oH + y) * oW + x] =
              static_cast<float>(c0 * (1 - wz) + c1 * wz);
        }
      }
    }
  }

  VolumeImage out;
  out.data = std::move(result);
  out.modalities = v.modalities;
  // spacing is (x, y, z); dims are (D, H, W) = (z, y, x)
  out.spacing = {
      static_cast<float>(static_cast<double>(v.spacing[0]) * iW / oW),
      static_cast<float>(static_cast<double>(v.spacing[1]) * iH / oH),
      static_cast<float>(static_cast<double>(v.spacing[2]) * iD / oD),
  };
  return out;
}

LabelMap resample_nearest(const LabelMap& label,
                          const std::array<int64_t, 3>& target_dims) {
  label.validate();
  check_target(target_dims);
  const int64_t iD = label.shape.extent(0), iH = label.shape.extent(1),
                iW = label.shape.extent(2);
  const int64_t oD = target_dims[0], oH = target_dims[1], oW = target_dims[2];

  LabelMap out = LabelMap::zeros(Shape{oD, oH, oW});
  for (int64_t z = 0; z < oD; ++z) {
    const auto sz = static_cast<int64_t>(std::lround(sample_coord(z, iD, oD)));
    for (int64_t y = 0; y < oH; ++y) {
      const auto sy = static_cast<int64_t>(std::lround(sample_coord(y, iH, oH)));
      for (int64_t x = 0; x < oW; ++x) {
        const auto sx =
            static_cast<int64_t>(std::lround(sample_coord(x, iW, oW)));
        out.voxels[static_cast<size_t>((z * oH + y) * oW + x)] =
            label.voxels[static_cast<size_t>((sz * iH + sy) * iW + sx)];
      }
    }
  }
  return out;
}

VolumeImage gaussian_filter3d(const VolumeImage& v, const GaussianSpec& spec) {
  v.validate();
  const std::vector<double> kernel = gaussian_kernel(spec);

  const int64_t C = v.channels();
  const int64_t D = v.depth(), H = v.height(), W = v.width();
  const int64_t voxels = D * H * W;

  VolumeImage out = v;
  Tensor scratch(v.data.shape());
  float* a = out.data.mutable_data();
  float* b = scratch.mutable_data();

  for (int64_t c = 0; c < C; ++c) {
    float* cur = a + c * voxels;
    float* tmp = b + c * voxels;
    filter_axis(cur, tmp, D * H, W, 1, kernel);  // along x
    filter_axis(tmp, cur, D, H, W, kernel);      // along y
    filter_axis(cur, tmp, 1, D, H * W, kernel);  // along z
    std::copy(tmp, tmp + voxels, cur);
  }
  return out;
}

}  // namespace volseg
