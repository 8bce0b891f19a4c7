#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "volseg/errors.hpp"

namespace volseg {

/// Extents of a dense row-major array. The axis order for volumes is
/// (channel, depth, height, width); rank 0 denotes a scalar.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<int64_t> dims) : dims_(std::move(dims)) { validate(); }

  int rank() const { return static_cast<int>(dims_.size()); }
  int64_t extent(int axis) const;
  const std::vector<int64_t>& dims() const { return dims_; }
  int64_t elements() const { return elements_; }

  bool operator==(const Shape& other) const { return dims_ == other.dims_; }
  bool operator!=(const Shape& other) const { return !(*this == other); }

  std::string str() const;  // "4x32x32x32"; "scalar" for rank 0

 private:
  void validate();

  std::vector<int64_t> dims_;
  int64_t elements_ = 1;
};

// Dense array of 32-bit floats in row-major order. The buffer is shared
// between copies and treated as immutable once an operation has returned
// it; mutable_data() copies on write when the buffer is shared. All
// reductions accumulate in 64-bit and run in flat buffer order, so results
// are bitwise reproducible across runs.
class Tensor {
 public:
  Tensor() = default;  // empty; assign before use

  explicit Tensor(const Shape& shape, float fill = 0.0f);
  Tensor(const Shape& shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  int64_t size() const { return data_ ? shape_.elements() : 0; }
  bool empty() const { return data_ == nullptr; }

  const float* data() const { return data_->data(); }
  float* mutable_data();  // copy-on-write when shared

  float operator[](int64_t flat) const { return (*data_)[static_cast<size_t>(flat)]; }
  float at(std::initializer_list<int64_t> index) const;

  Tensor reshaped(const Shape& new_shape) const;  // same element count
  Tensor clone() const;                           // fresh buffer

 private:
  Shape shape_;
  std::shared_ptr<std::vector<float>> data_;
};

// Element-wise operations. Shapes must match exactly; there is no
// broadcasting. Inputs are never modified.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

template <class F>
Tensor map(const Tensor& a, F&& fn) {
  Tensor out(a.shape());
  float* dst = out.mutable_data();
  const float* src = a.data();
  for (int64_t i = 0; i < a.size(); ++i) dst[i] = fn(src[i]);
  return out;
}

/// Sum of every element, accumulated in double in flat buffer order.
double sum(const Tensor& a);

/// Sum over the given axes; the summed extents are removed from the shape.
/// Summing all axes yields a rank-0 tensor.
Tensor reduce_sum(const Tensor& a, std::span<const int> axes);

struct PadAmount {
  int64_t before = 0;
  int64_t after = 0;
};

/// Grow each axis by (before, after) filled with `value`; the interior is
/// the original tensor.
Tensor pad(const Tensor& a, std::span<const PadAmount> amounts, float value);

/// Inverse of pad: take `extents` starting at `offsets` along each axis.
Tensor crop(const Tensor& a, std::span<const int64_t> offsets, const Shape& extents);

}  // namespace volseg
