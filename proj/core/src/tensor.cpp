#include "volseg/tensor.hpp"

#include <algorithm>
#include <limits>

namespace volseg {

void Shape::validate() {
  elements_ = 1;
  for (int64_t d : dims_) {
    if (d < 1) {
      throw ShapeError("invalid shape " + str() + ": every extent must be >= 1");
    }
    if (elements_ > std::numeric_limits<int64_t>::max() / d) {
      throw ShapeError("invalid shape: element count overflows");
    }
    elements_ *= d;
  }
}

int64_t Shape::extent(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + str());
  }
  return dims_[static_cast<size_t>(axis)];
}

std::string Shape::str() const {
  if (dims_.empty()) return "scalar";
  std::string s;
  for (size_t i = 0; i < dims_.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(dims_[i]);
  }
  return s;
}

Tensor::Tensor(const Shape& shape, float fill)
    : shape_(shape),
      data_(std::make_shared<std::vector<float>>(static_cast<size_t>(shape.elements()), fill)) {}

Tensor::Tensor(const Shape& shape, std::vector<float> data) : shape_(shape) {
  if (static_cast<int64_t>(data.size()) != shape.elements()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape.str());
  }
  data_ = std::make_shared<std::vector<float>>(std::move(data));
}

float* Tensor::mutable_data() {
  if (!data_) throw UsageError("mutable_data() on empty tensor");
  if (data_.use_count() > 1) {
    data_ = std::make_shared<std::vector<float>>(*data_);
  }
  return data_->data();
}

float Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != shape_.rank()) {
    throw ShapeError("index rank " + std::to_string(index.size()) +
                     " does not match shape " + shape_.str());
  }
  int64_t flat = 0;
  int axis = 0;
  for (int64_t i : index) {
    const int64_t extent = shape_.extent(axis);
    if (i < 0 || i >= extent) {
      throw ShapeError("index " + std::to_string(i) + " out of range on axis " +
                       std::to_string(axis) + " of " + shape_.str());
    }
    flat = flat * extent + i;
    ++axis;
  }
  return (*data_)[static_cast<size_t>(flat)];
}

Tensor Tensor::reshaped(const Shape& new_shape) const {
  if (new_shape.elements() != shape_.elements()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + new_shape.str());
  }
  Tensor out = *this;
  out.shape_ = new_shape;
  return out;
}

Tensor Tensor::clone() const {
  Tensor out = *this;
  out.data_ = std::make_shared<std::vector<float>>(*data_);
  return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

template <class F>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F&& fn) {
  require_same_shape(a, b, name);
  Tensor out(a.shape());
  float* dst = out.mutable_data();
  const float* pa = a.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) dst[i] = fn(pa[i], pb[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](float x, float y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](float x, float y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](float x, float y) { return x * y; });
}

Tensor scale(const Tensor& a, float factor) {
  return map(a, [factor](float x) { return x * factor; });
}

double sum(const Tensor& a) {
  double acc = 0.0;
  const float* p = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += p[i];
  return acc;
}

Tensor reduce_sum(const Tensor& a, std::span<const int> axes) {
  const int rank = a.shape().rank();
  std::vector<bool> summed(static_cast<size_t>(rank), false);
  for (int axis : axes) {
    if (axis < 0 || axis >= rank) {
      throw ShapeError("reduce_sum: axis " + std::to_string(axis) +
                       " out of range for " + a.shape().str());
    }
    summed[static_cast<size_t>(axis)] = true;
  }

  std::vector<int64_t> out_dims;
  for (int axis = 0; axis < rank; ++axis) {
    if (!summed[static_cast<size_t>(axis)]) out_dims.push_back(a.shape().extent(axis));
  }
  const Shape out_shape{std::vector<int64_t>(out_dims)};

  // Strides of the output in terms of the kept input axes.
  std::vector<int64_t> out_strides(static_cast<size_t>(rank), 0);
  int64_t stride = 1;
  for (int axis = rank - 1; axis >= 0; --axis) {
    if (!summed[static_cast<size_t>(axis)]) {
      out_strides[static_cast<size_t>(axis)] = stride;
      stride *= a.shape().extent(axis);
    }
  }

  // Accumulate in doubles, walking the input buffer in flat order so the
  // per-element accumulation order is fixed.
  std::vector<double> acc(static_cast<size_t>(out_shape.elements()), 0.0);
  std::vector<int64_t> index(static_cast<size_t>(rank), 0);
  const float* src = a.data();
  for (int64_t flat = 0; flat < a.size(); ++flat) {
    int64_t out_flat = 0;
    for (int axis = 0; axis < rank; ++axis) {
      out_flat += index[static_cast<size_t>(axis)] * out_strides[static_cast<size_t>(axis)];
    }
    acc[static_cast<size_t>(out_flat)] += src[flat];
    for (int axis = rank - 1; axis >= 0; --axis) {
      if (++index[static_cast<size_t>(axis)] < a.shape().extent(axis)) break;
      index[static_cast<size_t>(axis)] = 0;
    }
  }

  Tensor out(out_shape);
  float* dst = out.mutable_data();
  for (int64_t i = 0; i < out_shape.elements(); ++i) {
    dst[i] = static_cast<float>(acc[static_cast<size_t>(i)]);
  }
  return out;
}

Tensor pad(const Tensor& a, std::span<const PadAmount> amounts, float value) {
  const int rank = a.shape().rank();
  if (static_cast<int>(amounts.size()) != rank) {
    throw ShapeError("pad: need one (before, after) pair per axis");
  }
  std::vector<int64_t> out_dims(static_cast<size_t>(rank));
  for (int axis = 0; axis < rank; ++axis) {
    const PadAmount& p = amounts[static_cast<size_t>(axis)];
    if (p.before < 0 || p.after < 0) throw ShapeError("pad: negative pad extent");
    out_dims[static_cast<size_t>(axis)] = a.shape().extent(axis) + p.before + p.after;
  }
  const Shape out_shape{std::vector<int64_t>(out_dims)};

  Tensor out(out_shape, value);
  if (rank == 0) {
    float* dst = out.mutable_data();
    dst[0] = a.data()[0];
    return out;
  }

  // Copy the interior row by row along the last axis.
  std::vector<int64_t> in_strides(static_cast<size_t>(rank), 1);
  std::vector<int64_t> out_strides(static_cast<size_t>(rank), 1);
  for (int axis = rank - 2; axis >= 0; --axis) {
    in_strides[static_cast<size_t>(axis)] =
        in_strides[static_cast<size_t>(axis + 1)] * a.shape().extent(axis + 1);
    out_strides[static_cast<size_t>(axis)] =
        out_strides[static_cast<size_t>(axis + 1)] * out_shape.extent(axis + 1);
  }

  const int64_t row = a.shape().extent(rank - 1);
  const int64_t rows = a.shape().elements() / row;
  std::vector<int64_t> index(static_cast<size_t>(rank), 0);
  const float* src = a.data();
  float* dst = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    int64_t src_off = 0;
    int64_t dst_off = amounts[static_cast<size_t>(rank - 1)].before;
    for (int axis = 0; axis < rank - 1; ++axis) {
      src_off += index[static_cast<size_t>(axis)] * in_strides[static_cast<size_t>(axis)];
      dst_off += (index[static_cast<size_t>(axis)] + amounts[static_cast<size_t>(axis)].before) *
                 out_strides[static_cast<size_t>(axis)];
    }
    std::copy_n(src + src_off, row, dst + dst_off);
    for (int axis = rank - 2; axis >= 0; --axis) {
      if (++index[static_cast<size_t>(axis)] < a.shape().extent(axis)) break;
      index[static_cast<size_t>(axis)] = 0;
    }
  }
  return out;
}

Tensor crop(const Tensor& a, std::span<const int64_t> offsets, const Shape& extents) {
  const int rank = a.shape().rank();
  if (static_cast<int>(offsets.size()) != rank || extents.rank() != rank) {
    throw ShapeError("crop: offsets and extents must match tensor rank");
  }
  for (int axis = 0; axis < rank; ++axis) {
    const int64_t off = offsets[static_cast<size_t>(axis)];
    if (off < 0 || off + extents.extent(axis) > a.shape().extent(axis)) {
      throw ShapeError("crop: window exceeds " + a.shape().str() + " on axis " +
                       std::to_string(axis));
    }
  }

  Tensor out(extents);
  if (rank == 0) {
    out.mutable_data()[0] = a.data()[0];
    return out;
  }

  std::vector<int64_t> in_strides(static_cast<size_t>(rank), 1);
  for (int axis = rank - 2; axis >= 0; --axis) {
    in_strides[static_cast<size_t>(axis)] =
        in_strides[static_cast<size_t>(axis + 1)] * a.shape().extent(axis + 1);
  }

  const int64_t row = extents.extent(rank - 1);
  const int64_t rows = extents.elements() / row;
  std::vector<int64_t> index(static_cast<size_t>(rank), 0);
  const float* src = a.data();
  float* dst = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    int64_t src_off = offsets[static_cast<size_t>(rank - 1)];
    for (int axis = 0; axis < rank - 1; ++axis) {
      src_off += (index[static_cast<size_t>(axis)] + offsets[static_cast<size_t>(axis)]) *
                 in_strides[static_cast<size_t>(axis)];
    }
    std::copy_n(src + src_off, row, dst + r * row);
    for (int axis = rank - 2; axis >= 0; --axis) {
      if (++index[static_cast<size_t>(axis)] < extents.extent(axis)) break;
      index[static_cast<size_t>(axis)] = 0;
    }
  }
  return out;
}

}  // namespace volseg
