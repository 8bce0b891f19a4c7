#include "volseg/volume.hpp"

namespace volseg {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::T1: return "t1";
    case Modality::T1c: return "t1c";
    case Modality::T2: return "t2";
    case Modality::Flair: return "flair";
    case Modality::Label: return "seg";
    case Modality::Other: return "other";
  }
  return "other";
}

std::optional<Modality> modality_from_name(std::string_view name) {
  if (name == "t1") return Modality::T1;
  if (name == "t1c") return Modality::T1c;
  if (name == "t2") return Modality::T2;
  if (name == "flair") return Modality::Flair;
  if (name == "seg") return Modality::Label;
  if (name == "other") return Modality::Other;
  return std::nullopt;
}

void VolumeImage::validate() const {
  if (data.empty() || data.shape().rank() != 4) {
    throw ShapeError("VolumeImage data must be (channels, depth, height, width)");
  }
  if (static_cast<int64_t>(modalities.size()) != channels()) {
    throw ShapeError("VolumeImage: " + std::to_string(modalities.size()) +
                     " modality tags for " + std::to_string(channels()) + " channels");
  }
  for (float s : spacing) {
    if (!(s > 0.0f)) throw ShapeError("VolumeImage: spacing entries must be > 0");
  }
}

LabelMap LabelMap::zeros(const Shape& shape) {
  LabelMap out;
  out.shape = shape;
  out.voxels.assign(static_cast<size_t>(shape.elements()), 0);
  return out;
}

void LabelMap::validate() const {
  if (shape.rank() != 3) throw ShapeError("LabelMap must be (depth, height, width)");
  if (static_cast<int64_t>(voxels.size()) != shape.elements()) {
    throw ShapeError("LabelMap voxel count does not match shape " + shape.str());
  }
  for (uint8_t v : voxels) {
    if (v > 1) throw ShapeError("LabelMap voxels must be 0 or 1");
  }
}

Tensor label_to_tensor(const LabelMap& label) {
  Tensor out(label.shape);
  float* dst = out.mutable_data();
  for (int64_t i = 0; i < label.size(); ++i) {
    dst[i] = static_cast<float>(label.voxels[static_cast<size_t>(i)]);
  }
  return out;
}

LabelMap label_from_tensor(const Tensor& t) {
  Shape shape = t.shape();
  if (shape.rank() == 4 && shape.extent(0) == 1) {
    shape = Shape{shape.extent(1), shape.extent(2), shape.extent(3)};
  }
  if (shape.rank() != 3) {
    throw ShapeError("label_from_tensor: expected (D,H,W) or (1,D,H,W), got " +
                     t.shape().str());
  }
  LabelMap out = LabelMap::zeros(shape);
  const float* src = t.data();
  for (int64_t i = 0; i < out.size(); ++i) {
    out.voxels[static_cast<size_t>(i)] = src[i] != 0.0f ? 1 : 0;
  }
  return out;
}

}  // namespace volseg
