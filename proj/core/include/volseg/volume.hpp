#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "volseg/tensor.hpp"

namespace volseg {

/// MRI acquisition contrast of a channel; Label marks a segmentation map
/// routed through the same container.
enum class Modality { T1, T1c, T2, Flair, Label, Other };

const char* modality_name(Modality m);
std::optional<Modality> modality_from_name(std::string_view name);

// A multi-channel volume: data is (channels, depth, height, width) and
// spacing is the physical voxel size in mm, in (x, y, z) file-axis order,
// i.e. spacing[0] belongs to the width axis and spacing[2] to depth.
struct VolumeImage {
  Tensor data;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::vector<Modality> modalities;

  int64_t channels() const { return data.shape().extent(0); }
  int64_t depth() const { return data.shape().extent(1); }
  int64_t height() const { return data.shape().extent(2); }
  int64_t width() const { return data.shape().extent(3); }

  /// Enforce the container invariants: rank-4 data, one modality tag per
  /// channel, strictly positive spacing.
  void validate() const;
};

/// Binary segmentation volume, (depth, height, width); 0 = background,
/// 1 = foreground.
struct LabelMap {
  Shape shape;
  std::vector<uint8_t> voxels;

  static LabelMap zeros(const Shape& shape);

  int64_t size() const { return static_cast<int64_t>(voxels.size()); }
  void validate() const;
};

/// One-channel float view of a label map (values 0.0 / 1.0).
Tensor label_to_tensor(const LabelMap& label);

/// Inverse of label_to_tensor: nonzero voxels become foreground. Accepts a
/// (D,H,W) or (1,D,H,W) tensor.
LabelMap label_from_tensor(const Tensor& t);

}  // namespace volseg
