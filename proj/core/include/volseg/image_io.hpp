#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "volseg/volume.hpp"

// Uncompressed, single-file volume formats only: MetaImage (.mha with LOCAL
// payload) and a minimal NIfTI-1 (.nii) subset. No .gz, no .mhd+raw pairs,
// no DICOM. NIfTI orientation/affine fields are written as zeros and ignored
// on read; spacing travels through pixdim only.

namespace volseg {

enum class ScalarType { Uint8, Int16, Float32 };

int scalar_size(ScalarType t);
const char* scalar_type_name(ScalarType t);

// Parsed .mha header. dim_size and element_spacing are in file axis order
// (x fastest), matching the DimSize / ElementSpacing lines.
struct MetaImageHeader {
  int ndims = 3;
  std::array<int64_t, 3> dim_size{0, 0, 0};
  ScalarType element_type = ScalarType::Float32;
  std::array<float, 3> element_spacing{1.0f, 1.0f, 1.0f};
  std::string data_file = "LOCAL";
};

// The NIfTI-1 fields this subset reads and writes. Everything else in the
// 348-byte header is zero.
struct NiftiHeader {
  std::array<int16_t, 8> dim{};
  int16_t datatype = 16;  // 2 = uint8, 16 = float32
  int16_t bitpix = 32;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.0f;
  std::array<char, 4> magic{'n', '+', '1', '\0'};
};

// Readers produce a single-channel (1, D, H, W) float tensor; file voxels are
// x-fastest, which maps straight onto the tensor's W-fastest layout. uint8
// files are tagged Label, everything else Other; callers retag as needed.
// If header is non-null it receives the parsed header.
VolumeImage read_mha(const std::filesystem::path& path,
                     MetaImageHeader* header = nullptr);

// Writes a single-channel volume. element_type controls the payload encoding;
// the overload without it picks uint8 for Label volumes and float32 otherwise.
void write_mha(const VolumeImage& v, const std::filesystem::path& path,
               ScalarType element_type);
void write_mha(const VolumeImage& v, const std::filesystem::path& path);

VolumeImage read_nifti(const std::filesystem::path& path,
                       NiftiHeader* header = nullptr);
void write_nifti(const VolumeImage& v, const std::filesystem::path& path);

struct ConvertSummary {
  int64_t voxels = 0;
  ScalarType dtype = ScalarType::Float32;  // source element type
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
};

// .mha -> .nii. uint8 sources stay uint8; int16 and float sources become
// float32 (NIfTI int16 is outside this subset; int16 values are exact in
// float). Read-back of the output equals the read_mha result.
ConvertSummary convert_mha_to_nifti(const std::filesystem::path& in_path,
                                    const std::filesystem::path& out_path);

// Dataset layout on disk: <root>/<case_id>/{t1,t1c,t2,flair,seg}.nii.
// Modality files are optional per case (a 2-modality dataset just has fewer
// files); channel order follows the canonical list above. seg.nii is optional
// so inference inputs work too.
struct SegmentationCase {
  std::string id;
  VolumeImage image;
  std::optional<LabelMap> label;
};

std::vector<std::string> list_case_ids(const std::filesystem::path& root);
SegmentationCase read_case(const std::filesystem::path& case_dir);
std::vector<SegmentationCase> read_dataset(const std::filesystem::path& root);

// Writes one channel per modality file plus seg.nii when label is non-null.
void write_case(const std::filesystem::path& case_dir, const VolumeImage& image,
                const LabelMap* label);

}  // namespace volseg
