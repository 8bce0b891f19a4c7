#include "volseg/image_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "volseg/errors.hpp"

namespace volseg {

namespace {

constexpr double kSpacingTolerance = 1e-6;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(static_cast<size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw IoError("failed reading " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path,
                const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

// Little-endian scalar accessors; the formats are LE by contract.
void put_u16(std::vector<unsigned char>& b, size_t off, uint16_t v) {
  b[off] = static_cast<unsigned char>(v & 0xff);
  b[off + 1] = static_cast<unsigned char>(v >> 8);
}

void put_u32(std::vector<unsigned char>& b, size_t off, uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    b[off + static_cast<size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
  }
}

void put_f32(std::vector<unsigned char>& b, size_t off, float v) {
  put_u32(b, off, std::bit_cast<uint32_t>(v));
}

uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) |
         (static_cast<uint32_t>(p[3]) << 24);
}

float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

// Shortest round-trip decimal form, e.g. "1" and "0.5".
std::string format_float(float v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

int64_t parse_int(std::string_view s, const std::string& key) {
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("mha: " + key + " has non-integer value '" +
                      std::string(s) + "'");
  }
  return v;
}

float parse_float(std::string_view s, const std::string& key) {
  float v = 0.0f;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("mha: " + key + " has non-numeric value '" +
                      std::string(s) + "'");
  }
  return v;
}

float decode_voxel(ScalarType t, const unsigned char* p) {
  switch (t) {
    case ScalarType::Uint8:
      return static_cast<float>(*p);
    case ScalarType::Int16:
      return static_cast<float>(static_cast<int16_t>(get_u16(p)));
    case ScalarType::Float32:
      return get_f32(p);
  }
  return 0.0f;
}

void encode_voxel(ScalarType t, float v, unsigned char* p) {
  switch (t) {
    case ScalarType::Uint8: {
      long r = std::lrintf(std::clamp(v, 0.0f, 255.0f));
      *p = static_cast<unsigned char>(r);
      return;
    }
    case ScalarType::Int16: {
      long r = std::lrintf(std::clamp(v, -32768.0f, 32767.0f));
      auto u = static_cast<uint16_t>(static_cast<int16_t>(r));
      p[0] = static_cast<unsigned char>(u & 0xff);
      p[1] = static_cast<unsigned char>(u >> 8);
      return;
    }
    case ScalarType::Float32: {
      uint32_t bits = std::bit_cast<uint32_t>(v);
      for (int i = 0; i < 4; ++i) {
        p[static_cast<size_t>(i)] = static_cast<unsigned char>(bits >> (8 * i));
      }
      return;
    }
  }
}

Modality modality_for_dtype(ScalarType t) {
  return t == ScalarType::Uint8 ? Modality::Label : Modality::Other;
}

void require_single_channel(const VolumeImage& v, const char* op) {
  v.validate();
  if (v.channels() != 1) {
    throw ShapeError(std::string(op) + ": one channel per file, got " +
                     std::to_string(v.channels()));
  }
}

std::vector<unsigned char> encode_payload(const VolumeImage& v, ScalarType t) {
  const int64_t n = v.data.shape().elements();
  std::vector<unsigned char> bytes(static_cast<size_t>(n) *
                                   static_cast<size_t>(scalar_size(t)));
  const float* src = v.data.data();
  unsigned char* dst = bytes.data();
  const int step = scalar_size(t);
  for (int64_t i = 0; i < n; ++i, dst += step) {
    encode_voxel(t, src[i], dst);
  }
  return bytes;
}

VolumeImage decode_payload(const unsigned char* payload, ScalarType t,
                           const std::array<int64_t, 3>& dim_size,
                           const std::array<float, 3>& spacing) {
  // File voxels run x fastest; the tensor is (1, z, y, x) with x fastest,
  // so the flat orders coincide.
  Tensor data(Shape{1, dim_size[2], dim_size[1], dim_size[0]});
  float* dst = data.mutable_data();
  const int64_t n = data.shape().elements();
  const int step = scalar_size(t);
  for (int64_t i = 0; i < n; ++i) {
    dst[i] = decode_voxel(t, payload + i * step);
  }
  VolumeImage out;
  out.data = std::move(data);
  out.spacing = spacing;
  out.modalities = {modality_for_dtype(t)};
  return out;
}

}  // namespace

int scalar_size(ScalarType t) {
  switch (t) {
    case ScalarType::Uint8: return 1;
    case ScalarType::Int16: return 2;
    case ScalarType::Float32: return 4;
  }
  return 0;
}

const char* scalar_type_name(ScalarType t) {
  switch (t) {
    case ScalarType::Uint8: return "uint8";
    case ScalarType::Int16: return "int16";
    case ScalarType::Float32: return "float32";
  }
  return "unknown";
}

VolumeImage read_mha(const std::filesystem::path& path, MetaImageHeader* header) {
  const std::vector<unsigned char> bytes = read_file(path);
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());

  MetaImageHeader h;
  bool saw_ndims = false, saw_dims = false, saw_type = false, saw_data = false;
  size_t payload_offset = 0;

  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    if (line.empty()) continue;

    size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw FormatError("mha: header line without '=': '" + std::string(line) +
                        "'");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string_view value = trim(line.substr(eq + 1));

    if (key == "ObjectType") {
      if (value != "Image") throw FormatError("mha: ObjectType must be Image");
    } else if (key == "NDims") {
      int64_t n = parse_int(value, key);
      if (n != 3) {
        throw FormatError("mha: NDims = " + std::to_string(n) +
                          " (only 3-D volumes supported)");
      }
      h.ndims = 3;
      saw_ndims = true;
    } else if (key == "DimSize") {
      auto parts = split_ws(value);
      if (parts.size() != 3) {
        throw FormatError("mha: DimSize needs 3 extents, got " +
                          std::to_string(parts.size()));
      }
      for (int i = 0; i < 3; ++i) {
        int64_t d = parse_int(parts[static_cast<size_t>(i)], key);
        if (d <= 0) throw FormatError("mha: DimSize entries must be positive");
        h.dim_size[static_cast<size_t>(i)] = d;
      }
      saw_dims = true;
    } else if (key == "ElementSpacing") {
      auto parts = split_ws(value);
      if (parts.size() != 3) {
        throw FormatError("mha: ElementSpacing needs 3 entries, got " +
                          std::to_string(parts.size()));
      }
      for (int i = 0; i < 3; ++i) {
        float s = parse_float(parts[static_cast<size_t>(i)], key);
        if (!(s > 0.0f)) {
          throw FormatError("mha: ElementSpacing entries must be > 0");
        }
        h.element_spacing[static_cast<size_t>(i)] = s;
      }
    } else if (key == "ElementType") {
      if (value == "MET_UCHAR") {
        h.element_type = ScalarType::Uint8;
      } else if (value == "MET_SHORT") {
        h.element_type = ScalarType::Int16;
      } else if (value == "MET_FLOAT") {
        h.element_type = ScalarType::Float32;
      } else {
        throw FormatError("mha: unknown ElementType '" + std::string(value) +
                          "'");
      }
      saw_type = true;
    } else if (key == "ElementDataFile") {
      h.data_file = std::string(value);
      if (value != "LOCAL") {
        throw FormatError(
            "mha: ElementDataFile must be LOCAL (external .raw payloads are "
            "not supported)");
      }
      saw_data = true;
      payload_offset = pos;
      break;
    } else if (key == "BinaryData") {
      if (value != "True") throw FormatError("mha: BinaryData must be True");
    } else if (key == "BinaryDataByteOrderMSB" || key == "ElementByteOrderMSB") {
      if (value != "False") {
        throw FormatError("mha: " + key + " must be False (little-endian only)");
      }
    } else if (key == "CompressedData") {
      if (value != "False") {
        throw FormatError("mha: CompressedData must be False");
      }
    }
    // Other keys (TransformMatrix, Offset, ...) are ignored.
  }

  if (!saw_data) throw FormatError("mha: missing ElementDataFile line");
  if (!saw_ndims) throw FormatError("mha: missing NDims");
  if (!saw_dims) throw FormatError("mha: missing DimSize");
  if (!saw_type) throw FormatError("mha: missing ElementType");

  const int64_t voxels = h.dim_size[0] * h.dim_size[1] * h.dim_size[2];
  const int64_t expected = voxels * scalar_size(h.element_type);
  const int64_t actual = static_cast<int64_t>(bytes.size() - payload_offset);
  if (actual < expected) {
    throw FormatError("mha: truncated payload, header implies " +
                      std::to_string(expected) + " bytes but file holds " +
                      std::to_string(actual));
  }
  if (actual > expected) {
    throw FormatError("mha: payload holds " + std::to_string(actual) +
                      " bytes, header implies " + std::to_string(expected));
  }

  if (header) *header = h;
  return decode_payload(bytes.data() + payload_offset, h.element_type,
                        h.dim_size, h.element_spacing);
}

void write_mha(const VolumeImage& v, const std::filesystem::path& path,
               ScalarType element_type) {
  require_single_channel(v, "write_mha");

  std::ostringstream head;
  head << "ObjectType = Image\n"
       << "NDims = 3\n"
       << "BinaryData = True\n"
       << "BinaryDataByteOrderMSB = False\n"
       << "CompressedData = False\n"
       << "DimSize = " << v.width() << ' ' << v.height() << ' ' << v.depth()
       << '\n'
       << "ElementSpacing = " << format_float(v.spacing[0]) << ' '
       << format_float(v.spacing[1]) << ' ' << format_float(v.spacing[2])
       << '\n';
  switch (element_type) {
    case ScalarType::Uint8: head << "ElementType = MET_UCHAR\n"; break;
    case ScalarType::Int16: head << "ElementType = MET_SHORT\n"; break;
    case ScalarType::Float32: head << "ElementType = MET_FLOAT\n"; break;
  }
  head << "ElementDataFile = LOCAL\n";

  const std::string header = head.str();
  std::vector<unsigned char> payload = encode_payload(v, element_type);
  std::vector<unsigned char> bytes;
  bytes.reserve(header.size() + payload.size());
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  write_file(path, bytes);
}

void write_mha(const VolumeImage& v, const std::filesystem::path& path) {
  const bool label = !v.modalities.empty() && v.modalities[0] == Modality::Label;
  write_mha(v, path, label ? ScalarType::Uint8 : ScalarType::Float32);
}

VolumeImage read_nifti(const std::filesystem::path& path, NiftiHeader* header) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 352) {
    throw FormatError("nifti: file is " + std::to_string(bytes.size()) +
                      " bytes, smaller than the 352-byte header block");
  }
  const unsigned char* b = bytes.data();

  if (get_u32(b) != 348) {
    throw FormatError("nifti: sizeof_hdr = " + std::to_string(get_u32(b)) +
                      ", expected 348");
  }
  if (!(b[344] == 'n' && b[345] == '+' && b[346] == '1' && b[347] == '\0')) {
    throw FormatError("nifti: bad magic, expected \"n+1\"");
  }

  NiftiHeader h;
  for (int i = 0; i < 8; ++i) {
    h.dim[static_cast<size_t>(i)] =
        static_cast<int16_t>(get_u16(b + 40 + 2 * i));
    h.pixdim[static_cast<size_t>(i)] = get_f32(b + 76 + 4 * i);
  }
  h.datatype = static_cast<int16_t>(get_u16(b + 70));
  h.bitpix = static_cast<int16_t>(get_u16(b + 72));
  h.vox_offset = get_f32(b + 108);

  ScalarType dtype;
  if (h.datatype == 2) {
    dtype = ScalarType::Uint8;
  } else if (h.datatype == 16) {
    dtype = ScalarType::Float32;
  } else {
    throw FormatError("nifti: unsupported datatype " +
                      std::to_string(h.datatype) +
                      " (supported: 2 = uint8, 16 = float32)");
  }
  if (h.bitpix != 8 * scalar_size(dtype)) {
    throw FormatError("nifti: bitpix " + std::to_string(h.bitpix) +
                      " inconsistent with datatype " +
                      std::to_string(h.datatype));
  }
  if (h.dim[0] != 3) {
    throw FormatError("nifti: dim[0] = " + std::to_string(h.dim[0]) +
                      ", only 3-D volumes supported");
  }
  std::array<int64_t, 3> dims{};
  std::array<float, 3> spacing{};
  for (int i = 0; i < 3; ++i) {
    int16_t d = h.dim[static_cast<size_t>(i + 1)];
    if (d <= 0) throw FormatError("nifti: nonpositive dim entry");
    dims[static_cast<size_t>(i)] = d;
    float s = h.pixdim[static_cast<size_t>(i + 1)];
    spacing[static_cast<size_t>(i)] = s > 0.0f ? s : 1.0f;
  }

  const auto offset = static_cast<int64_t>(std::llround(h.vox_offset));
  if (offset < 352 || static_cast<size_t>(offset) > bytes.size()) {
    throw FormatError("nifti: vox_offset " + std::to_string(offset) +
                      " out of range");
  }
  const int64_t voxels = dims[0] * dims[1] * dims[2];
  const int64_t expected = voxels * scalar_size(dtype);
  const int64_t actual = static_cast<int64_t>(bytes.size()) - offset;
  if (actual < expected) {
    throw FormatError("nifti: truncated payload, expected " +
                      std::to_string(expected) + " bytes after vox_offset, got " +
                      std::to_string(actual));
  }

  if (header) *header = h;
  return decode_payload(b + offset, dtype, dims, spacing);
}

void write_nifti(const VolumeImage& v, const std::filesystem::path& path) {
  require_single_channel(v, "write_nifti");
  const bool label = v.modalities[0] == Modality::Label;
  const ScalarType dtype = label ? ScalarType::Uint8 : ScalarType::Float32;

  std::vector<unsigned char> bytes(352, 0);
  put_u32(bytes, 0, 348);
  put_u16(bytes, 40, 3);  // dim[0]
  put_u16(bytes, 42, static_cast<uint16_t>(v.width()));
  put_u16(bytes, 44, static_cast<uint16_t>(v.height()));
  put_u16(bytes, 46, static_cast<uint16_t>(v.depth()));
  for (size_t i = 48; i < 56; i += 2) put_u16(bytes, i, 1);  // dim[4..7]
  put_u16(bytes, 70, label ? 2 : 16);
  put_u16(bytes, 72, static_cast<uint16_t>(8 * scalar_size(dtype)));
  put_f32(bytes, 80, v.spacing[0]);
  put_f32(bytes, 84, v.spacing[1]);
  put_f32(bytes, 88, v.spacing[2]);
  put_f32(bytes, 108, 352.0f);
  bytes[344] = 'n';
  bytes[345] = '+';
  bytes[346] = '1';
  bytes[347] = '\0';
  // Bytes 348..351 stay zero: no header extensions.

  if (v.width() > 32767 || v.height() > 32767 || v.depth() > 32767) {
    throw ShapeError("write_nifti: extents exceed the int16 dim fields");
  }

  std::vector<unsigned char> payload = encode_payload(v, dtype);
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  write_file(path, bytes);
}

ConvertSummary convert_mha_to_nifti(const std::filesystem::path& in_path,
                                    const std::filesystem::path& out_path) {
  MetaImageHeader h;
  VolumeImage v = read_mha(in_path, &h);
  write_nifti(v, out_path);
  ConvertSummary s;
  s.voxels = v.data.shape().elements();
  s.dtype = h.element_type;
  s.spacing = h.element_spacing;
  return s;
}

std::vector<std::string> list_case_ids(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) {
    throw IoError("dataset root " + root.string() + " is not a directory");
  }
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory()) ids.push_back(entry.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

SegmentationCase read_case(const std::filesystem::path& case_dir) {
  static constexpr Modality kOrder[] = {Modality::T1, Modality::T1c,
                                        Modality::T2, Modality::Flair};
  SegmentationCase out;
  out.id = case_dir.filename().string();

  std::vector<VolumeImage> channels;
  std::vector<Modality> tags;
  for (Modality m : kOrder) {
    const auto path = case_dir / (std::string(modality_name(m)) + ".nii");
    if (!std::filesystem::exists(path)) continue;
    channels.push_back(read_nifti(path));
    tags.push_back(m);
  }
  if (channels.empty()) {
    throw IoError("case " + out.id + ": no modality files (t1/t1c/t2/flair) in " +
                  case_dir.string());
  }

  const Shape& first = channels[0].data.shape();
  for (size_t c = 1; c < channels.size(); ++c) {
    if (channels[c].data.shape() != first) {
      throw ShapeError("case " + out.id + ": modality extents differ, " +
                       first.str() + " vs " + channels[c].data.shape().str());
    }
    for (int i = 0; i < 3; ++i) {
      if (std::abs(static_cast<double>(channels[c].spacing[static_cast<size_t>(i)]) -
                   channels[0].spacing[static_cast<size_t>(i)]) > kSpacingTolerance) {
        throw ShapeError("case " + out.id + ": modality spacings differ");
      }
    }
  }

  const int64_t voxels = first.elements();
  Tensor stacked(Shape{static_cast<int64_t>(channels.size()), first.extent(1),
                       first.extent(2), first.extent(3)});
  float* dst = stacked.mutable_data();
  for (size_t c = 0; c < channels.size(); ++c) {
    std::memcpy(dst + static_cast<int64_t>(c) * voxels, channels[c].data.data(),
                static_cast<size_t>(voxels) * sizeof(float));
  }
  out.image.data = std::move(stacked);
  out.image.spacing = channels[0].spacing;
  out.image.modalities = std::move(tags);
  out.image.validate();

  const auto seg_path = case_dir / "seg.nii";
  if (std::filesystem::exists(seg_path)) {
    VolumeImage seg = read_nifti(seg_path);
    if (Shape{seg.depth(), seg.height(), seg.width()} !=
        Shape{out.image.depth(), out.image.height(), out.image.width()}) {
      throw ShapeError("case " + out.id + ": seg extents differ from image");
    }
    out.label = label_from_tensor(seg.data);
  }
  return out;
}

std::vector<SegmentationCase> read_dataset(const std::filesystem::path& root) {
  std::vector<SegmentationCase> cases;
  for (const std::string& id : list_case_ids(root)) {
    cases.push_back(read_case(root / id));
  }
  if (cases.empty()) {
    throw IoError("dataset root " + root.string() + " contains no case folders");
  }
  return cases;
}

void write_case(const std::filesystem::path& case_dir, const VolumeImage& image,
                const LabelMap* label) {
  image.validate();
  std::filesystem::create_directories(case_dir);

  const int64_t voxels = image.depth() * image.height() * image.width();
  for (int64_t c = 0; c < image.channels(); ++c) {
    VolumeImage channel;
    Tensor t(Shape{1, image.depth(), image.height(), image.width()});
    std::memcpy(t.mutable_data(), image.data.data() + c * voxels,
                static_cast<size_t>(voxels) * sizeof(float));
    channel.data = std::move(t);
    channel.spacing = image.spacing;
    channel.modalities = {image.modalities[static_cast<size_t>(c)]};
    const auto name =
        std::string(modality_name(image.modalities[static_cast<size_t>(c)])) +
        ".nii";
    write_nifti(channel, case_dir / name);
  }

  if (label) {
    label->validate();
    VolumeImage seg;
    Tensor t = label_to_tensor(*label);
    seg.data = t.reshaped(Shape{1, label->shape.extent(0),
                                label->shape.extent(1), label->shape.extent(2)});
    seg.spacing = image.spacing;
    seg.modalities = {Modality::Label};
    write_nifti(seg, case_dir / "seg.nii");
  }
}

}  // namespace volseg
