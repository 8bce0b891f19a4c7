#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "volseg/nn_ops.hpp"
#include "volseg/tensor.hpp"

// Encoder-decoder segmentation network over whole volumes. Five left
// (compression) stages connected by stride-2 downsampling convs, four right
// (decompression) stages connected by transposed convs, skip forwarding by
// channel concatenation, and a residual connection around every stage's conv
// chain. All stage convs are 5x5x5 with padding 2; the classifier head is a
// 1x1x1 conv to two channels.

namespace volseg {

struct VNetConfig {
  int64_t in_channels = 4;
  int64_t base_channels = 16;
  int64_t num_classes = 2;
  int64_t input_extent = 128;  // must be divisible by 16 (four halvings)

  void validate() const;
  bool operator==(const VNetConfig&) const = default;
};

// Conv chain lengths per stage. The left counts run stage 1..5, the right
// counts run stage 4..1 (decoder order). These exact counts are what make the
// receptive-field table come out right; the test suite re-derives them by
// exhaustive search.
inline constexpr std::array<int, 5> kLeftConvCounts{1, 2, 3, 3, 3};
inline constexpr std::array<int, 4> kRightConvCounts{3, 3, 2, 1};

struct StageSpec {
  enum class Side { Left, Right, Output };
  Side side = Side::Left;
  int index = 1;
  int conv_count = 1;
  int64_t channels = 0;  // feature maps the stage's convs carry
};

std::vector<StageSpec> standard_stages(const VNetConfig& config);

struct VNetStage {
  std::vector<ConvLayerParams> convs;
  std::vector<PReLUParams> acts;  // one PReLU after each conv
};

// One recorded op of a forward pass. Values are indices into Tape::values;
// conv_id / prelu_id index the flat enumeration from conv_layers() /
// prelu_layers(), so a tape stays valid across model moves.
struct TapeEntry {
  enum class Op { Conv, TConv, PReLU, Add, Concat, Tile };
  Op op = Op::Conv;
  int a = -1;
  int b = -1;
  int out = -1;
  int conv_id = -1;
  int prelu_id = -1;
};

struct Tape {
  std::vector<Tensor> values;
  std::vector<TapeEntry> entries;
};

struct VNetModel {
  VNetConfig config;
  std::vector<VNetStage> left;           // 5 stages
  std::vector<ConvLayerParams> down;     // transitions after left 1..4
  std::vector<PReLUParams> down_acts;
  std::vector<ConvLayerParams> up;       // transitions into right 4..1
  std::vector<PReLUParams> up_acts;
  std::vector<VNetStage> right;          // [0] = right stage 4 ... [3] = right stage 1
  ConvLayerParams output_conv;
  std::shared_ptr<Tape> tape;            // set by forward(record_tape = true)
};

// Deterministic initialization: the same (config, seed) yields bitwise
// identical parameters.
VNetModel build_model(const VNetConfig& config, uint64_t seed);

// Runs the network on one (in_channels, E, E, E) volume and returns
// (num_classes, E, E, E) logits. record_tape keeps every intermediate for
// backward(); without it, intermediates are freed as soon as possible and any
// previous tape is dropped.
Tensor forward(VNetModel& m, const Tensor& input, bool record_tape = false);

// Walks the recorded tape in reverse, accumulating into every layer's grad
// buffers, and returns the gradient w.r.t. the network input. Requires a
// preceding forward(..., true).
Tensor backward(VNetModel& m, const Tensor& upstream);

// Flat layer enumerations in a fixed, documented order (left stage convs,
// down transitions, up transitions, right stage convs, output conv; acts in
// the same stage order). Checkpoints and tapes rely on this order.
std::vector<ConvLayerParams*> conv_layers(VNetModel& m);
std::vector<PReLUParams*> prelu_layers(VNetModel& m);

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

// Every learnable tensor with its grad buffer, in a stable order with stable
// names like "left3.conv1.weight" or "up4.act.slope".
std::vector<ParamRef> model_parameters(VNetModel& m);

int64_t count_parameters(const VNetModel& m);
void zero_grads(VNetModel& m);

// Receptive-field bookkeeping. Each k-kernel stride-s conv grows the field by
// (k-1)*jump and then multiplies the jump by s; a transposed 2x2x2 stride-2
// conv halves the jump first and then grows the field by the new jump.
struct RfRow {
  std::string stage;
  int64_t input_size = 0;
  int64_t receptive_field = 0;
};

std::vector<RfRow> receptive_field_table(const VNetConfig& config);

// The ten per-stage receptive fields (left 1..5, right 4..1, output) for
// arbitrary conv counts; lets tests search the count space.
std::array<int64_t, 10> receptive_fields_for_counts(
    const std::array<int, 5>& left_counts,
    const std::array<int, 4>& right_counts);

// Channel utilities used by the residual and skip paths.
Tensor tile_channels(const Tensor& x, int64_t target_channels);  // out[c] = x[c % C]
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Test hooks: run a single stage's conv chain plus residual add outside the
// full network (stage_index is 1-based; right stages expect the concatenated
// channel count).
Tensor run_left_stage(VNetModel& m, int stage_index, const Tensor& x);
Tensor run_right_stage(VNetModel& m, int stage_index, const Tensor& x);

}  // namespace volseg
