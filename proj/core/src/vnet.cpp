#include "volseg/vnet.hpp"

#include <algorithm>
#include <cstring>

#include "volseg/errors.hpp"

namespace volseg {

namespace {

int64_t stage_width(const VNetConfig& c, int stage) {
  return c.base_channels << (stage - 1);
}

int64_t spatial_elements(const Tensor& t) {
  return t.shape().elements() / t.shape().extent(0);
}

// Flat layer-id bases matching the conv_layers()/prelu_layers() order.
struct LayerIds {
  std::array<int, 5> left_conv_base{};
  std::array<int, 5> left_act_base{};
  int down_conv_base = 0, down_act_base = 0;
  int up_conv_base = 0, up_act_base = 0;
  std::array<int, 4> right_conv_base{};
  std::array<int, 4> right_act_base{};
  int output_conv = 0;

  explicit LayerIds(const VNetModel& m) {
    int c = 0, a = 0;
    for (int i = 0; i < 5; ++i) {
      left_conv_base[static_cast<size_t>(i)] = c;
      left_act_base[static_cast<size_t>(i)] = a;
      c += static_cast<int>(m.left[static_cast<size_t>(i)].convs.size());
      a += static_cast<int>(m.left[static_cast<size_t>(i)].acts.size());
    }
    down_conv_base = c;
    down_act_base = a;
    c += static_cast<int>(m.down.size());
    a += static_cast<int>(m.down_acts.size());
    up_conv_base = c;
    up_act_base = a;
    c += static_cast<int>(m.up.size());
    a += static_cast<int>(m.up_acts.size());
    for (int i = 0; i < 4; ++i) {
      right_conv_base[static_cast<size_t>(i)] = c;
      right_act_base[static_cast<size_t>(i)] = a;
      c += static_cast<int>(m.right[static_cast<size_t>(i)].convs.size());
      a += static_cast<int>(m.right[static_cast<size_t>(i)].acts.size());
    }
    output_conv = c;
  }
};

// Executes ops, assigns value ids, and optionally records tape entries. When
// not recording, release() frees intermediates immediately so inference never
// holds the whole activation graph.
struct Exec {
  std::vector<ConvLayerParams*> convs;
  std::vector<PReLUParams*> prelus;
  bool record = false;
  std::vector<Tensor> values;
  std::vector<TapeEntry> entries;

  int push_input(const Tensor& x) {
    values.push_back(x);
    return 0;
  }

  int emit(Tensor t, TapeEntry e) {
    values.push_back(std::move(t));
    e.out = static_cast<int>(values.size()) - 1;
    if (record) entries.push_back(e);
    return e.out;
  }

  int conv(int x, int id) {
    TapeEntry e;
    e.op = TapeEntry::Op::Conv;
    e.a = x;
    e.conv_id = id;
    return emit(conv3d(values[static_cast<size_t>(x)], *convs[static_cast<size_t>(id)]), e);
  }

  int tconv(int x, int id) {
    TapeEntry e;
    e.op = TapeEntry::Op::TConv;
    e.a = x;
    e.conv_id = id;
    return emit(
        transposed_conv3d(values[static_cast<size_t>(x)], *convs[static_cast<size_t>(id)]),
        e);
  }

  int act(int x, int id) {
    TapeEntry e;
    e.op = TapeEntry::Op::PReLU;
    e.a = x;
    e.prelu_id = id;
    return emit(prelu(values[static_cast<size_t>(x)], *prelus[static_cast<size_t>(id)]), e);
  }

  int add2(int a, int b) {
    TapeEntry e;
    e.op = TapeEntry::Op::Add;
    e.a = a;
    e.b = b;
    return emit(
        add(values[static_cast<size_t>(a)], values[static_cast<size_t>(b)]), e);
  }

  int concat(int a, int b) {
    TapeEntry e;
    e.op = TapeEntry::Op::Concat;
    e.a = a;
    e.b = b;
    return emit(concat_channels(values[static_cast<size_t>(a)],
                                values[static_cast<size_t>(b)]),
                e);
  }

  int tile(int x, int64_t to_channels) {
    TapeEntry e;
    e.op = TapeEntry::Op::Tile;
    e.a = x;
    return emit(tile_channels(values[static_cast<size_t>(x)], to_channels), e);
  }

  void release(int id) {
    if (!record) values[static_cast<size_t>(id)] = Tensor();
  }
};

void add_grad(std::vector<Tensor>& grads, int id, const Tensor& g) {
  Tensor& slot = grads[static_cast<size_t>(id)];
  slot = slot.empty() ? g : add(slot, g);
}

}  // namespace

void VNetConfig::validate() const {
  if (in_channels < 1) {
    throw ConfigError("in_channels must be >= 1, got " +
                      std::to_string(in_channels));
  }
  if (base_channels < 1) {
    throw ConfigError("base_channels must be >= 1, got " +
                      std::to_string(base_channels));
  }
  if (num_classes != 2) {
    throw ConfigError("only two-class segmentation is supported, got " +
                      std::to_string(num_classes) + " classes");
  }
  // Four stride-2 halvings must land on integer extents at every stage, so
  // the extent has to be a clean power of two no smaller than 16.
  const bool pow2 = input_extent > 0 &&
                    (input_extent & (input_extent - 1)) == 0;
  if (!pow2 || input_extent < 16) {
    throw ConfigError("input_extent " + std::to_string(input_extent) +
                      " must be a power of two >= 16 (four halvings)");
  }
}

std::vector<StageSpec> standard_stages(const VNetConfig& config) {
  config.validate();
  std::vector<StageSpec> stages;
  for (int i = 1; i <= 5; ++i) {
    stages.push_back({StageSpec::Side::Left, i,
                      kLeftConvCounts[static_cast<size_t>(i - 1)],
                      stage_width(config, i)});
  }
  for (int idx = 0; idx < 4; ++idx) {
    const int j = 4 - idx;
    stages.push_back({StageSpec::Side::Right, j,
                      kRightConvCounts[static_cast<size_t>(idx)],
                      2 * stage_width(config, j)});
  }
  stages.push_back({StageSpec::Side::Output, 1, 1, config.num_classes});
  return stages;
}

VNetModel build_model(const VNetConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  VNetModel m;
  m.config = config;

  m.left.resize(5);
  for (int i = 1; i <= 5; ++i) {
    VNetStage& st = m.left[static_cast<size_t>(i - 1)];
    const int64_t w = stage_width(config, i);
    int64_t in_ch = (i == 1) ? config.in_channels : w;
    for (int c = 0; c < kLeftConvCounts[static_cast<size_t>(i - 1)]; ++c) {
      st.convs.push_back(ConvLayerParams::create(w, in_ch, 5, 1, rng));
      st.acts.push_back(PReLUParams::create(w));
      in_ch = w;
    }
  }

  for (int i = 1; i <= 4; ++i) {
    m.down.push_back(ConvLayerParams::create(stage_width(config, i + 1),
                                             stage_width(config, i), 2, 2, rng));
    m.down_acts.push_back(PReLUParams::create(stage_width(config, i + 1)));
  }

  for (int idx = 0; idx < 4; ++idx) {
    const int j = 4 - idx;
    const int64_t in_ch = (idx == 0) ? stage_width(config, 5)
                                     : 2 * stage_width(config, j + 1);
    m.up.push_back(ConvLayerParams::create(stage_width(config, j), in_ch, 2, 2, rng));
    m.up_acts.push_back(PReLUParams::create(stage_width(config, j)));
  }

  m.right.resize(4);
  for (int idx = 0; idx < 4; ++idx) {
    const int j = 4 - idx;
    const int64_t w = 2 * stage_width(config, j);
    VNetStage& st = m.right[static_cast<size_t>(idx)];
    for (int c = 0; c < kRightConvCounts[static_cast<size_t>(idx)]; ++c) {
      st.convs.push_back(ConvLayerParams::create(w, w, 5, 1, rng));
      st.acts.push_back(PReLUParams::create(w));
    }
  }

  m.output_conv = ConvLayerParams::create(config.num_classes,
                                          2 * stage_width(config, 1), 1, 1, rng);
  return m;
}

Tensor forward(VNetModel& m, const Tensor& input, bool record_tape) {
  m.config.validate();
  const int64_t E = m.config.input_extent;
  const Shape want{m.config.in_channels, E, E, E};
  if (input.shape() != want) {
    throw ShapeError("forward: input shape " + input.shape().str() +
                     " does not match configured " + want.str());
  }

  const LayerIds ids(m);
  Exec ex;
  ex.convs = conv_layers(m);
  ex.prelus = prelu_layers(m);
  ex.record = record_tape;

  const int x0 = ex.push_input(input);
  std::array<int, 5> skips{};
  int cur = x0;
  for (int i = 0; i < 5; ++i) {
    int chain = cur;
    const auto nconv = static_cast<int>(m.left[static_cast<size_t>(i)].convs.size());
    for (int c = 0; c < nconv; ++c) {
      const int t = ex.conv(chain, ids.left_conv_base[static_cast<size_t>(i)] + c);
      const int u = ex.act(t, ids.left_act_base[static_cast<size_t>(i)] + c);
      if (chain != cur) ex.release(chain);
      ex.release(t);
      chain = u;
    }
    int res = cur;
    const int64_t want_ch =
        ex.values[static_cast<size_t>(chain)].shape().extent(0);
    if (ex.values[static_cast<size_t>(cur)].shape().extent(0) != want_ch) {
      res = ex.tile(cur, want_ch);
    }
    const int sum = ex.add2(res, chain);
    if (res != cur) ex.release(res);
    ex.release(chain);
    ex.release(cur);
    skips[static_cast<size_t>(i)] = sum;
    if (i < 4) {
      const int d = ex.conv(sum, ids.down_conv_base + i);
      cur = ex.act(d, ids.down_act_base + i);
      ex.release(d);
    }
  }

  int curv = skips[4];
  for (int idx = 0; idx < 4; ++idx) {
    const int t = ex.tconv(curv, ids.up_conv_base + idx);
    const int u = ex.act(t, ids.up_act_base + idx);
    ex.release(t);
    ex.release(curv);
    const int skip = skips[static_cast<size_t>(3 - idx)];
    const int cat = ex.concat(u, skip);
    ex.release(u);
    ex.release(skip);

    int chain = cat;
    const auto nconv = static_cast<int>(m.right[static_cast<size_t>(idx)].convs.size());
    for (int c = 0; c < nconv; ++c) {
      const int t2 = ex.conv(chain, ids.right_conv_base[static_cast<size_t>(idx)] + c);
      const int u2 = ex.act(t2, ids.right_act_base[static_cast<size_t>(idx)] + c);
      if (chain != cat) ex.release(chain);
      ex.release(t2);
      chain = u2;
    }
    curv = ex.add2(cat, chain);
    ex.release(cat);
    ex.release(chain);
  }

  const int logits = ex.conv(curv, ids.output_conv);
  ex.release(curv);

  Tensor out = ex.values[static_cast<size_t>(logits)];
  if (record_tape) {
    m.tape = std::make_shared<Tape>();
    m.tape->values = std::move(ex.values);
    m.tape->entries = std::move(ex.entries);
  } else {
    m.tape.reset();
  }
  return out;
}

Tensor backward(VNetModel& m, const Tensor& upstream) {
  if (!m.tape || m.tape->entries.empty()) {
    throw UsageError("backward requires a preceding forward with record_tape");
  }
  auto convs = conv_layers(m);
  auto prelus = prelu_layers(m);
  std::vector<Tensor>& values = m.tape->values;
  const std::vector<TapeEntry>& entries = m.tape->entries;

  const int out_id = entries.back().out;
  const Shape& out_shape = values[static_cast<size_t>(out_id)].shape();
  if (upstream.shape() != out_shape) {
    throw ShapeError("backward: upstream shape " + upstream.shape().str() +
                     " does not match output " + out_shape.str());
  }

  std::vector<Tensor> grads(values.size());
  grads[static_cast<size_t>(out_id)] = upstream;

  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    const TapeEntry& e = *it;
    Tensor gout = std::move(grads[static_cast<size_t>(e.out)]);
    if (gout.empty()) continue;
    const Tensor& in_a = values[static_cast<size_t>(e.a)];

    switch (e.op) {
      case TapeEntry::Op::Conv:
        add_grad(grads, e.a,
                 conv3d_backward(in_a, *convs[static_cast<size_t>(e.conv_id)], gout));
        break;
      case TapeEntry::Op::TConv:
        add_grad(grads, e.a,
                 transposed_conv3d_backward(
                     in_a, *convs[static_cast<size_t>(e.conv_id)], gout));
        break;
      case TapeEntry::Op::PReLU:
        add_grad(grads, e.a,
                 prelu_backward(in_a, *prelus[static_cast<size_t>(e.prelu_id)], gout));
        break;
      case TapeEntry::Op::Add:
        add_grad(grads, e.a, gout);
        add_grad(grads, e.b, gout);
        break;
      case TapeEntry::Op::Concat: {
        const int64_t ca = in_a.shape().extent(0);
        const Tensor& in_b = values[static_cast<size_t>(e.b)];
        Tensor ga(in_a.shape());
        Tensor gb(in_b.shape());
        const float* src = gout.data();
        std::memcpy(ga.mutable_data(), src,
                    static_cast<size_t>(ga.shape().elements()) * sizeof(float));
        std::memcpy(gb.mutable_data(), src + ca * spatial_elements(in_a),
                    static_cast<size_t>(gb.shape().elements()) * sizeof(float));
        add_grad(grads, e.a, ga);
        add_grad(grads, e.b, gb);
        break;
      }
      case TapeEntry::Op::Tile: {
        const int64_t C = in_a.shape().extent(0);
        const int64_t S = spatial_elements(in_a);
        const int64_t T = gout.shape().extent(0);
        Tensor g(in_a.shape());
        float* dst = g.mutable_data();
        const float* src = gout.data();
        for (int64_t j = 0; j < T; ++j) {
          float* drow = dst + (j % C) * S;
          const float* srow = src + j * S;
          for (int64_t s = 0; s < S; ++s) drow[s] += srow[s];
        }
        add_grad(grads, e.a, g);
        break;
      }
    }
  }

  Tensor gin = std::move(grads[0]);
  if (gin.empty()) gin = Tensor(values[0].shape());
  return gin;
}

std::vector<ConvLayerParams*> conv_layers(VNetModel& m) {
  std::vector<ConvLayerParams*> out;
  for (VNetStage& st : m.left) {
    for (ConvLayerParams& c : st.convs) out.push_back(&c);
  }
  for (ConvLayerParams& c : m.down) out.push_back(&c);
  for (ConvLayerParams& c : m.up) out.push_back(&c);
  for (VNetStage& st : m.right) {
    for (ConvLayerParams& c : st.convs) out.push_back(&c);
  }
  out.push_back(&m.output_conv);
  return out;
}

std::vector<PReLUParams*> prelu_layers(VNetModel& m) {
  std::vector<PReLUParams*> out;
  for (VNetStage& st : m.left) {
    for (PReLUParams& p : st.acts) out.push_back(&p);
  }
  for (PReLUParams& p : m.down_acts) out.push_back(&p);
  for (PReLUParams& p : m.up_acts) out.push_back(&p);
  for (VNetStage& st : m.right) {
    for (PReLUParams& p : st.acts) out.push_back(&p);
  }
  return out;
}

std::vector<ParamRef> model_parameters(VNetModel& m) {
  std::vector<ParamRef> out;
  auto add_conv = [&out](const std::string& prefix, ConvLayerParams& c) {
    out.push_back({prefix + ".weight", &c.weights, &c.weight_grad});
    out.push_back({prefix + ".bias", &c.bias, &c.bias_grad});
  };
  auto add_act = [&out](const std::string& prefix, PReLUParams& p) {
    out.push_back({prefix + ".slope", &p.slopes, &p.slope_grad});
  };

  for (int i = 0; i < 5; ++i) {
    VNetStage& st = m.left[static_cast<size_t>(i)];
    const std::string stage = "left" + std::to_string(i + 1);
    for (size_t c = 0; c < st.convs.size(); ++c) {
      add_conv(stage + ".conv" + std::to_string(c), st.convs[c]);
      add_act(stage + ".act" + std::to_string(c), st.acts[c]);
    }
  }
  for (size_t i = 0; i < m.down.size(); ++i) {
    const std::string stage = "down" + std::to_string(i + 1);
    add_conv(stage + ".conv", m.down[i]);
    add_act(stage + ".act", m.down_acts[i]);
  }
  for (size_t idx = 0; idx < m.up.size(); ++idx) {
    const std::string stage = "up" + std::to_string(4 - idx);
    add_conv(stage + ".conv", m.up[idx]);
    add_act(stage + ".act", m.up_acts[idx]);
  }
  for (int idx = 0; idx < 4; ++idx) {
    VNetStage& st = m.right[static_cast<size_t>(idx)];
    const std::string stage = "right" + std::to_string(4 - idx);
    for (size_t c = 0; c < st.convs.size(); ++c) {
      add_conv(stage + ".conv" + std::to_string(c), st.convs[c]);
      add_act(stage + ".act" + std::to_string(c), st.acts[c]);
    }
  }
  add_conv("output.conv", m.output_conv);
  return out;
}

int64_t count_parameters(const VNetModel& m) {
  int64_t n = 0;
  const auto conv = [&n](const ConvLayerParams& c) {
    n += c.weights.shape().elements() + c.bias.shape().elements();
  };
  const auto act = [&n](const PReLUParams& p) {
    n += p.slopes.shape().elements();
  };
  for (const VNetStage& st : m.left) {
    for (const auto& c : st.convs) conv(c);
    for (const auto& p : st.acts) act(p);
  }
  for (const auto& c : m.down) conv(c);
  for (const auto& p : m.down_acts) act(p);
  for (const auto& c : m.up) conv(c);
  for (const auto& p : m.up_acts) act(p);
  for (const VNetStage& st : m.right) {
    for (const auto& c : st.convs) conv(c);
    for (const auto& p : st.acts) act(p);
  }
  conv(m.output_conv);
  return n;
}

void zero_grads(VNetModel& m) {
  for (ConvLayerParams* c : conv_layers(m)) c->zero_grads();
  for (PReLUParams* p : prelu_layers(m)) p->zero_grads();
}

std::array<int64_t, 10> receptive_fields_for_counts(
    const std::array<int, 5>& left_counts,
    const std::array<int, 4>& right_counts) {
  std::array<int64_t, 10> rf{};
  int64_t field = 1, jump = 1;
  for (int i = 0; i < 5; ++i) {
    field += 4 * jump * left_counts[static_cast<size_t>(i)];  // 5x5x5 convs
    rf[static_cast<size_t>(i)] = field;
    if (i < 4) {
      field += jump;  // 2x2x2 stride-2 conv
      jump *= 2;
    }
  }
  for (int idx = 0; idx < 4; ++idx) {
    jump /= 2;       // transposed 2x2x2 stride-2: shrink the jump first
    field += jump;   // then grow by (k-1) * new jump
    field += 4 * jump * right_counts[static_cast<size_t>(idx)];
    rf[static_cast<size_t>(5 + idx)] = field;
  }
  rf[9] = field;  // 1x1x1 output conv adds nothing
  return rf;
}

std::vector<RfRow> receptive_field_table(const VNetConfig& config) {
  config.validate();
  const auto rf = receptive_fields_for_counts(kLeftConvCounts, kRightConvCounts);
  std::vector<RfRow> rows;
  for (int i = 1; i <= 5; ++i) {
    rows.push_back({"Left Stage " + std::to_string(i),
                    config.input_extent >> (i - 1),
                    rf[static_cast<size_t>(i - 1)]});
  }
  for (int idx = 0; idx < 4; ++idx) {
    const int j = 4 - idx;
    rows.push_back({"Right Stage " + std::to_string(j),
                    config.input_extent >> (j - 1),
                    rf[static_cast<size_t>(5 + idx)]});
  }
  rows.push_back({"Output", config.input_extent, rf[9]});
  return rows;
}

Tensor tile_channels(const Tensor& x, int64_t target_channels) {
  if (x.shape().rank() != 4) {
    throw ShapeError("tile_channels expects (C, D, H, W), got " +
                     x.shape().str());
  }
  const int64_t C = x.shape().extent(0);
  if (target_channels < 1) throw ShapeError("tile_channels: target must be >= 1");
  const int64_t S = spatial_elements(x);
  Tensor out(Shape{target_channels, x.shape().extent(1), x.shape().extent(2),
                   x.shape().extent(3)});
  float* dst = out.mutable_data();
  const float* src = x.data();
  for (int64_t j = 0; j < target_channels; ++j) {
    std::memcpy(dst + j * S, src + (j % C) * S,
                static_cast<size_t>(S) * sizeof(float));
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape().rank() != 4 || b.shape().rank() != 4) {
    throw ShapeError("concat_channels expects rank-4 tensors");
  }
  for (int axis = 1; axis < 4; ++axis) {
    if (a.shape().extent(axis) != b.shape().extent(axis)) {
      throw ShapeError("concat_channels: spatial extents differ, " +
                       a.shape().str() + " vs " + b.shape().str());
    }
  }
  Tensor out(Shape{a.shape().extent(0) + b.shape().extent(0),
                   a.shape().extent(1), a.shape().extent(2),
                   a.shape().extent(3)});
  float* dst = out.mutable_data();
  std::memcpy(dst, a.data(),
              static_cast<size_t>(a.shape().elements()) * sizeof(float));
  std::memcpy(dst + a.shape().elements(), b.data(),
              static_cast<size_t>(b.shape().elements()) * sizeof(float));
  return out;
}

namespace {

Tensor run_stage(VNetStage& st, const Tensor& x) {
  Tensor t = x;
  for (size_t c = 0; c < st.convs.size(); ++c) {
    t = prelu(conv3d(t, st.convs[c]), st.acts[c]);
  }
  Tensor res = x.shape().extent(0) == t.shape().extent(0)
                   ? x
                   : tile_channels(x, t.shape().extent(0));
  return add(res, t);
}

}  // namespace

Tensor run_left_stage(VNetModel& m, int stage_index, const Tensor& x) {
  if (stage_index < 1 || stage_index > 5) {
    throw ConfigError("left stage index must be 1..5");
  }
  return run_stage(m.left[static_cast<size_t>(stage_index - 1)], x);
}

Tensor run_right_stage(VNetModel& m, int stage_index, const Tensor& x) {
  if (stage_index < 1 || stage_index > 4) {
    throw ConfigError("right stage index must be 1..4");
  }
  return run_stage(m.right[static_cast<size_t>(4 - stage_index)], x);
}

}  // namespace volseg
