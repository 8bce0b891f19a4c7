#include "volseg/trainer.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "volseg/errors.hpp"
#include "volseg/rng.hpp"

namespace volseg {

namespace {

constexpr char kCheckpointMagic[8] = {'V', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

void check_dataset(const VNetModel& m, const std::vector<TrainingSample>& data,
                   const char* op) {
  if (data.empty()) {
    throw ConfigError(std::string(op) + ": dataset is empty");
  }
  const Shape want{m.config.in_channels, m.config.input_extent,
                   m.config.input_extent, m.config.input_extent};
  for (const TrainingSample& s : data) {
    if (s.input.shape() != want) {
      throw ShapeError(std::string(op) + ": volume '" + s.id + "' has shape " +
                       s.input.shape().str() + ", model expects " + want.str());
    }
    s.truth.validate();
    const Shape spatial{m.config.input_extent, m.config.input_extent,
                        m.config.input_extent};
    if (s.truth.shape != spatial) {
      throw ShapeError(std::string(op) + ": volume '" + s.id +
                       "' label shape " + s.truth.shape.str() +
                       " does not match " + spatial.str());
    }
  }
}

float derive_fg_weight(const std::vector<TrainingSample>& data) {
  int64_t fg = 0, total = 0;
  for (const TrainingSample& s : data) {
    for (uint8_t v : s.truth.voxels) fg += v;
    total += s.truth.size();
  }
  if (fg == 0) return 1.0f;
  return static_cast<float>(static_cast<double>(total - fg) /
                            static_cast<double>(fg));
}

// Fisher-Yates driven by the per-epoch stream, so the order for epoch e never
// depends on how many epochs ran before it.
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
  for (size_t i = n; i > 1; --i) {
    const size_t j = rng.uniform_index(i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// ---- checkpoint byte helpers (little-endian) ----

void put_u32(std::vector<unsigned char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f32(std::vector<unsigned char>& b, float v) {
  put_u32(b, std::bit_cast<uint32_t>(v));
}

void put_tensor(std::vector<unsigned char>& b, const Tensor& t) {
  put_u32(b, static_cast<uint32_t>(t.shape().rank()));
  for (int i = 0; i < t.shape().rank(); ++i) {
    put_u64(b, static_cast<uint64_t>(t.shape().extent(i)));
  }
  const float* d = t.data();
  for (int64_t i = 0; i < t.shape().elements(); ++i) put_f32(b, d[i]);
}

void put_string(std::vector<unsigned char>& b, const std::string& s) {
  put_u32(b, static_cast<uint32_t>(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

struct ByteReader {
  const unsigned char* p = nullptr;
  size_t left = 0;

  void need(size_t n) const {
    if (n > left) throw CheckpointError("checkpoint truncated");
  }

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }

  Tensor tensor() {
    const uint32_t rank = u32();
    if (rank > 8) throw CheckpointError("checkpoint tensor rank out of range");
    std::vector<int64_t> dims;
    for (uint32_t i = 0; i < rank; ++i) {
      dims.push_back(static_cast<int64_t>(u64()));
    }
    Shape shape(dims);
    std::vector<float> data(static_cast<size_t>(shape.elements()));
    for (float& v : data) v = f32();
    return Tensor(shape, std::move(data));
  }
};

void sgd_step(VNetModel& model, TrainState& state, float lr, float mu) {
  const auto params = model_parameters(model);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& vel = state.velocities[i];
    const int64_t n = vel.shape().elements();
    float* v = vel.mutable_data();
    float* w = params[i].value->mutable_data();
    const float* g = params[i].grad->data();
    for (int64_t j = 0; j < n; ++j) {
      v[j] = mu * v[j] - lr * g[j];
      w[j] += v[j];
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (learning_rate < 0.0f || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and >= 0");
  }
  if (momentum < 0.0f || momentum >= 1.0f) {
    throw ConfigError("momentum must be in [0, 1)");
  }
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

TrainingSample sample_from_case(const SegmentationCase& c) {
  if (!c.label) {
    throw ConfigError("case '" + c.id + "' has no seg.nii label");
  }
  return {c.id, c.image.data, *c.label};
}

std::vector<TrainingSample> samples_from_cases(
    const std::vector<SegmentationCase>& cases) {
  std::vector<TrainingSample> out;
  out.reserve(cases.size());
  for (const SegmentationCase& c : cases) out.push_back(sample_from_case(c));
  return out;
}

TrainHistory train(VNetModel& model, const std::vector<TrainingSample>& dataset,
                   const TrainConfig& cfg, TrainState& state,
                   const CheckpointHook& on_checkpoint) {
  cfg.validate();
  check_dataset(model, dataset, "train");

  const auto params = model_parameters(model);
  if (state.velocities.empty()) {
    for (const ParamRef& p : params) {
      state.velocities.emplace_back(p.value->shape());
    }
  } else if (state.velocities.size() != params.size()) {
    throw CheckpointError("optimizer state has " +
                          std::to_string(state.velocities.size()) +
                          " buffers for " + std::to_string(params.size()) +
                          " parameters");
  }

  float fg_weight = cfg.fg_weight;
  if (cfg.loss == LossKind::WeightedCe && fg_weight <= 0.0f) {
    fg_weight = derive_fg_weight(dataset);
  }

  TrainHistory ran;
  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const std::vector<size_t> order =
        epoch_order(dataset.size(), cfg.seed, epoch);

    double loss_sum = 0.0, dice_sum = 0.0;
    for (size_t pos = 0; pos < order.size(); ++pos) {
      const TrainingSample& sample = dataset[order[pos]];
      zero_grads(model);

      const Tensor logits = forward(model, sample.input, true);
      const Tensor probs = softmax_voxelwise(logits);
      const LossResult lr = cfg.loss == LossKind::Dice
                                ? soft_dice_loss(probs, sample.truth)
                                : weighted_cross_entropy(probs, sample.truth,
                                                         fg_weight);
      if (!std::isfinite(lr.loss)) {
        throw Error("training aborted: non-finite loss at epoch " +
                    std::to_string(epoch + 1) + " on volume '" + sample.id +
                    "'");
      }

      const Tensor dlogits = softmax_voxelwise_backward(probs, lr.grad);
      backward(model, dlogits);
      model.tape.reset();  // activations are not needed past this step
      sgd_step(model, state, cfg.learning_rate, cfg.momentum);

      loss_sum += lr.loss;
      dice_sum += dice_coefficient(binarize(probs), sample.truth).value;
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.mean_loss =
        static_cast<float>(loss_sum / static_cast<double>(order.size()));
    stats.mean_train_dice =
        static_cast<float>(dice_sum / static_cast<double>(order.size()));
    state.history.push_back(stats);
    ran.push_back(stats);
    state.epoch = epoch + 1;

    if (cfg.checkpoint_every > 0 && on_checkpoint &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      on_checkpoint(model, state);
    }
    if (cfg.stop_at_train_dice > 0.0f &&
        stats.mean_train_dice >= cfg.stop_at_train_dice) {
      break;
    }
  }
  return ran;
}

TrainHistory train(VNetModel& model, const std::vector<TrainingSample>& dataset,
                   const TrainConfig& cfg) {
  TrainState state;
  return train(model, dataset, cfg, state);
}

EvalResult evaluate(VNetModel& model, const std::vector<TrainingSample>& dataset) {
  check_dataset(model, dataset, "evaluate");
  EvalResult out;
  double sum = 0.0;
  for (const TrainingSample& s : dataset) {
    const Tensor logits = forward(model, s.input, false);
    const Tensor probs = softmax_voxelwise(logits);
    const float dice = dice_coefficient(binarize(probs), s.truth).value;
    out.cases.push_back({s.id, dice});
    sum += dice;
  }
  out.mean_dice = static_cast<float>(sum / static_cast<double>(dataset.size()));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, VNetModel& model,
                     const TrainState& state) {
  const auto params = model_parameters(model);
  if (!state.velocities.empty() && state.velocities.size() != params.size()) {
    throw CheckpointError("cannot save: velocity count does not match model");
  }

  std::vector<unsigned char> b;
  b.insert(b.end(), kCheckpointMagic, kCheckpointMagic + 8);
  put_u32(b, kCheckpointVersion);
  put_u64(b, static_cast<uint64_t>(model.config.in_channels));
  put_u64(b, static_cast<uint64_t>(model.config.base_channels));
  put_u64(b, static_cast<uint64_t>(model.config.num_classes));
  put_u64(b, static_cast<uint64_t>(model.config.input_extent));

  put_u32(b, static_cast<uint32_t>(params.size()));
  for (const ParamRef& p : params) {
    put_string(b, p.name);
    put_tensor(b, *p.value);
  }

  put_u32(b, static_cast<uint32_t>(state.velocities.size()));
  for (const Tensor& v : state.velocities) put_tensor(b, v);

  put_u64(b, static_cast<uint64_t>(state.epoch));
  put_u32(b, static_cast<uint32_t>(state.history.size()));
  for (const EpochStats& s : state.history) {
    put_u64(b, static_cast<uint64_t>(s.epoch));
    put_f32(b, s.mean_loss);
    put_f32(b, s.mean_train_dice);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());

  ByteReader r{bytes.data(), bytes.size()};
  r.need(8);
  if (std::memcmp(r.p, kCheckpointMagic, 8) != 0) {
    throw CheckpointError("bad checkpoint magic in " + path.string());
  }
  r.p += 8;
  r.left -= 8;

  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));
  }

  VNetConfig config;
  config.in_channels = static_cast<int64_t>(r.u64());
  config.base_channels = static_cast<int64_t>(r.u64());
  config.num_classes = static_cast<int64_t>(r.u64());
  config.input_extent = static_cast<int64_t>(r.u64());
  config.validate();

  LoadedCheckpoint out{build_model(config, 0), TrainState{}};
  const auto params = model_parameters(out.model);

  const uint32_t param_count = r.u32();
  if (param_count != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(param_count) +
                          " parameters, model needs " +
                          std::to_string(params.size()));
  }
  for (const ParamRef& p : params) {
    const std::string name = r.str();
    if (name != p.name) {
      throw CheckpointError("checkpoint parameter '" + name +
                            "' does not match expected '" + p.name + "'");
    }
    Tensor t = r.tensor();
    if (t.shape() != p.value->shape()) {
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " +
                            t.shape().str() + ", expected " +
                            p.value->shape().str());
    }
    *p.value = std::move(t);
  }

  const uint32_t vel_count = r.u32();
  if (vel_count != 0 && vel_count != params.size()) {
    throw CheckpointError("checkpoint velocity count mismatch");
  }
  for (uint32_t i = 0; i < vel_count; ++i) {
    Tensor t = r.tensor();
    if (t.shape() != params[i].value->shape()) {
      throw CheckpointError("checkpoint velocity shape mismatch");
    }
    out.state.velocities.push_back(std::move(t));
  }

  out.state.epoch = static_cast<int>(r.u64());
  const uint32_t hist_count = r.u32();
  for (uint32_t i = 0; i < hist_count; ++i) {
    EpochStats s;
    s.epoch = static_cast<int>(r.u64());
    s.mean_loss = r.f32();
    s.mean_train_dice = r.f32();
    out.state.history.push_back(s);
  }
  if (r.left != 0) {
    throw CheckpointError("checkpoint has " + std::to_string(r.left) +
                          " trailing bytes");
  }
  return out;
}

namespace {

std::string_view trim_view(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

int64_t config_int(std::string_view v, const std::string& key) {
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' has non-integer value '" +
                      std::string(v) + "'");
  }
  return out;
}

float config_float(std::string_view v, const std::string& key) {
  float out = 0.0f;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' has non-numeric value '" +
                      std::string(v) + "'");
  }
  return out;
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
  RunConfig cfg;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line = trim_view(std::string_view(text).substr(pos, eol - pos));
    pos = eol + 1;
    if (line.empty() || line.front() == '#') continue;

    const size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line without '=': '" + std::string(line) + "'");
    }
    const std::string key(trim_view(line.substr(0, eq)));
    const std::string_view value = trim_view(line.substr(eq + 1));

    if (key == "in_channels") {
      cfg.net.in_channels = config_int(value, key);
    } else if (key == "base_channels") {
      cfg.net.base_channels = config_int(value, key);
    } else if (key == "num_classes") {
      cfg.net.num_classes = config_int(value, key);
    } else if (key == "input_extent") {
      cfg.net.input_extent = config_int(value, key);
    } else if (key == "epochs") {
      cfg.train.epochs = static_cast<int>(config_int(value, key));
    } else if (key == "learning_rate") {
      cfg.train.learning_rate = config_float(value, key);
    } else if (key == "momentum") {
      cfg.train.momentum = config_float(value, key);
    } else if (key == "loss") {
      if (value == "dice") {
        cfg.train.loss = LossKind::Dice;
      } else if (value == "weighted_ce") {
        cfg.train.loss = LossKind::WeightedCe;
      } else {
        throw ConfigError("config key 'loss' must be dice or weighted_ce, got '" +
                          std::string(value) + "'");
      }
    } else if (key == "fg_weight") {
      cfg.train.fg_weight = config_float(value, key);
    } else if (key == "seed") {
      cfg.train.seed = static_cast<uint64_t>(config_int(value, key));
    } else if (key == "checkpoint_every") {
      cfg.train.checkpoint_every = static_cast<int>(config_int(value, key));
    } else if (key == "stop_at_train_dice") {
      cfg.train.stop_at_train_dice = config_float(value, key);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  cfg.net.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig parse_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_run_config_text(text);
}

}  // namespace volseg
