// Release gate for the whole engine. Every test prints one
// "[ACCEPTANCE] criterion N (...): PASS/FAIL" line so the verdict is
// readable straight off the ctest log, and the binary doubles as a
// standalone checker when run directly.

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "volseg/image_io.hpp"
#include "volseg/loss.hpp"
#include "volseg/nn_ops.hpp"
#include "volseg/phantom.hpp"
#include "volseg/preprocess.hpp"
#include "volseg/rng.hpp"
#include "volseg/tensor.hpp"
#include "volseg/trainer.hpp"
#include "volseg/vnet.hpp"
#include "volseg/volume.hpp"

using namespace volseg;
namespace vt = volseg::testing;
namespace fs = std::filesystem;

namespace {

void report(int criterion, const char* label, bool pass,
            const std::string& detail) {
  std::printf("[ACCEPTANCE] criterion %d (%s): %s%s%s\n", criterion, label,
              pass ? "PASS" : "FAIL", detail.empty() ? "" : " -- ",
              detail.c_str());
  std::fflush(stdout);
  EXPECT_TRUE(pass) << "criterion " << criterion << " (" << label << ") "
                    << detail;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(VOLSEG_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  size_t n = 0;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
  return r;
}

class ScopedDir {
 public:
  explicit ScopedDir(const std::string& tag) {
    path_ = fs::temp_directory_path() /
            (tag + "_" + std::to_string(static_cast<long>(::getpid())));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScopedDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<TrainingSample> to_samples(const std::vector<PhantomCase>& cases) {
  std::vector<TrainingSample> out;
  out.reserve(cases.size());
  for (const PhantomCase& c : cases)
    out.push_back(TrainingSample{c.id, c.image.data, c.label});
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 1: the receptive-field table printed by the CLI.

struct RfExpect {
  const char* stage;
  int64_t input;
  int64_t rf;
};

constexpr std::array<RfExpect, 10> kExpectedRf{{
    {"Left Stage 1", 128, 5},
    {"Left Stage 2", 64, 22},
    {"Left Stage 3", 32, 72},
    {"Left Stage 4", 16, 172},
    {"Left Stage 5", 8, 372},
    {"Right Stage 4", 16, 476},
    {"Right Stage 3", 32, 528},
    {"Right Stage 2", 64, 546},
    {"Right Stage 1", 128, 551},
    {"Output", 128, 551},
}};

std::optional<int64_t> parse_int(const std::string& token) {
  int64_t value = 0;
  const auto [ptr, ec] =
      std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc{} || ptr != token.data() + token.size())
    return std::nullopt;
  return value;
}

TEST(Acceptance, Criterion1ReceptiveFieldTable) {
  const auto t0 = std::chrono::steady_clock::now();
  const CliResult res = run_cli("rf-table");
  const double elapsed = seconds_since(t0);

  // Rows are the lines whose last two tokens are integers; everything before
  // those tokens is the stage name.
  std::vector<RfExpect> rows;
  std::vector<std::string> names;
  std::istringstream lines(res.output);
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream words(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (words >> tok) tokens.push_back(tok);
    if (tokens.size() < 3) continue;
    const auto rf = parse_int(tokens.back());
    const auto input = parse_int(tokens[tokens.size() - 2]);
    if (!rf || !input) continue;
    std::string stage = tokens[0];
    for (size_t i = 1; i + 2 < tokens.size(); ++i) stage += " " + tokens[i];
    names.push_back(stage);
    rows.push_back({"", *input, *rf});
  }

  bool match = res.exit_code == 0 && rows.size() == kExpectedRf.size();
  if (match) {
    for (size_t i = 0; i < kExpectedRf.size(); ++i) {
      match = match && names[i] == kExpectedRf[i].stage &&
              rows[i].input == kExpectedRf[i].input &&
              rows[i].rf == kExpectedRf[i].rf;
    }
  }
  const bool pass = match && elapsed < 1.0;

  std::ostringstream detail;
  detail << rows.size() << "/10 rows parsed, "
         << (match ? "all exact" : "mismatch") << ", " << elapsed << " s";
  report(1, "receptive-field table", pass, detail.str());
}

// ---------------------------------------------------------------------------
// Criterion 2: finite-difference gradient suite.

// Double-precision recomputations of softmax + loss, so finite differences
// are not capped by float quantization of the returned loss value.
double dice_loss_oracle(const Tensor& z, const LabelMap& truth) {
  const int64_t v = truth.size();
  double sum_pg = 0.0, sum_p2 = 0.0, sum_g2 = 0.0;
  for (int64_t i = 0; i < v; ++i) {
    const double a = z[i];
    const double b = z[v + i];
    const double m = std::max(a, b);
    const double eb = std::exp(b - m);
    const double p = eb / (std::exp(a - m) + eb);
    const double g = truth.voxels[static_cast<size_t>(i)];
    sum_pg += p * g;
    sum_p2 += p * p;
    sum_g2 += g * g;
  }
  return 1.0 - (2.0 * sum_pg + 1e-5) / (sum_p2 + sum_g2 + 1e-5);
}

double wce_loss_oracle(const Tensor& z, const LabelMap& truth,
                       double fg_weight) {
  const int64_t v = truth.size();
  double loss = 0.0;
  for (int64_t i = 0; i < v; ++i) {
    const double a = z[i];
    const double b = z[v + i];
    const double m = std::max(a, b);
    const double ea = std::exp(a - m);
    const double eb = std::exp(b - m);
    const uint8_t t = truth.voxels[static_cast<size_t>(i)];
    const double p = (t ? eb : ea) / (ea + eb);
    loss += (t ? fg_weight : 1.0) *
            std::log(std::clamp(p, 1e-7, 1.0 - 1e-7));
  }
  return -loss / static_cast<double>(v);
}

double dice_loss_value(VNetModel& model, const Tensor& input,
                       const LabelMap& truth) {
  const Tensor logits = forward(model, input);
  return dice_loss_oracle(logits, truth);
}

TEST(Acceptance, Criterion2GradientSuite) {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr double kOpTol = 1e-3;
  constexpr double kNetTol = 1e-2;
  constexpr double kH = 1e-3;
  Rng rng(2026);

  double worst_op = 0.0;
  const auto track = [&worst_op](double err) {
    worst_op = std::max(worst_op, err);
  };

  {  // conv3d, stride 1, kernel 5
    ConvLayerParams p = ConvLayerParams::create(3, 2, 5, 1, rng);
    Tensor x = vt::random_tensor(Shape{2, 5, 5, 5}, rng);
    const Tensor u = vt::random_tensor(Shape{3, 5, 5, 5}, rng);
    const auto loss = [&] { return vt::weighted_sum(conv3d(x, p), u); };
    p.zero_grads();
    const Tensor dx = conv3d_backward(x, p, u);
    track(vt::max_relative_gradient_error(loss, x, dx, 10, kH));
    track(vt::max_relative_gradient_error(loss, p.weights, p.weight_grad, 10,
                                          kH));
    track(vt::max_relative_gradient_error(loss, p.bias, p.bias_grad, 3, kH));
  }
  {  // conv3d, stride 2, kernel 2
    ConvLayerParams p = ConvLayerParams::create(4, 3, 2, 2, rng);
    Tensor x = vt::random_tensor(Shape{3, 6, 6, 6}, rng);
    const Tensor u = vt::random_tensor(Shape{4, 3, 3, 3}, rng);
    const auto loss = [&] { return vt::weighted_sum(conv3d(x, p), u); };
    p.zero_grads();
    const Tensor dx = conv3d_backward(x, p, u);
    track(vt::max_relative_gradient_error(loss, x, dx, 10, kH));
    track(vt::max_relative_gradient_error(loss, p.weights, p.weight_grad, 10,
                                          kH));
  }
  {  // transposed conv
    ConvLayerParams p = ConvLayerParams::create(2, 3, 2, 2, rng);
    Tensor x = vt::random_tensor(Shape{3, 4, 4, 4}, rng);
    const Tensor u = vt::random_tensor(Shape{2, 8, 8, 8}, rng);
    const auto loss = [&] {
      return vt::weighted_sum(transposed_conv3d(x, p), u);
    };
    p.zero_grads();
    const Tensor dx = transposed_conv3d_backward(x, p, u);
    track(vt::max_relative_gradient_error(loss, x, dx, 10, kH));
    track(vt::max_relative_gradient_error(loss, p.weights, p.weight_grad, 10,
                                          kH));
    track(vt::max_relative_gradient_error(loss, p.bias, p.bias_grad, 2, kH));
  }
  {  // prelu, inputs kept away from the kink
    PReLUParams p = PReLUParams::create(3);
    Tensor x = vt::random_tensor(Shape{3, 2, 2, 2}, rng);
    for (int64_t i = 0; i < x.size(); ++i) {
      float* v = x.mutable_data();
      if (std::fabs(v[i]) < 0.05f) v[i] = v[i] < 0.0f ? -0.1f : 0.1f;
    }
    const Tensor u = vt::random_tensor(Shape{3, 2, 2, 2}, rng);
    const auto loss = [&] { return vt::weighted_sum(prelu(x, p), u); };
    p.zero_grads();
    const Tensor dx = prelu_backward(x, p, u);
    track(vt::max_relative_gradient_error(loss, x, dx, 10, kH));
    track(vt::max_relative_gradient_error(loss, p.slopes, p.slope_grad, 3, kH));
  }

  // softmax chained into each loss, checked against a random binary truth.
  LabelMap truth = LabelMap::zeros({4, 4, 4});
  for (uint8_t& v : truth.voxels) v = rng.uniform(0.0f, 1.0f) < 0.3f ? 1 : 0;
  {
    Tensor logits = vt::random_tensor(Shape{2, 4, 4, 4}, rng);
    const auto loss = [&] { return dice_loss_oracle(logits, truth); };
    const Tensor probs = softmax_voxelwise(logits);
    const LossResult r = soft_dice_loss(probs, truth);
    const Tensor dlogits = softmax_voxelwise_backward(probs, r.grad);
    track(vt::max_relative_gradient_error(loss, logits, dlogits, 16, kH));
  }
  {
    Tensor logits = vt::random_tensor(Shape{2, 4, 4, 4}, rng);
    const auto loss = [&] { return wce_loss_oracle(logits, truth, 5.0); };
    const Tensor probs = softmax_voxelwise(logits);
    const LossResult r = weighted_cross_entropy(probs, truth, 5.0f);
    const Tensor dlogits = softmax_voxelwise_backward(probs, r.grad);
    track(vt::max_relative_gradient_error(loss, logits, dlogits, 16, kH));
  }

  // Full 16-cube base-2 network: dice loss gradient w.r.t. ten weights
  // sampled from five layers spread across the architecture.
  PhantomSpec spec;
  spec.extent = 16;
  spec.modalities = 2;
  spec.tumor_radius_range = {2.0f, 2.6f};
  spec.seed = 5;
  const auto [image, label] = generate_phantom(spec);

  VNetConfig net;
  net.in_channels = 2;
  net.base_channels = 2;
  net.num_classes = 2;
  net.input_extent = 16;
  VNetModel model = build_model(net, 12);

  zero_grads(model);
  const Tensor logits = forward(model, image.data, true);
  const Tensor probs = softmax_voxelwise(logits);
  const LossResult r = soft_dice_loss(probs, label);
  backward(model, softmax_voxelwise_backward(probs, r.grad));
  model.tape.reset();

  const auto net_loss = [&] { return dice_loss_value(model, image.data, label); };
  double worst_net = 0.0;
  const std::array<const char*, 5> sampled = {
      "left1.conv0.weight", "down2.conv.weight", "up4.conv.weight",
      "right3.conv0.weight", "output.conv.weight"};
  for (ParamRef& ref : model_parameters(model)) {
    for (const char* name : sampled) {
      if (ref.name != name) continue;
      // Deep-layer gradients at init are tiny (down to ~1e-7), so the step
      // is larger than the op-level one to stay above the rounding noise of
      // the float forward pass.
      const Tensor analytic = *ref.grad;
      worst_net = std::max(worst_net, vt::max_relative_gradient_error(
                                          net_loss, *ref.value, analytic, 2,
                                          1e-2));
    }
  }

  const double elapsed = seconds_since(t0);
  const bool pass = worst_op <= kOpTol && worst_net <= kNetTol &&
                    worst_net > 0.0 && elapsed < 120.0;
  std::ostringstream detail;
  detail << "op max rel err " << worst_op << " (tol " << kOpTol
         << "), full-net max rel err " << worst_net << " (tol " << kNetTol
         << "), " << elapsed << " s";
  report(2, "gradient suite", pass, detail.str());
}

// ---------------------------------------------------------------------------
// Criterion 3: production convolution vs the naive reference.

TEST(Acceptance, Criterion3ConvolutionOracle) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(31);
  const std::array<std::pair<int, int>, 4> combos = {
      {{1, 1}, {5, 1}, {2, 2}, {1, 1}}};

  int instances = 0;
  double worst = 0.0;
  for (int rep = 0; rep < 6; ++rep) {
    for (const auto& [k, s] : combos) {
      const int64_t in_ch = rng.uniform_index(3) + 1;
      const int64_t out_ch = rng.uniform_index(3) + 1;
      auto dim = [&rng, s, k]() {
        int64_t lo = std::max<int64_t>(k, 2);
        int64_t d = lo + static_cast<int64_t>(rng.uniform_index(
                             static_cast<uint32_t>(8 - lo + 1)));
        if (s == 2 && d % 2 != 0) d = d == 8 ? 8 : d + 1;
        return d;
      };
      const Shape in_shape{in_ch, dim(), dim(), dim()};
      ConvLayerParams p = ConvLayerParams::create(out_ch, in_ch, k, s, rng);
      const Tensor x = vt::random_tensor(in_shape, rng);
      const Tensor got = conv3d(x, p);
      const int pad = s == 1 ? (k - 1) / 2 : 0;
      const Tensor want = vt::conv3d_reference(x, p.weights, p.bias, s, pad);
      ASSERT_EQ(got.shape(), want.shape());
      for (int64_t i = 0; i < got.size(); ++i)
        worst = std::max(worst,
                         static_cast<double>(std::fabs(got[i] - want[i])));
      ++instances;
    }
  }

  const double elapsed = seconds_since(t0);
  const bool pass =
      instances >= 20 && worst <= 1e-5 && elapsed < 30.0;
  std::ostringstream detail;
  detail << instances << " instances, max abs err " << worst << ", " << elapsed
         << " s";
  report(3, "convolution oracle", pass, detail.str());
}

// ---------------------------------------------------------------------------
// Criteria 4 and 8 share one reference training recipe: 4 phantoms at 32
// cubed, 2 modalities, base 4 channels, dice loss, 200-epoch budget with the
// early-stop lever at 0.99 train dice.

struct ReferenceRun {
  float train_dice = 0.0f;
  float heldout_dice = 0.0f;
  int epochs_ran = 0;
  std::string checkpoint_bytes;
};

ReferenceRun run_reference_training() {
  PhantomSpec spec;
  spec.extent = 32;
  spec.modalities = 2;
  const PhantomDataset data = make_dataset(spec, 4, 1, 11);

  VNetConfig net;
  net.in_channels = 2;
  net.base_channels = 4;
  net.num_classes = 2;
  net.input_extent = 32;

  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 0.01f;
  cfg.momentum = 0.9f;
  cfg.loss = LossKind::Dice;
  cfg.seed = 3;
  cfg.stop_at_train_dice = 0.99f;

  VNetModel model = build_model(net, cfg.seed);
  TrainState state;
  const std::vector<TrainingSample> train_set = to_samples(data.train);
  const TrainHistory history = train(model, train_set, cfg, state);

  ReferenceRun out;
  out.epochs_ran = state.epoch;
  out.train_dice = history.empty() ? 0.0f : history.back().mean_train_dice;
  out.heldout_dice = evaluate(model, to_samples(data.test)).mean_dice;

  ScopedDir dir("volseg_acc_ref");
  const fs::path ckpt = dir.path() / "model.ckpt";
  save_checkpoint(ckpt, model, state);
  out.checkpoint_bytes = read_bytes(ckpt);
  return out;
}

std::optional<ReferenceRun> g_reference_run;

TEST(Acceptance, Criterion4DeskScaleTraining) {
  const auto t0 = std::chrono::steady_clock::now();
  const ReferenceRun run = run_reference_training();
  g_reference_run = run;
  const double elapsed = seconds_since(t0);

  const bool pass = run.train_dice >= 0.90f && run.heldout_dice >= 0.80f &&
                    elapsed <= 1800.0;
  std::ostringstream detail;
  detail << "train dice " << run.train_dice << " (>= 0.90), held-out dice "
         << run.heldout_dice << " (>= 0.80), stopped after " << run.epochs_ran
         << " epochs, " << elapsed << " s";
  report(4, "desk-scale training", pass, detail.str());
}

// ---------------------------------------------------------------------------
// Criterion 5: dice loss vs cross entropy on 2% foreground phantoms.

float train_and_score(uint64_t data_seed, LossKind loss, float fg_weight) {
  PhantomSpec spec;
  spec.extent = 32;
  spec.modalities = 2;
  const PhantomDataset data = make_dataset(spec, 4, 0, data_seed);
  const std::vector<TrainingSample> samples = to_samples(data.train);

  VNetConfig net;
  net.in_channels = 2;
  net.base_channels = 2;
  net.num_classes = 2;
  net.input_extent = 32;

  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.learning_rate = 0.01f;
  cfg.momentum = 0.9f;
  cfg.loss = loss;
  cfg.fg_weight = fg_weight;
  cfg.seed = 7;

  VNetModel model = build_model(net, cfg.seed);
  train(model, samples, cfg);
  return evaluate(model, samples).mean_dice;
}

TEST(Acceptance, Criterion5ClassImbalance) {
  const std::array<uint64_t, 3> data_seeds = {100, 200, 300};
  double dice_sum = 0.0, ce_sum = 0.0, wce_sum = 0.0;
  std::ostringstream detail;
  for (const uint64_t seed : data_seeds) {
    const float dice = train_and_score(seed, LossKind::Dice, 0.0f);
    const float ce = train_and_score(seed, LossKind::WeightedCe, 1.0f);
    const float wce = train_and_score(seed, LossKind::WeightedCe, 0.0f);
    dice_sum += dice;
    ce_sum += ce;
    wce_sum += wce;
    detail << "seed " << seed << ": dice " << dice << " / ce " << ce
           << " / wce " << wce << "; ";
  }
  const double dice_mean = dice_sum / 3.0;
  const double ce_mean = ce_sum / 3.0;
  const double wce_mean = wce_sum / 3.0;
  const bool pass = dice_mean >= ce_mean && dice_mean >= wce_mean - 0.02;
  detail << "means dice " << dice_mean << ", ce " << ce_mean << ", wce "
         << wce_mean;
  report(5, "class-imbalance comparison", pass, detail.str());
}

// ---------------------------------------------------------------------------
// Criterion 6: preprocessing quality.

TEST(Acceptance, Criterion6Preprocessing) {
  // Additive-noise variance under a sigma=1 filter.
  Rng rng(606);
  VolumeImage noisy;
  noisy.data = Tensor(Shape{1, 24, 24, 24}, 5.0f);
  noisy.modalities = {Modality::T1};
  {
    float* v = noisy.data.mutable_data();
    for (int64_t i = 0; i < noisy.data.size(); ++i)
      v[i] += rng.normal(0.0f, 0.1f);
  }
  const auto variance = [](const Tensor& t) {
    double mean = 0.0;
    for (int64_t i = 0; i < t.size(); ++i) mean += t[i];
    mean /= static_cast<double>(t.size());
    double var = 0.0;
    for (int64_t i = 0; i < t.size(); ++i) {
      const double d = t[i] - mean;
      var += d * d;
    }
    return var / static_cast<double>(t.size());
  };
  const double var_before = variance(noisy.data);
  const VolumeImage smooth = gaussian_filter3d(noisy, GaussianSpec{1.0f});
  const double var_after = variance(smooth.data);
  const double reduction = 1.0 - var_after / var_before;

  // Per-channel statistics after normalization, over the originally nonzero
  // voxels of a phantom.
  PhantomSpec spec;
  spec.extent = 32;
  spec.modalities = 2;
  spec.seed = 4;
  const auto [image, label] = generate_phantom(spec);
  const VolumeImage normed = normalize_intensity(image);

  double worst_mean = 0.0, worst_std = 0.0;
  const int64_t volume = 32 * 32 * 32;
  for (int64_t c = 0; c < 2; ++c) {
    double sum = 0.0;
    int64_t n = 0;
    for (int64_t i = 0; i < volume; ++i) {
      if (image.data[c * volume + i] == 0.0f) continue;
      sum += normed.data[c * volume + i];
      ++n;
    }
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < volume; ++i) {
      if (image.data[c * volume + i] == 0.0f) continue;
      const double d = normed.data[c * volume + i] - mean;
      var += d * d;
    }
    const double stddev = std::sqrt(var / static_cast<double>(n));
    worst_mean = std::max(worst_mean, std::fabs(mean));
    worst_std = std::max(worst_std, std::fabs(stddev - 1.0));
  }

  const bool pass =
      reduction > 0.5 && worst_mean < 1e-3 && worst_std < 1e-3;
  std::ostringstream detail;
  detail << "noise variance cut " << reduction * 100.0 << "%, |mean| "
         << worst_mean << ", |std-1| " << worst_std;
  report(6, "preprocessing", pass, detail.str());
}

// ---------------------------------------------------------------------------
// Criterion 7: file-format round trips plus the CLI pipeline end to end.

bool bitwise_roundtrip_mha(const fs::path& dir, ScalarType dtype, Rng& rng) {
  VolumeImage v;
  v.data = Tensor(Shape{1, 3, 4, 5});
  v.modalities = {dtype == ScalarType::Uint8 ? Modality::Label : Modality::T1};
  v.spacing = {1.5f, 2.0f, 0.5f};
  float* p = v.data.mutable_data();
  for (int64_t i = 0; i < v.data.size(); ++i) {
    switch (dtype) {
      case ScalarType::Uint8:
        p[i] = static_cast<float>(rng.uniform_index(256));
        break;
      case ScalarType::Int16:
        p[i] = static_cast<float>(static_cast<int>(rng.uniform_index(65536)) -
                                  32768);
        break;
      case ScalarType::Float32:
        p[i] = rng.normal(0.0f, 10.0f);
        break;
    }
  }
  const fs::path first = dir / (std::string(scalar_type_name(dtype)) + ".mha");
  const fs::path second =
      dir / (std::string(scalar_type_name(dtype)) + "_again.mha");
  write_mha(v, first, dtype);
  const VolumeImage back = read_mha(first);
  for (int64_t i = 0; i < v.data.size(); ++i)
    if (back.data[i] != v.data[i]) return false;
  write_mha(back, second, dtype);
  return read_bytes(first) == read_bytes(second);
}

bool bitwise_roundtrip_nifti(const fs::path& dir, bool label, Rng& rng) {
  VolumeImage v;
  v.data = Tensor(Shape{1, 3, 4, 5});
  v.modalities = {label ? Modality::Label : Modality::T2};
  float* p = v.data.mutable_data();
  for (int64_t i = 0; i < v.data.size(); ++i)
    p[i] = label ? static_cast<float>(rng.uniform_index(2))
                 : rng.normal(0.0f, 3.0f);
  const fs::path first = dir / (label ? std::string("seg.nii") : "vol.nii");
  const fs::path second =
      dir / (label ? std::string("seg_again.nii") : "vol_again.nii");
  write_nifti(v, first);
  const VolumeImage back = read_nifti(first);
  for (int64_t i = 0; i < v.data.size(); ++i)
    if (back.data[i] != v.data[i]) return false;
  write_nifti(back, second);
  return read_bytes(first) == read_bytes(second);
}

TEST(Acceptance, Criterion7IoAndPipeline) {
  ScopedDir dir("volseg_acc_io");
  Rng rng(77);

  const bool trips = bitwise_roundtrip_mha(dir.path(), ScalarType::Uint8, rng) &&
                     bitwise_roundtrip_mha(dir.path(), ScalarType::Int16, rng) &&
                     bitwise_roundtrip_mha(dir.path(), ScalarType::Float32,
                                           rng) &&
                     bitwise_roundtrip_nifti(dir.path(), false, rng) &&
                     bitwise_roundtrip_nifti(dir.path(), true, rng);

  // phantom -> convert -> preprocess -> 5-epoch training smoke via the CLI.
  const fs::path raw = dir.path() / "raw";
  const fs::path conv = dir.path() / "conv";
  const fs::path prep = dir.path() / "prep";
  const fs::path ckpt = dir.path() / "model.ckpt";

  bool pipeline = true;
  std::string stage_failed;
  const auto step = [&pipeline, &stage_failed](const std::string& name,
                                               const CliResult& r) {
    if (pipeline && r.exit_code != 0) {
      pipeline = false;
      stage_failed = name + ": " + r.output;
    }
  };

  step("phantom",
       run_cli("phantom --out " + raw.string() +
               " --count 2 --extent 32 --modalities 2 --seed 41 --format mha"));
  for (const char* id : {"case_000", "case_001"}) {
    fs::create_directories(conv / id);
    for (const char* mod : {"t1", "t1c", "seg"}) {
      const fs::path in = raw / id / (std::string(mod) + ".mha");
      const fs::path out = conv / id / (std::string(mod) + ".nii");
      step(std::string("convert ") + id + "/" + mod,
           run_cli("convert " + in.string() + " " + out.string()));
    }
  }
  step("preprocess", run_cli("preprocess --in " + conv.string() + " --out " +
                             prep.string() + " --size 16 --sigma 1.0"));

  const fs::path cfg_path = dir.path() / "run.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "in_channels = 2\nbase_channels = 2\nnum_classes = 2\n"
           "input_extent = 16\nepochs = 5\nlearning_rate = 0.005\n"
           "momentum = 0.9\nloss = dice\nseed = 5\n";
  }
  const CliResult train_res = run_cli("train --data " + prep.string() +
                                      " --config " + cfg_path.string() +
                                      " --out " + ckpt.string());
  step("train", train_res);

  int epochs_seen = 0;
  bool losses_finite = true;
  std::istringstream lines(train_res.output);
  std::string line;
  while (std::getline(lines, line)) {
    int epoch = 0;
    float loss = 0.0f;
    if (std::sscanf(line.c_str(), "epoch %d loss %f", &epoch, &loss) == 2) {
      ++epochs_seen;
      losses_finite = losses_finite && std::isfinite(loss);
    }
  }

  const bool pass = trips && pipeline && epochs_seen == 5 && losses_finite &&
                    fs::exists(ckpt);
  std::ostringstream detail;
  detail << (trips ? "round trips bit-exact" : "round trip mismatch") << ", "
         << epochs_seen << "/5 epochs, losses "
         << (losses_finite ? "finite" : "non-finite");
  if (!pipeline) detail << ", pipeline failed at " << stage_failed;
  report(7, "I/O round trips and pipeline", pass, detail.str());
}

// ---------------------------------------------------------------------------
// Criterion 8: retraining with the same configuration is bitwise identical.

TEST(Acceptance, Criterion8DeterministicRetraining) {
  if (!g_reference_run) g_reference_run = run_reference_training();
  const ReferenceRun second = run_reference_training();

  const bool pass = !second.checkpoint_bytes.empty() &&
                    second.checkpoint_bytes == g_reference_run->checkpoint_bytes;
  std::ostringstream detail;
  detail << "checkpoints " << g_reference_run->checkpoint_bytes.size() << " and "
         << second.checkpoint_bytes.size() << " bytes, "
         << (pass ? "identical" : "different");
  report(8, "deterministic retraining", pass, detail.str());
}

}  // namespace
