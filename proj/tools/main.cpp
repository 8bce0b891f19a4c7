// volseg: command-line front end for the segmentation engine. One subcommand
// per pipeline step; exit code 0 on success, 1 with a single-line diagnostic
// on stderr otherwise.
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "volseg/errors.hpp"
#include "volseg/image_io.hpp"
#include "volseg/loss.hpp"
#include "volseg/nn_ops.hpp"
#include "volseg/phantom.hpp"
#include "volseg/preprocess.hpp"
#include "volseg/trainer.hpp"
#include "volseg/vnet.hpp"

namespace fs = std::filesystem;
using namespace volseg;

namespace {

Tensor channel_slice(const Tensor& data, int64_t c) {
  const Shape& s = data.shape();
  const int64_t voxels = s.extent(1) * s.extent(2) * s.extent(3);
  Tensor out(Shape{1, s.extent(1), s.extent(2), s.extent(3)});
  std::memcpy(out.mutable_data(), data.data() + c * voxels,
              static_cast<size_t>(voxels) * sizeof(float));
  return out;
}

VolumeImage label_volume(const LabelMap& label,
                         const std::array<float, 3>& spacing) {
  VolumeImage seg;
  seg.data = label_to_tensor(label).reshaped(
      Shape{1, label.shape.extent(0), label.shape.extent(1),
            label.shape.extent(2)});
  seg.spacing = spacing;
  seg.modalities = {Modality::Label};
  return seg;
}

void run_convert(const std::string& in, const std::string& out) {
  if (fs::path(in).extension() != ".mha")
    throw ConfigError("convert reads a .mha source, got '" + in + "'");
  const ConvertSummary s = convert_mha_to_nifti(in, out);
  std::printf("wrote %s (%" PRId64 " voxels, %s, spacing %g %g %g)\n",
              out.c_str(), s.voxels, scalar_type_name(s.dtype), s.spacing[0],
              s.spacing[1], s.spacing[2]);
}

void run_preprocess(const std::string& in, const std::string& out,
                    int64_t size, float sigma) {
  const std::array<int64_t, 3> target{size, size, size};
  const auto ids = list_case_ids(in);
  if (ids.empty()) throw IoError("no case directories under " + in);
  for (const std::string& id : ids) {
    SegmentationCase c = read_case(fs::path(in) / id);
    VolumeImage image = normalize_intensity(c.image);
    image = resample_trilinear(image, target);
    if (sigma > 0.0f) image = gaussian_filter3d(image, GaussianSpec(sigma));
    LabelMap resampled_label;
    const LabelMap* label = nullptr;
    if (c.label) {
      resampled_label = resample_nearest(*c.label, target);
      label = &resampled_label;
    }
    write_case(fs::path(out) / id, image, label);
    std::printf("%s: %" PRId64 "x%" PRId64 "x%" PRId64 " -> %" PRId64 "^3%s\n",
                id.c_str(), c.image.width(), c.image.height(), c.image.depth(),
                size, label ? "" : " (no label)");
  }
  std::printf("preprocessed %zu cases into %s\n", ids.size(), out.c_str());
}

void run_phantom(const std::string& out, int count, int64_t extent,
                 float fraction, uint64_t seed, int modalities,
                 int tumor_count, float noise_sigma,
                 const std::array<float, 2>& radius_range,
                 const std::string& format) {
  PhantomSpec spec;
  spec.extent = extent;
  spec.modalities = modalities;
  spec.tumor_count = tumor_count;
  spec.tumor_radius_range = radius_range;
  spec.tumor_fraction_target = fraction;
  spec.noise_sigma = noise_sigma;

  for (int i = 0; i < count; ++i) {
    spec.seed = seed + static_cast<uint64_t>(i);
    auto [image, label] = generate_phantom(spec);
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03d", i);
    const fs::path dir = fs::path(out) / id;

    if (format == "nii") {
      write_case(dir, image, &label);
    } else {
      fs::create_directories(dir);
      for (int64_t c = 0; c < image.channels(); ++c) {
        VolumeImage channel;
        channel.data = channel_slice(image.data, c);
        channel.spacing = image.spacing;
        channel.modalities = {image.modalities[static_cast<size_t>(c)]};
        const std::string name =
            std::string(modality_name(channel.modalities[0])) + ".mha";
        write_mha(channel, dir / name);
      }
      write_mha(label_volume(label, image.spacing), dir / "seg.mha");
    }

    int64_t fg = 0;
    for (uint8_t v : label.voxels) fg += v;
    std::printf("%s: %" PRId64 "^3, %" PRId64 " foreground voxels (%.2f%%)\n",
                id, extent, fg, 100.0 * static_cast<double>(fg) /
                                    static_cast<double>(label.size()));
  }
}

void run_train(const std::string& data, const std::string& config_path,
               const std::string& out, const std::string& resume) {
  const RunConfig cfg = parse_run_config(config_path);
  const auto samples = samples_from_cases(read_dataset(data));

  VNetModel model;
  TrainState state;
  if (!resume.empty()) {
    LoadedCheckpoint lc = load_checkpoint(resume);
    if (!(lc.model.config == cfg.net)) {
      throw ConfigError("checkpoint " + resume +
                        " was built for a different network configuration");
    }
    model = std::move(lc.model);
    state = std::move(lc.state);
  } else {
    model = build_model(cfg.net, cfg.train.seed);
  }

  const auto hook = [&out](VNetModel& m, const TrainState& st) {
    save_checkpoint(out, m, st);
  };
  const TrainHistory ran = train(model, samples, cfg.train, state, hook);

  for (const EpochStats& e : ran) {
    std::printf("epoch %3d  loss %.6f  train dice %.4f\n", e.epoch,
                static_cast<double>(e.mean_loss),
                static_cast<double>(e.mean_train_dice));
  }
  save_checkpoint(out, model, state);
  std::printf("saved checkpoint %s after epoch %d\n", out.c_str(), state.epoch);
}

void run_infer(const std::string& ckpt, const std::string& in,
               const std::string& out) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  const SegmentationCase c = read_case(in);
  const Shape want{lc.model.config.in_channels, lc.model.config.input_extent,
                   lc.model.config.input_extent, lc.model.config.input_extent};
  if (c.image.data.shape() != want) {
    throw ConfigError("case " + c.id + " has shape " +
                      c.image.data.shape().str() + ", checkpoint expects " +
                      want.str());
  }

  const Tensor probs = softmax_voxelwise(forward(lc.model, c.image.data));
  const LabelMap seg = binarize(probs);
  write_nifti(label_volume(seg, c.image.spacing), out);

  int64_t fg = 0;
  for (uint8_t v : seg.voxels) fg += v;
  std::printf("wrote %s (%" PRId64 " foreground voxels, %.2f%%)\n", out.c_str(),
              fg, 100.0 * static_cast<double>(fg) /
                      static_cast<double>(seg.size()));
}

void run_evaluate(const std::string& ckpt, const std::string& data) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  const auto samples = samples_from_cases(read_dataset(data));
  const EvalResult result = evaluate(lc.model, samples);

  std::printf("%-16s %s\n", "case", "dice");
  for (const CaseScore& c : result.cases) {
    std::printf("%-16s %.4f\n", c.id.c_str(), static_cast<double>(c.dice));
  }
  std::printf("%-16s %.4f\n", "mean", static_cast<double>(result.mean_dice));

  nlohmann::json j;
  j["mean_dice"] = result.mean_dice;
  j["cases"] = nlohmann::json::array();
  for (const CaseScore& c : result.cases) {
    j["cases"].push_back({{"id", c.id}, {"dice", c.dice}});
  }
  std::printf("%s\n", j.dump().c_str());
}

void run_rf_table(int64_t extent) {
  VNetConfig config;
  config.input_extent = extent;
  std::printf("%-14s %11s %16s\n", "stage", "input_size", "receptive_field");
  for (const RfRow& row : receptive_field_table(config)) {
    std::printf("%-14s %11" PRId64 " %16" PRId64 "\n", row.stage.c_str(),
                row.input_size, row.receptive_field);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volumetric segmentation engine"};
  app.require_subcommand(1);

  std::string in_path, out_path, data_dir, config_path, ckpt_path, resume_path;
  int64_t size = 32, extent = 32, rf_extent = 128;
  float sigma = 1.0f, fraction = 0.02f, noise_sigma = 0.05f;
  int count = 1, modalities = 4, tumor_count = 2;
  std::array<float, 2> radius_range{2.0f, 5.0f};
  uint64_t seed = 0;
  std::string format = "nii";

  auto* convert = app.add_subcommand("convert", "convert a .mha volume to .nii");
  convert->add_option("input", in_path, "source .mha file")->required();
  convert->add_option("output", out_path, "destination .nii file")->required();
  convert->callback([&] { run_convert(in_path, out_path); });

  auto* preprocess = app.add_subcommand(
      "preprocess", "normalize, resample, and smooth a case directory tree");
  preprocess->add_option("--in", in_path, "input dataset root")->required();
  preprocess->add_option("--out", out_path, "output dataset root")->required();
  preprocess->add_option("--size", size, "cubic output extent")->required();
  preprocess->add_option("--sigma", sigma,
                         "Gaussian sigma in voxels, 0 skips smoothing")
      ->capture_default_str();
  preprocess->callback([&] { run_preprocess(in_path, out_path, size, sigma); });

  auto* phantom = app.add_subcommand(
      "phantom", "generate synthetic labeled volumes");
  phantom->add_option("--out", out_path, "output dataset root")->required();
  phantom->add_option("--count", count, "number of cases")->required();
  phantom->add_option("--extent", extent, "cubic volume extent")
      ->capture_default_str();
  phantom->add_option("--tumor-fraction", fraction,
                      "target foreground fraction, <= 0 disables targeting")
      ->capture_default_str();
  phantom->add_option("--seed", seed, "seed of the first case")
      ->capture_default_str();
  phantom->add_option("--modalities", modalities, "channel count, 1 to 4")
      ->capture_default_str();
  phantom->add_option("--tumor-count", tumor_count, "tumors per volume")
      ->capture_default_str();
  phantom->add_option("--noise-sigma", noise_sigma,
                      "intensity noise inside the brain")
      ->capture_default_str();
  phantom->add_option("--tumor-radius", radius_range,
                      "min and max initial tumor radius in voxels")
      ->capture_default_str();
  phantom->add_option("--format", format, "volume file format")
      ->check(CLI::IsMember({"nii", "mha"}))
      ->capture_default_str();
  phantom->callback([&] {
    run_phantom(out_path, count, extent, fraction, seed, modalities,
                tumor_count, noise_sigma, radius_range, format);
  });

  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  train_cmd->add_option("--data", data_dir, "training dataset root")->required();
  train_cmd->add_option("--config", config_path, "key=value config file")
      ->required();
  train_cmd->add_option("--out", ckpt_path, "checkpoint output path")
      ->required();
  train_cmd->add_option("--resume", resume_path,
                        "checkpoint to continue from");
  train_cmd->callback(
      [&] { run_train(data_dir, config_path, ckpt_path, resume_path); });

  auto* infer = app.add_subcommand("infer", "segment one case");
  infer->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
  infer->add_option("--in", in_path, "case directory")->required();
  infer->add_option("--out", out_path, "output segmentation .nii")->required();
  infer->callback([&] { run_infer(ckpt_path, in_path, out_path); });

  auto* eval = app.add_subcommand("evaluate", "score a model on labeled cases");
  eval->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
  eval->add_option("--data", data_dir, "labeled dataset root")->required();
  eval->callback([&] { run_evaluate(ckpt_path, data_dir); });

  auto* rf = app.add_subcommand(
      "rf-table", "per-stage receptive fields of the standard network");
  rf->add_option("--extent", rf_extent, "input extent")->capture_default_str();
  rf->callback([&] { run_rf_table(rf_extent); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "volseg: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
