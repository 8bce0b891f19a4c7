#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "volseg/image_io.hpp"
#include "volseg/loss.hpp"
#include "volseg/vnet.hpp"

// Whole-volume training (batch = 1) with SGD + momentum, deterministic given
// (config, seed): the volume order reshuffles every epoch from a per-epoch
// seed stream, so resuming from a checkpoint at epoch k reproduces the
// uninterrupted run bitwise.

namespace volseg {

enum class LossKind { Dice, WeightedCe };

struct TrainConfig {
  int epochs = 200;
  float learning_rate = 1e-2f;  // 0 freezes the parameters
  float momentum = 0.9f;
  LossKind loss = LossKind::Dice;
  float fg_weight = 0.0f;  // weighted_ce only; <= 0 derives bg/fg ratio from data
  uint64_t seed = 0;
  int checkpoint_every = 0;       // epochs between checkpoint callbacks; 0 = never
  float stop_at_train_dice = 0.0f;  // > 0 stops early once mean train dice reaches it

  void validate() const;
};

struct TrainingSample {
  std::string id;
  Tensor input;   // (in_channels, E, E, E)
  LabelMap truth;
};

// Bridges disk cases to trainer inputs; every case must carry a label.
TrainingSample sample_from_case(const SegmentationCase& c);
std::vector<TrainingSample> samples_from_cases(
    const std::vector<SegmentationCase>& cases);

struct EpochStats {
  int epoch = 0;  // 1-based, epoch just finished
  float mean_loss = 0.0f;
  float mean_train_dice = 0.0f;
};

using TrainHistory = std::vector<EpochStats>;

// Momentum buffers (aligned with model_parameters order), completed-epoch
// counter, and the accumulated history. A default-constructed state starts
// training from scratch; a state loaded from a checkpoint resumes it.
struct TrainState {
  std::vector<Tensor> velocities;
  int epoch = 0;
  TrainHistory history;
};

using CheckpointHook =
    std::function<void(VNetModel& model, const TrainState& state)>;

// Runs epochs state.epoch .. cfg.epochs-1 (so cfg.epochs is the total budget,
// not an increment). Returns the history of the epochs it ran. Aborts with a
// diagnostic naming the epoch and volume if the loss goes non-finite.
TrainHistory train(VNetModel& model, const std::vector<TrainingSample>& dataset,
                   const TrainConfig& cfg, TrainState& state,
                   const CheckpointHook& on_checkpoint = {});
TrainHistory train(VNetModel& model, const std::vector<TrainingSample>& dataset,
                   const TrainConfig& cfg);

struct CaseScore {
  std::string id;
  float dice = 0.0f;
};

struct EvalResult {
  std::vector<CaseScore> cases;
  float mean_dice = 0.0f;
};

// Frozen-model evaluation: forward (no tape), softmax, binarize, dice.
EvalResult evaluate(VNetModel& model, const std::vector<TrainingSample>& dataset);

// Binary checkpoint: magic + version, network config, every parameter tensor
// (named directory), momentum buffers, epoch counter, history. Bitwise
// round trip.
void save_checkpoint(const std::filesystem::path& path, VNetModel& model,
                     const TrainState& state);

struct LoadedCheckpoint {
  VNetModel model;
  TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Flat key=value run configuration ('#' comments allowed) covering both the
// network and the optimizer, e.g.:
//   in_channels = 2
//   base_channels = 4
//   input_extent = 32
//   epochs = 200
//   learning_rate = 0.01
//   loss = dice
struct RunConfig {
  VNetConfig net;
  TrainConfig train;
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config(const std::filesystem::path& path);

}  // namespace volseg
