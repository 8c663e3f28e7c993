#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cunet/data.hpp"
#include "cunet/network.hpp"
#include "cunet/rng.hpp"
#include "cunet/tensor.hpp"
#include "cunet/volume.hpp"

namespace cunet {

enum class Selection { ValLoss, MeanDice };

struct TrainConfig {
  double lr0 = 7e-5;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 30;
  double plateau_delta = 1e-6;  // improvement must beat best by more than this
  std::size_t epochs = 300;
  std::size_t batch_size = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  Grid patch{128, 128, 128};
  std::size_t steps_per_epoch = 50;
  std::size_t fold = 0;
  std::size_t folds = 5;
  double foreground_bias = 0.5;
  AugmentOptions augment;
  double dice_smooth = 1e-5;
  Selection selection = Selection::ValLoss;

  void validate() const;
};

// Adam moments keyed by parameter name.
struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::uint64_t t = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

NamedParams named_parameters(const LayerGraph& graph);

// Bias-corrected Adam over each parameter's accumulated grad (absent grad
// counts as zero). Throws NumericError naming the parameter on NaN/Inf grads.
void adam_step(const NamedParams& params, AdamState& state, double lr, const AdamHyper& hyper = {});

// Reduce-on-plateau: lr is multiplied by `factor` once `patience` epochs pass
// without the loss beating the best-so-far by more than `delta`.
struct PlateauSchedule {
  double lr = 7e-5;
  double factor = 0.5;
  std::size_t patience = 30;
  double delta = 1e-6;
  std::optional<double> best;
  std::size_t bad_epochs = 0;
  std::size_t reductions = 0;

  // Records one epoch's validation loss and returns the lr for the next epoch.
  double observe(double val_loss);
};

// Learning rate after replaying `history` through a fresh schedule.
double plateau_schedule(const std::vector<double>& history, PlateauSchedule state);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mean_dice = 0.0;
  double lr = 0.0;  // lr used during this epoch
  double wall_ms = 0.0;
};

nlohmann::json to_json(const EpochLog& e);
EpochLog epoch_log_from_json(const nlohmann::json& j);

// Everything needed to continue a run exactly where it stopped.
struct Checkpoint {
  std::size_t epochs_done = 0;
  AdamState adam;
  PlateauSchedule schedule;
  double best_score = 0.0;
  std::optional<std::size_t> best_epoch;
  std::string rng_state;
  std::vector<EpochLog> log;
};

// Layout: <dir>/params.cunetp, adam_m.cunetp, adam_v.cunetp, state.json.
void save_checkpoint(const std::filesystem::path& dir, const LayerGraph& graph,
                     const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir, LayerGraph& graph);

struct TrainOptions {
  // When set: metrics.jsonl plus last/ and best/ checkpoints are written here.
  std::optional<std::filesystem::path> out_dir;
  // Continue from this checkpoint directory.
  std::optional<std::filesystem::path> resume_from;
  // Stop after this many total epochs (for interruption), default cfg.epochs.
  std::optional<std::size_t> stop_after;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  std::map<std::string, Tensor> best_params;
};

// Training loop over normalized samples. Each step draws a patch (with
// foreground bias), augments it, and takes one Adam step on the dice loss;
// each epoch ends with sliding-window validation and a schedule update.
TrainResult train(LayerGraph& graph, const TrainConfig& cfg,
                  const std::vector<VolumeSample>& train_set,
                  const std::vector<VolumeSample>& val_set, const TrainOptions& opts = {});

struct ValidationResult {
  double loss = 0.0;
  double mean_dice = 0.0;
};

ValidationResult validate_model(const LayerGraph& graph, const std::vector<VolumeSample>& val_set,
                                const Grid& patch, double dice_smooth);

// Voxelwise mean of probability volumes of identical shape.
Tensor ensemble_average(const std::vector<Tensor>& probs);

}  // namespace cunet
