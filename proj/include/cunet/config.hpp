#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cunet/network.hpp"
#include "cunet/training.hpp"
#include "cunet/volume.hpp"

namespace cunet {

struct PhantomConfig {
  std::size_t count = 25;
  Grid grid{24, 24, 24};
  double noise_sigma = 0.25;
};

struct DataConfig {
  std::filesystem::path manifest;  // dataset manifest (train / predict / evaluate truth)
};

struct PredictConfig {
  std::vector<std::filesystem::path> checkpoints;  // parameter files; >1 means ensemble
  Grid stride{};                                   // zero: patch / 2
  bool write_probs = false;
  bool postprocess = false;
};

struct PostprocessConfig {
  std::filesystem::path input;  // label manifest or single BVOL
  std::size_t min_voxels = 500;
  int connectivity = 26;
};

struct EvaluateConfig {
  std::filesystem::path pred;   // label manifest or single BVOL
  std::filesystem::path truth;  // label manifest or single BVOL
};

struct GradcheckConfig {
  double eps = 1e-5;
  double op_tolerance = 1e-4;
  double net_tolerance = 1e-3;
  std::size_t net_samples = 20;
};

// Every knob of every command; unspecified keys take the defaults below.
struct RunConfig {
  std::uint64_t seed = 0;
  NetConfig net = NetConfig::full();
  TrainConfig train;
  PhantomConfig phantom;
  DataConfig data;
  PredictConfig predict;
  PostprocessConfig postprocess;
  EvaluateConfig evaluate;
  GradcheckConfig gradcheck;

  // Propagates `seed` into net.init_seed and train.seed, then validates.
  void finalize();
};

// Base width 4, depth 3, 16^3 patches, 20 epochs x 50 steps.
RunConfig desk_preset();

// Strict: unknown keys anywhere are rejected with their dotted path.
// Values missing from `j` keep the ones already in `base`.
RunConfig parse_config(const nlohmann::json& j, RunConfig base = {});
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace cunet
