#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cunet {

using Mask = std::vector<std::uint8_t>;

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

// 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
// TP / (TP + FN); 1.0 when truth is empty.
double sensitivity(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
// TN / (TN + FP); 1.0 when truth covers every voxel.
double specificity(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

// Whole tumor {1,2,4}, tumor core {1,4}, enhancing tumor {4}.
struct RegionMasks {
  Mask wt, tc, et;
};

RegionMasks compose_regions(std::span<const std::uint8_t> labels);

struct RegionScores {
  double dsc = 1.0;
  double sensitivity = 1.0;
  double specificity = 1.0;
  Confusion counts;
};

struct EvalReport {
  RegionScores wt, tc, et;
  double mean_dsc = 1.0;
  // Metrics whose denominator was empty, e.g. "et.dsc:empty".
  std::vector<std::string> flags;
  std::size_t cases = 1;
  // Provenance.
  std::optional<int> fold;
  std::string checkpoint;
  bool postprocessed = false;
};

// Scores one prediction against its truth; both over {0,1,2,4}.
EvalReport evaluate(std::span<const std::uint8_t> pred_labels,
                    std::span<const std::uint8_t> truth_labels);

// Per-case mean of every metric; flags are the union prefixed by case index.
EvalReport average_reports(const std::vector<EvalReport>& reports);

nlohmann::json to_json(const EvalReport& report);

}  // namespace cunet
