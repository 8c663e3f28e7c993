#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cunet/rng.hpp"
#include "cunet/tensor.hpp"
#include "cunet/volume.hpp"

namespace cunet {

// Per-modality z-score over the whole volume. A modality with std < 1e-8 is
// set to zeros and flagged "modality<i>:constant". Labels are untouched.
VolumeSample zscore_normalize(const VolumeSample& sample);

enum class PadPolicy { Reject, ZeroPad };

// Crops every modality and the labels at `origin` (may be negative under
// ZeroPad). Out-of-volume voxels are zero / background and the patch is
// flagged "zero_padded".
VolumeSample extract_patch(const VolumeSample& sample, const std::array<std::ptrdiff_t, 3>& origin,
                           const Grid& size, PadPolicy policy = PadPolicy::Reject);

// Patch origin: uniform over valid positions, or (with probability
// `foreground_bias`) chosen so the patch contains a random tumor voxel.
std::array<std::ptrdiff_t, 3> sample_patch_origin(const VolumeSample& sample, const Grid& size,
                                                  Rng& rng, double foreground_bias = 0.0);

struct AugmentOptions {
  double max_angle_deg = 1.0;  // rotation about the depth axis, Uniform(-max, max)
  double flip_prob = 0.5;      // mirror along x (width)
};

struct AugmentDraw {
  double angle_rad = 0.0;
  bool flip = false;
};

AugmentDraw draw_augmentation(Rng& rng, const AugmentOptions& opts = {});

// In-plane rotation about the depth axis through the slice center (bilinear
// for modalities, nearest for labels, edge-clamped), then an optional x flip.
VolumeSample apply_augmentation(const VolumeSample& sample, const AugmentDraw& draw);

VolumeSample augment(const VolumeSample& sample, Rng& rng, const AugmentOptions& opts = {});

// Raw labels {0,1,2,4} <-> class indices {0,1,2,3}.
std::uint8_t encode_label(std::uint8_t raw);
std::uint8_t decode_label(std::uint8_t index);
std::vector<std::uint8_t> encode_labels(const std::vector<std::uint8_t>& raw);
std::vector<std::uint8_t> decode_labels(const std::vector<std::uint8_t>& indices);
// One-hot [1, classes, d, h, w] from class indices.
Tensor one_hot(const std::vector<std::uint8_t>& indices, const Grid& grid, std::size_t classes = 4);

struct FoldSplit {
  std::vector<std::vector<std::string>> folds;
  std::uint64_t seed = 0;

  // Ids outside fold k / inside fold k.
  std::vector<std::string> train_ids(std::size_t k) const;
  const std::vector<std::string>& val_ids(std::size_t k) const { return folds.at(k); }
};

// Seeded Fisher-Yates shuffle then contiguous chunks; the first |ids| % k
// folds get one extra id.
FoldSplit make_folds(const std::vector<std::string>& ids, std::size_t k = 5,
                     std::uint64_t seed = 0);

}  // namespace cunet
