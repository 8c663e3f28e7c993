#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "cunet/network.hpp"
#include "cunet/volume.hpp"

namespace cunet {

// Patch tiling of a volume. Origins are in padded coordinates; the volume
// sits at `pad_before` inside a zero-padded grid of extent `padded`.
struct SlidingPlan {
  Grid volume;
  Grid patch;
  Grid stride;
  std::array<std::size_t, 3> pad_before{};
  Grid padded;
  std::vector<std::array<std::size_t, 3>> origins;

  // Every padded voxel covered at least once; every patch inside `padded`.
  void validate() const;
};

// Origins every `stride` along each axis plus a final flush origin; axes
// shorter than the patch are padded symmetrically. Zero stride means patch/2.
SlidingPlan make_sliding_plan(const Grid& volume, const Grid& patch, Grid stride = {});

// Per-voxel mean of the overlapping patch probabilities, [1, classes, d, h, w].
Tensor predict_volume(const LayerGraph& graph, const VolumeSample& sample, const SlidingPlan& plan);

// Per-voxel argmax (lowest class wins ties) decoded to {0,1,2,4}.
std::vector<std::uint8_t> probs_to_labels(const Tensor& probs);

struct Component {
  std::vector<std::size_t> voxels;  // flat indices, ascending
  std::size_t size = 0;
  std::array<std::size_t, 3> bbox_min{};
  std::array<std::size_t, 3> bbox_max{};  // inclusive
};

// Maximal connected sets of nonzero voxels under 6- or 26-connectivity,
// ordered by their first voxel in row-major order.
std::vector<Component> connected_components(std::span<const std::uint8_t> mask, const Grid& grid,
                                            int connectivity = 26);

struct FilterAudit {
  std::size_t components_found = 0;
  std::size_t components_relabeled = 0;
  std::vector<std::size_t> sizes;  // every ET component, in component order
};

struct FilterResult {
  std::vector<std::uint8_t> labels;
  FilterAudit audit;
};

// Relabels every enhancing-tumor (4) component with fewer than `min_voxels`
// voxels to necrosis (1).
FilterResult filter_enhancing(std::span<const std::uint8_t> labels, const Grid& grid,
                              std::size_t min_voxels = 500, int connectivity = 26);

nlohmann::json to_json(const FilterAudit& audit);

}  // namespace cunet
