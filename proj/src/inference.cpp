#include "cunet/inference.hpp"

#include <algorithm>

#include "cunet/data.hpp"
#include "cunet/error.hpp"

namespace cunet {

namespace {

std::array<std::size_t, 3> extents(const Grid& g) { return {g.d, g.h, g.w}; }

Grid grid_of(const std::array<std::size_t, 3>& e) { return {e[0], e[1], e[2]}; }

}  // namespace

SlidingPlan make_sliding_plan(const Grid& volume, const Grid& patch, Grid stride) {
  if (volume.size() == 0 || patch.size() == 0) throw ContractError("sliding plan: empty grid");
  if (stride.size() == 0) {
    stride = {std::max<std::size_t>(1, patch.d / 2), std::max<std::size_t>(1, patch.h / 2),
              std::max<std::size_t>(1, patch.w / 2)};
  }
  SlidingPlan plan;
  plan.volume = volume;
  plan.patch = patch;
  plan.stride = stride;
  const auto ve = extents(volume), pe = extents(patch), se = extents(stride);
  std::array<std::size_t, 3> padded{};
  std::array<std::vector<std::size_t>, 3> axis_origins;
  for (int a = 0; a < 3; ++a) {
    padded[a] = std::max(ve[a], pe[a]);
    plan.pad_before[a] = (padded[a] - ve[a]) / 2;
    for (std::size_t o = 0; o + pe[a] < padded[a]; o += se[a]) axis_origins[a].push_back(o);
    axis_origins[a].push_back(padded[a] - pe[a]);
  }
  plan.padded = grid_of(padded);
  for (std::size_t z : axis_origins[0])
    for (std::size_t y : axis_origins[1])
      for (std::size_t x : axis_origins[2]) plan.origins.push_back({z, y, x});
  return plan;
}

void SlidingPlan::validate() const {
  const auto pe = extents(padded), ke = extents(patch), ve = extents(volume);
  for (int a = 0; a < 3; ++a) {
    if (pe[a] < ve[a] + pad_before[a] || pe[a] < ke[a]) {
      throw ContractError("sliding plan: padded grid smaller than volume or patch");
    }
  }
  std::vector<std::uint8_t> covered(padded.size(), 0);
  for (const auto& o : origins) {
    for (int a = 0; a < 3; ++a) {
      if (o[a] + ke[a] > pe[a]) throw ContractError("sliding plan: patch outside padded grid");
    }
    for (std::size_t z = 0; z < patch.d; ++z)
      for (std::size_t y = 0; y < patch.h; ++y)
        for (std::size_t x = 0; x < patch.w; ++x)
          covered[padded.index(o[0] + z, o[1] + y, o[2] + x)] = 1;
  }
  for (std::size_t z = 0; z < volume.d; ++z)
    for (std::size_t y = 0; y < volume.h; ++y)
      for (std::size_t x = 0; x < volume.w; ++x) {
        if (!covered[padded.index(z + pad_before[0], y + pad_before[1], x + pad_before[2])]) {
          throw ContractError("sliding plan does not cover voxel (" + std::to_string(z) + "," +
                              std::to_string(y) + "," + std::to_string(x) + ")");
        }
      }
}

Tensor predict_volume(const LayerGraph& graph, const VolumeSample& sample, const SlidingPlan& plan) {
  if (sample.grid != plan.volume) {
    throw ContractError("predict_volume: plan built for " + grid_str(plan.volume) + ", volume is " +
                        grid_str(sample.grid));
  }
  if (sample.modalities.size() != graph.input_channels()) {
    throw ContractError("predict_volume: graph expects " + std::to_string(graph.input_channels()) +
                        " modalities, sample has " + std::to_string(sample.modalities.size()));
  }
  plan.validate();
  const Grid& g = sample.grid;
  const std::size_t classes = graph.output_channels();
  std::vector<double> acc(classes * g.size(), 0.0);
  std::vector<std::uint32_t> hits(g.size(), 0);
  NoGradGuard no_grad;
  for (const auto& o : plan.origins) {
    const std::array<std::ptrdiff_t, 3> origin{
        static_cast<std::ptrdiff_t>(o[0]) - static_cast<std::ptrdiff_t>(plan.pad_before[0]),
        static_cast<std::ptrdiff_t>(o[1]) - static_cast<std::ptrdiff_t>(plan.pad_before[1]),
        static_cast<std::ptrdiff_t>(o[2]) - static_cast<std::ptrdiff_t>(plan.pad_before[2])};
    const VolumeSample patch = extract_patch(sample, origin, plan.patch, PadPolicy::ZeroPad);
    const Tensor probs = graph.forward(patch.to_input());
    const auto p = probs.data();
    const Grid& pg = plan.patch;
    for (std::size_t z = 0; z < pg.d; ++z) {
      const std::ptrdiff_t vz = origin[0] + static_cast<std::ptrdiff_t>(z);
      if (vz < 0 || vz >= static_cast<std::ptrdiff_t>(g.d)) continue;
      for (std::size_t y = 0; y < pg.h; ++y) {
        const std::ptrdiff_t vy = origin[1] + static_cast<std::ptrdiff_t>(y);
        if (vy < 0 || vy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t x = 0; x < pg.w; ++x) {
          const std::ptrdiff_t vx = origin[2] + static_cast<std::ptrdiff_t>(x);
          if (vx < 0 || vx >= static_cast<std::ptrdiff_t>(g.w)) continue;
          const std::size_t vi = g.index(static_cast<std::size_t>(vz), static_cast<std::size_t>(vy),
                                         static_cast<std::size_t>(vx));
          const std::size_t pi = pg.index(z, y, x);
          for (std::size_t c = 0; c < classes; ++c) acc[c * g.size() + vi] += p[c * pg.size() + pi];
          ++hits[vi];
        }
      }
    }
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < g.size(); ++i) acc[c * g.size() + i] /= hits[i];
  return Tensor::from_data({1, classes, g.d, g.h, g.w}, std::move(acc));
}

std::vector<std::uint8_t> probs_to_labels(const Tensor& probs) {
  if (probs.rank() != 5 || probs.dim(0) != 1) {
    throw ContractError("probs_to_labels: expected [1, classes, d, h, w], got " +
                        shape_str(probs.shape()));
  }
  const std::size_t classes = probs.dim(1);
  const std::size_t n = probs.numel() / classes;
  const auto p = probs.data();
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (p[c * n + i] > p[best * n + i]) best = c;
    out[i] = decode_label(static_cast<std::uint8_t>(best));
  }
  return out;
}

std::vector<Component> connected_components(std::span<const std::uint8_t> mask, const Grid& grid,
                                            int connectivity) {
  if (mask.size() != grid.size()) throw ContractError("connected_components: mask size mismatch");
  if (connectivity != 6 && connectivity != 26) {
    throw ContractError("connected_components: connectivity must be 6 or 26");
  }
  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (manhattan == 0) continue;
        if (connectivity == 6 && manhattan != 1) continue;
        offsets.push_back({dz, dy, dx});
      }

  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<Component> out;
  std::vector<std::size_t> queue;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    Component comp;
    queue.assign(1, start);
    seen[start] = 1;
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t v = queue[head];
      const auto z = static_cast<std::ptrdiff_t>(v / (grid.h * grid.w));
      const auto y = static_cast<std::ptrdiff_t>((v / grid.w) % grid.h);
      const auto x = static_cast<std::ptrdiff_t>(v % grid.w);
      for (const auto& o : offsets) {
        const std::ptrdiff_t nz = z + o[0], ny = y + o[1], nx = x + o[2];
        if (nz < 0 || ny < 0 || nx < 0 || nz >= static_cast<std::ptrdiff_t>(grid.d) ||
            ny >= static_cast<std::ptrdiff_t>(grid.h) || nx >= static_cast<std::ptrdiff_t>(grid.w)) {
          continue;
        }
        const std::size_t n = grid.index(static_cast<std::size_t>(nz), static_cast<std::size_t>(ny),
                                         static_cast<std::size_t>(nx));
        if (mask[n] && !seen[n]) {
          seen[n] = 1;
          queue.push_back(n);
        }
      }
    }
    std::sort(queue.begin(), queue.end());
    comp.voxels = queue;
    comp.size = queue.size();
    comp.bbox_min = {grid.d, grid.h, grid.w};
    for (std::size_t v : queue) {
      const std::size_t c[3] = {v / (grid.h * grid.w), (v / grid.w) % grid.h, v % grid.w};
      for (int a = 0; a < 3; ++a) {
        comp.bbox_min[a] = std::min(comp.bbox_min[a], c[a]);
        comp.bbox_max[a] = std::max(comp.bbox_max[a], c[a]);
      }
    }
    out.push_back(std::move(comp));
  }
  return out;
}

FilterResult filter_enhancing(std::span<const std::uint8_t> labels, const Grid& grid,
                              std::size_t min_voxels, int connectivity) {
  if (labels.size() != grid.size()) throw ContractError("filter_enhancing: size mismatch");
  std::vector<std::uint8_t> et(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!is_valid_label(labels[i])) {
      throw ContractError("filter_enhancing: invalid label " + std::to_string(labels[i]) +
                          " at voxel " + std::to_string(i));
    }
    et[i] = labels[i] == 4;
  }
  FilterResult res;
  res.labels.assign(labels.begin(), labels.end());
  for (const Component& c : connected_components(et, grid, connectivity)) {
    ++res.audit.components_found;
    res.audit.sizes.push_back(c.size);
    if (c.size < min_voxels) {
      ++res.audit.components_relabeled;
      for (std::size_t v : c.voxels) res.labels[v] = 1;
    }
  }
  return res;
}

nlohmann::json to_json(const FilterAudit& audit) {
  return {{"components_found", audit.components_found},
          {"components_relabeled", audit.components_relabeled},
          {"sizes", audit.sizes}};
}

}  // namespace cunet
