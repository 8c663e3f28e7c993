#include "cunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cunet/error.hpp"

namespace cunet {

VolumeSample zscore_normalize(const VolumeSample& sample) {
  VolumeSample out = sample;
  for (std::size_t c = 0; c < out.modalities.size(); ++c) {
    auto& m = out.modalities[c];
    const double n = static_cast<double>(m.size());
    double mean = 0.0;
    for (double v : m) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : m) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / n);
    if (sd < 1e-8) {
      std::fill(m.begin(), m.end(), 0.0);
      out.flags.push_back("modality" + std::to_string(c) + ":constant");
      continue;
    }
    for (double& v : m) v = (v - mean) / sd;
  }
  return out;
}

VolumeSample extract_patch(const VolumeSample& sample, const std::array<std::ptrdiff_t, 3>& origin,
                           const Grid& size, PadPolicy policy) {
  if (size.size() == 0) throw ContractError("extract_patch: empty patch size");
  const std::ptrdiff_t ext[3] = {static_cast<std::ptrdiff_t>(sample.grid.d),
                                 static_cast<std::ptrdiff_t>(sample.grid.h),
                                 static_cast<std::ptrdiff_t>(sample.grid.w)};
  const std::ptrdiff_t sz[3] = {static_cast<std::ptrdiff_t>(size.d),
                                static_cast<std::ptrdiff_t>(size.h),
                                static_cast<std::ptrdiff_t>(size.w)};
  bool padded = false;
  for (int a = 0; a < 3; ++a) {
    const bool inside = origin[a] >= 0 && origin[a] + sz[a] <= ext[a];
    if (inside) continue;
    if (policy == PadPolicy::Reject) {
      throw ContractError("extract_patch: patch " + grid_str(size) + " at origin (" +
                          std::to_string(origin[0]) + "," + std::to_string(origin[1]) + "," +
                          std::to_string(origin[2]) + ") leaves volume " + grid_str(sample.grid));
    }
    if (origin[a] + sz[a] <= 0 || origin[a] >= ext[a]) {
      throw ContractError("extract_patch: patch does not overlap the volume along axis " +
                          std::to_string(a));
    }
    padded = true;
  }

  VolumeSample out;
  out.id = sample.id;
  out.grid = size;
  out.flags = sample.flags;
  if (padded) out.flags.push_back("zero_padded");
  out.modalities.assign(sample.modalities.size(), std::vector<double>(size.size(), 0.0));
  if (sample.labels) out.labels = std::vector<std::uint8_t>(size.size(), 0);
  for (std::size_t z = 0; z < size.d; ++z) {
    const std::ptrdiff_t sz_ = origin[0] + static_cast<std::ptrdiff_t>(z);
    if (sz_ < 0 || sz_ >= ext[0]) continue;
    for (std::size_t y = 0; y < size.h; ++y) {
      const std::ptrdiff_t sy = origin[1] + static_cast<std::ptrdiff_t>(y);
      if (sy < 0 || sy >= ext[1]) continue;
      for (std::size_t x = 0; x < size.w; ++x) {
        const std::ptrdiff_t sx = origin[2] + static_cast<std::ptrdiff_t>(x);
        if (sx < 0 || sx >= ext[2]) continue;
        const std::size_t src = sample.grid.index(static_cast<std::size_t>(sz_),
                                                  static_cast<std::size_t>(sy),
                                                  static_cast<std::size_t>(sx));
        const std::size_t dst = size.index(z, y, x);
        for (std::size_t c = 0; c < out.modalities.size(); ++c)
          out.modalities[c][dst] = sample.modalities[c][src];
        if (sample.labels) (*out.labels)[dst] = (*sample.labels)[src];
      }
    }
  }
  return out;
}

std::array<std::ptrdiff_t, 3> sample_patch_origin(const VolumeSample& sample, const Grid& size,
                                                  Rng& rng, double foreground_bias) {
  const std::size_t ext[3] = {sample.grid.d, sample.grid.h, sample.grid.w};
  const std::size_t sz[3] = {size.d, size.h, size.w};
  for (int a = 0; a < 3; ++a) {
    if (sz[a] > ext[a]) {
      throw ContractError("sample_patch_origin: patch " + grid_str(size) + " exceeds volume " +
                          grid_str(sample.grid));
    }
  }
  std::array<std::ptrdiff_t, 3> origin{};
  const bool biased = foreground_bias > 0.0 && rng.uniform() < foreground_bias;
  if (biased && sample.labels) {
    std::vector<std::size_t> tumor;
    for (std::size_t i = 0; i < sample.labels->size(); ++i)
      if ((*sample.labels)[i] != 0) tumor.push_back(i);
    if (!tumor.empty()) {
      const std::size_t v = tumor[rng.below(tumor.size())];
      const std::size_t pos[3] = {v / (sample.grid.h * sample.grid.w),
                                  (v / sample.grid.w) % sample.grid.h, v % sample.grid.w};
      for (int a = 0; a < 3; ++a) {
        // Origins o with o <= pos < o + size and 0 <= o <= ext - size.
        const std::size_t lo = pos[a] + 1 > sz[a] ? pos[a] + 1 - sz[a] : 0;
        const std::size_t hi = std::min(pos[a], ext[a] - sz[a]);
        origin[a] = static_cast<std::ptrdiff_t>(lo + rng.below(hi - lo + 1));
      }
      return origin;
    }
  }
  for (int a = 0; a < 3; ++a) origin[a] = static_cast<std::ptrdiff_t>(rng.below(ext[a] - sz[a] + 1));
  return origin;
}

AugmentDraw draw_augmentation(Rng& rng, const AugmentOptions& opts) {
  AugmentDraw d;
  const double deg = opts.max_angle_deg > 0.0 ? rng.uniform(-opts.max_angle_deg, opts.max_angle_deg)
                                              : 0.0;
  d.angle_rad = deg * std::numbers::pi / 180.0;
  d.flip = rng.uniform() < opts.flip_prob;
  return d;
}

VolumeSample apply_augmentation(const VolumeSample& sample, const AugmentDraw& draw) {
  VolumeSample out = sample;
  const Grid& g = sample.grid;
  if (draw.angle_rad != 0.0) {
    const double c = std::cos(draw.angle_rad), s = std::sin(draw.angle_rad);
    const double cy = (static_cast<double>(g.h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(g.w) - 1.0) / 2.0;
    const double max_y = static_cast<double>(g.h - 1), max_x = static_cast<double>(g.w - 1);
    for (std::size_t y = 0; y < g.h; ++y) {
      for (std::size_t x = 0; x < g.w; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double sy = std::clamp(cy + c * dy + s * dx, 0.0, max_y);
        const double sx = std::clamp(cx - s * dy + c * dx, 0.0, max_x);
        const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
        const std::size_t y1 = std::min(y0 + 1, g.h - 1), x1 = std::min(x0 + 1, g.w - 1);
        const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
        const auto ny = static_cast<std::size_t>(std::lround(sy));
        const auto nx = static_cast<std::size_t>(std::lround(sx));
        for (std::size_t z = 0; z < g.d; ++z) {
          const std::size_t dst = g.index(z, y, x);
          for (std::size_t m = 0; m < out.modalities.size(); ++m) {
            const auto& src = sample.modalities[m];
            out.modalities[m][dst] =
                (1.0 - fy) * ((1.0 - fx) * src[g.index(z, y0, x0)] + fx * src[g.index(z, y0, x1)]) +
                fy * ((1.0 - fx) * src[g.index(z, y1, x0)] + fx * src[g.index(z, y1, x1)]);
          }
          if (sample.labels) (*out.labels)[dst] = (*sample.labels)[g.index(z, ny, nx)];
        }
      }
    }
  }
  if (draw.flip) {
    for (std::size_t z = 0; z < g.d; ++z)
      for (std::size_t y = 0; y < g.h; ++y) {
        const std::size_t row = g.index(z, y, 0);
        for (auto& m : out.modalities) std::reverse(m.begin() + row, m.begin() + row + g.w);
        if (out.labels) std::reverse(out.labels->begin() + row, out.labels->begin() + row + g.w);
      }
  }
  return out;
}

VolumeSample augment(const VolumeSample& sample, Rng& rng, const AugmentOptions& opts) {
  return apply_augmentation(sample, draw_augmentation(rng, opts));
}

std::uint8_t encode_label(std::uint8_t raw) {
  switch (raw) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default:
      throw ContractError("encode_label: value " + std::to_string(raw) + " outside {0,1,2,4}");
  }
}

std::uint8_t decode_label(std::uint8_t index) {
  constexpr std::uint8_t raw[4] = {0, 1, 2, 4};
  if (index > 3) {
    throw ContractError("decode_label: class index " + std::to_string(index) + " outside 0..3");
  }
  return raw[index];
}

std::vector<std::uint8_t> encode_labels(const std::vector<std::uint8_t>& raw) {
  std::vector<std::uint8_t> out(raw.size());
  std::transform(raw.begin(), raw.end(), out.begin(), encode_label);
  return out;
}

std::vector<std::uint8_t> decode_labels(const std::vector<std::uint8_t>& indices) {
  std::vector<std::uint8_t> out(indices.size());
  std::transform(indices.begin(), indices.end(), out.begin(), decode_label);
  return out;
}

Tensor one_hot(const std::vector<std::uint8_t>& indices, const Grid& grid, std::size_t classes) {
  if (indices.size() != grid.size()) throw ContractError("one_hot: size mismatch");
  std::vector<double> data(classes * grid.size(), 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= classes) {
      throw ContractError("one_hot: class " + std::to_string(indices[i]) + " at voxel " +
                          std::to_string(i) + " exceeds " + std::to_string(classes));
    }
    data[indices[i] * grid.size() + i] = 1.0;
  }
  return Tensor::from_data({1, classes, grid.d, grid.h, grid.w}, std::move(data));
}

std::vector<std::string> FoldSplit::train_ids(std::size_t k) const {
  std::vector<std::string> out;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (f == k) continue;
    out.insert(out.end(), folds[f].begin(), folds[f].end());
  }
  return out;
}

FoldSplit make_folds(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ContractError("make_folds: k must be positive");
  if (k > ids.size()) {
    throw ContractError("make_folds: k = " + std::to_string(k) + " exceeds " +
                        std::to_string(ids.size()) + " ids");
  }
  std::vector<std::string> order = ids;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  FoldSplit split;
  split.seed = seed;
  const std::size_t base = order.size() / k, extra = order.size() % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t n = base + (f < extra ? 1 : 0);
    split.folds.emplace_back(order.begin() + pos, order.begin() + pos + n);
    pos += n;
  }
  return split;
}

}  // namespace cunet
