#include "cunet/phantom.hpp"

#include <algorithm>
#include <cstdio>

#include "cunet/error.hpp"

namespace cunet {

namespace {

bool inside(const std::array<double, 3>& c, const std::array<double, 3>& r, double z, double y,
            double x) {
  const double a = (z - c[0]) / r[0], b = (y - c[1]) / r[1], d = (x - c[2]) / r[2];
  return a * a + b * b + d * d <= 1.0;
}

}  // namespace

void PhantomSpec::validate() const {
  if (grid.size() == 0) throw ContractError("phantom " + id + ": empty grid");
  for (int a = 0; a < 3; ++a) {
    if (!(radii_et[a] > 0.0)) throw ContractError("phantom " + id + ": radii must be positive");
    if (radii_et[a] > radii_tc[a] || radii_tc[a] > radii_wt[a]) {
      throw ContractError("phantom " + id + ": shells not nested along axis " + std::to_string(a) +
                          " (need et <= tc <= wt)");
    }
  }
  if (noise_sigma < 0.0) throw ContractError("phantom " + id + ": negative noise sigma");
}

VolumeSample gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  VolumeSample s;
  s.id = spec.id;
  s.grid = spec.grid;
  const Grid& g = spec.grid;
  std::vector<std::uint8_t> labels(g.size(), 0);
  s.modalities.assign(kModalities, std::vector<double>(g.size()));
  Rng rng(spec.seed);
  for (std::size_t z = 0; z < g.d; ++z)
    for (std::size_t y = 0; y < g.h; ++y)
      for (std::size_t x = 0; x < g.w; ++x) {
        const double fz = static_cast<double>(z), fy = static_cast<double>(y),
                     fx = static_cast<double>(x);
        std::size_t region = kBackground;
        std::uint8_t label = 0;
        if (inside(spec.center, spec.radii_et, fz, fy, fx)) {
          region = kEnhancing;
          label = 4;
        } else if (inside(spec.center, spec.radii_tc, fz, fy, fx)) {
          region = kNecrosis;
          label = 1;
        } else if (inside(spec.center, spec.radii_wt, fz, fy, fx)) {
          region = kEdema;
          label = 2;
        }
        const std::size_t i = g.index(z, y, x);
        labels[i] = label;
        for (std::size_t m = 0; m < kModalities; ++m) {
          const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * rng.normal() : 0.0;
          s.modalities[m][i] = spec.intensity[region][m] + noise;
        }
      }
  s.labels = std::move(labels);
  return s;
}

PhantomSpec random_phantom_spec(const std::string& id, const Grid& grid, Rng& rng,
                                double noise_sigma) {
  PhantomSpec spec;
  spec.id = id;
  spec.grid = grid;
  const double ext[3] = {static_cast<double>(grid.d), static_cast<double>(grid.h),
                         static_cast<double>(grid.w)};
  const double scale = std::min({ext[0], ext[1], ext[2]}) / 24.0;
  for (int a = 0; a < 3; ++a) {
    spec.radii_wt[a] = scale * rng.uniform(5.5, 8.0);
    spec.radii_tc[a] = spec.radii_wt[a] * rng.uniform(0.55, 0.7);
    spec.radii_et[a] = spec.radii_tc[a] * rng.uniform(0.55, 0.7);
    const double margin = spec.radii_wt[a] * 0.6;
    spec.center[a] = rng.uniform(margin, ext[a] - 1.0 - margin);
  }
  // Mean contrast per region (T1, T1ce, T2, FLAIR), jittered per patient.
  constexpr double base[4][4] = {
      {0.0, 0.0, 0.0, 0.0},    // background
      {-0.3, 0.2, 1.5, 2.0},   // edema: bright T2/FLAIR
      {-1.2, -0.4, 2.2, 0.8},  // necrosis: dark T1, very bright T2
      {0.3, 2.5, 1.0, 1.2},    // enhancing: bright T1ce
  };
  const double gain = rng.uniform(0.5, 3.0), offset = rng.uniform(-2.0, 2.0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t m = 0; m < 4; ++m)
      spec.intensity[r][m] = offset + gain * (base[r][m] + rng.uniform(-0.15, 0.15));
  spec.noise_sigma = noise_sigma * gain;
  spec.seed = rng.next_u64();
  return spec;
}

}  // namespace cunet

namespace cunet {

std::vector<VolumeSample> gen_phantom_cohort(std::size_t count, const Grid& grid, double noise_sigma,
                                             std::uint64_t seed) {
  Rng rng(seed);
  std::vector<VolumeSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "phantom%03zu", i);
    out.push_back(gen_phantom(random_phantom_spec(id, grid, rng, noise_sigma)));
  }
  return out;
}

}  // namespace cunet
