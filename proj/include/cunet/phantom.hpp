#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cunet/rng.hpp"
#include "cunet/volume.hpp"

namespace cunet {

// Region order used for intensity tables.
enum PhantomRegion : std::size_t { kBackground = 0, kEdema = 1, kNecrosis = 2, kEnhancing = 3 };

// Three concentric axis-aligned ellipsoids sharing one center. A voxel at
// integer coordinates p belongs to a shell when sum(((p - center) / radii)^2) <= 1.
// Innermost wins: ET -> 4, else TC -> 1, else WT -> 2, else 0.
struct PhantomSpec {
  std::string id = "phantom";
  Grid grid{24, 24, 24};
  std::array<double, 3> center{11.5, 11.5, 11.5};
  std::array<double, 3> radii_wt{7.0, 7.0, 7.0};
  std::array<double, 3> radii_tc{4.5, 4.5, 4.5};
  std::array<double, 3> radii_et{2.5, 2.5, 2.5};
  // intensity[region][modality]
  std::array<std::array<double, 4>, 4> intensity{};
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  // Throws when radii are non-positive or the shells are not nested.
  void validate() const;
};

VolumeSample gen_phantom(const PhantomSpec& spec);

// Randomized tumor geometry and contrast for a synthetic cohort member.
PhantomSpec random_phantom_spec(const std::string& id, const Grid& grid, Rng& rng,
                                double noise_sigma = 0.25);

// `count` phantoms with ids phantom000, phantom001, ... drawn from one seed.
std::vector<VolumeSample> gen_phantom_cohort(std::size_t count, const Grid& grid, double noise_sigma,
                                             std::uint64_t seed);

}  // namespace cunet
