#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cunet/tensor.hpp"

namespace cunet {

// Voxel grid extents (depth, height, width); row-major with width fastest.
struct Grid {
  std::size_t d = 0, h = 0, w = 0;

  std::size_t size() const { return d * h * w; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * h + y) * w + x; }
  bool operator==(const Grid&) const = default;
};

std::string grid_str(const Grid& g);

// Modality order: T1, T1ce, T2, FLAIR.
constexpr std::size_t kModalities = 4;

// One patient (or one patch of one): modality volumes plus optional labels
// over {0,1,2,4}.
struct VolumeSample {
  std::string id;
  Grid grid;
  std::vector<std::vector<double>> modalities;
  std::optional<std::vector<std::uint8_t>> labels;
  std::vector<std::string> flags;

  // Shape agreement, finiteness of modalities, label values.
  void validate() const;
  // Modalities as a [1, channels, d, h, w] tensor.
  Tensor to_input() const;
};

bool is_valid_label(std::uint8_t v);

// "BVOL0001" container; see docs/formats.md. A sample may carry zero
// modality channels (label-only volumes).
std::vector<std::uint8_t> encode_bvol(const VolumeSample& sample);
VolumeSample decode_bvol(const std::vector<std::uint8_t>& bytes, const std::string& id = {});
void save_volume(const VolumeSample& sample, const std::filesystem::path& path);
VolumeSample load_volume(const std::filesystem::path& path, const std::string& id = {});

struct ManifestEntry {
  std::string id;
  std::filesystem::path path;  // resolved against the manifest directory
};

// JSON list of {"id", "path"}; relative paths are relative to the manifest.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

}  // namespace cunet
