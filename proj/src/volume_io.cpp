#include "cunet/volume.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cunet/byteio.hpp"
#include "cunet/error.hpp"

namespace cunet {

namespace {

constexpr std::string_view kBvolMagic = "BVOL0001";

}  // namespace

std::string grid_str(const Grid& g) {
  std::ostringstream os;
  os << g.d << 'x' << g.h << 'x' << g.w;
  return os.str();
}

bool is_valid_label(std::uint8_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }

void VolumeSample::validate() const {
  if (grid.size() == 0) throw ContractError("volume " + id + ": empty grid");
  for (std::size_t c = 0; c < modalities.size(); ++c) {
    if (modalities[c].size() != grid.size()) {
      throw ContractError("volume " + id + ": modality " + std::to_string(c) + " has " +
                          std::to_string(modalities[c].size()) + " voxels, grid " +
                          grid_str(grid) + " needs " + std::to_string(grid.size()));
    }
    for (std::size_t i = 0; i < modalities[c].size(); ++i) {
      if (!std::isfinite(modalities[c][i])) {
        throw ContractError("volume " + id + ": non-finite value in modality " +
                            std::to_string(c) + " at voxel " + std::to_string(i));
      }
    }
  }
  if (labels) {
    if (labels->size() != grid.size()) {
      throw ContractError("volume " + id + ": label volume size mismatch");
    }
    for (std::size_t i = 0; i < labels->size(); ++i) {
      if (!is_valid_label((*labels)[i])) {
        throw ContractError("volume " + id + ": invalid label " + std::to_string((*labels)[i]) +
                            " at voxel " + std::to_string(i));
      }
    }
  }
}

Tensor VolumeSample::to_input() const {
  if (modalities.empty()) throw ContractError("volume " + id + ": no modalities");
  std::vector<double> data;
  data.reserve(modalities.size() * grid.size());
  for (const auto& m : modalities) data.insert(data.end(), m.begin(), m.end());
  return Tensor::from_data({1, modalities.size(), grid.d, grid.h, grid.w}, std::move(data));
}

std::vector<std::uint8_t> encode_bvol(const VolumeSample& sample) {
  sample.validate();
  byteio::Writer w;
  w.text(kBvolMagic);
  w.u32(static_cast<std::uint32_t>(sample.modalities.size()));
  w.u8(sample.labels ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(sample.grid.d));
  w.u32(static_cast<std::uint32_t>(sample.grid.h));
  w.u32(static_cast<std::uint32_t>(sample.grid.w));
  for (const auto& m : sample.modalities)
    for (double v : m) w.f64(v);
  if (sample.labels) w.bytes(*sample.labels);
  return w.take();
}

VolumeSample decode_bvol(const std::vector<std::uint8_t>& bytes, const std::string& id) {
  byteio::Reader r(bytes);
  const std::string magic = r.text(kBvolMagic.size());
  if (magic != kBvolMagic) throw FormatError("BVOL: bad magic (expected BVOL0001)");
  VolumeSample s;
  s.id = id;
  const std::uint32_t channels = r.u32();
  const std::uint8_t has_labels = r.u8();
  if (has_labels > 1) throw FormatError("BVOL: label flag must be 0 or 1, got " +
                                        std::to_string(has_labels));
  s.grid.d = r.u32();
  s.grid.h = r.u32();
  s.grid.w = r.u32();
  if (s.grid.size() == 0) throw FormatError("BVOL: zero extent in " + grid_str(s.grid));
  const std::size_t n = s.grid.size();
  const std::size_t expected = channels * n * 8 + (has_labels ? n : 0);
  if (r.remaining() < expected) {
    throw FormatError("unexpected EOF at byte " + std::to_string(bytes.size()) + " (payload needs " +
                      std::to_string(r.position() + expected) + " bytes)");
  }
  if (r.remaining() > expected) throw FormatError("BVOL: trailing bytes after payload");
  s.modalities.assign(channels, std::vector<double>(n));
  for (auto& m : s.modalities)
    for (double& v : m) {
      v = r.f64();
      if (!std::isfinite(v)) throw FormatError("BVOL: non-finite modality value");
    }
  if (has_labels) {
    std::vector<std::uint8_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = r.u8();
      if (!is_valid_label(labels[i])) {
        throw FormatError("BVOL: invalid label value " + std::to_string(labels[i]) +
                          " at voxel " + std::to_string(i) + " (allowed 0,1,2,4)");
      }
    }
    s.labels = std::move(labels);
  }
  return s;
}

void save_volume(const VolumeSample& sample, const std::filesystem::path& path) {
  byteio::write_file(path, encode_bvol(sample));
}

VolumeSample load_volume(const std::filesystem::path& path, const std::string& id) {
  return decode_bvol(byteio::read_file(path), id.empty() ? path.stem().string() : id);
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw FormatError("manifest " + path.string() + ": expected a JSON list");
  std::vector<ManifestEntry> out;
  const auto dir = path.parent_path();
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("id") || !e.contains("path") || e.size() != 2 ||
        !e["id"].is_string() || !e["path"].is_string()) {
      throw FormatError("manifest " + path.string() + ": entries must be {\"id\", \"path\"}");
    }
    std::filesystem::path p = e["path"].get<std::string>();
    if (p.empty()) throw FormatError("manifest " + path.string() + ": empty path for " + e["id"].get<std::string>());
    if (p.is_relative()) p = dir / p;
    out.push_back({e["id"].get<std::string>(), p});
  }
  return out;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  const auto dir = path.parent_path();
  for (const auto& e : entries) {
    std::filesystem::path p = e.path;
    // Relative entries are already relative to the manifest directory.
    if (p.is_absolute()) p = std::filesystem::relative(p, std::filesystem::absolute(dir));
    j.push_back({{"id", e.id}, {"path", p.generic_string()}});
  }
  const std::string text = j.dump(2) + "\n";
  byteio::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace cunet
