#pragma once

// Reference implementations used as test oracles. They are deliberately naive
// and share no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace oracle {

// Direct-sum 3D convolution. Shapes: x [b,ci,d,h,w], k [co,ci,kd,kh,kw].
struct ConvResult {
  std::array<std::size_t, 5> shape{};
  std::vector<double> data;
};

inline ConvResult conv3d(const std::vector<double>& x, const std::array<std::size_t, 5>& xs,
                         const std::vector<double>& k, const std::array<std::size_t, 5>& ks,
                         const std::vector<double>& bias, std::size_t stride, std::size_t dil,
                         std::size_t pad) {
  const long D = static_cast<long>(xs[2]), H = static_cast<long>(xs[3]), W = static_cast<long>(xs[4]);
  auto out_ext = [&](std::size_t n, std::size_t kk) {
    return (n + 2 * pad - dil * (kk - 1) - 1) / stride + 1;
  };
  ConvResult r;
  r.shape = {xs[0], ks[0], out_ext(xs[2], ks[2]), out_ext(xs[3], ks[3]), out_ext(xs[4], ks[4])};
  r.data.assign(r.shape[0] * r.shape[1] * r.shape[2] * r.shape[3] * r.shape[4], 0.0);
  std::size_t o = 0;
  for (std::size_t b = 0; b < r.shape[0]; ++b)
    for (std::size_t co = 0; co < r.shape[1]; ++co)
      for (std::size_t z = 0; z < r.shape[2]; ++z)
        for (std::size_t y = 0; y < r.shape[3]; ++y)
          for (std::size_t xx = 0; xx < r.shape[4]; ++xx, ++o) {
            double acc = bias[co];
            for (std::size_t ci = 0; ci < xs[1]; ++ci)
              for (std::size_t a = 0; a < ks[2]; ++a)
                for (std::size_t c = 0; c < ks[3]; ++c)
                  for (std::size_t e = 0; e < ks[4]; ++e) {
                    const long iz = static_cast<long>(z * stride + a * dil) - static_cast<long>(pad);
                    const long iy = static_cast<long>(y * stride + c * dil) - static_cast<long>(pad);
                    const long ix = static_cast<long>(xx * stride + e * dil) - static_cast<long>(pad);
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                    const double xv = x[(((b * xs[1] + ci) * D + iz) * H + iy) * W + ix];
                    const double kv = k[(((co * ks[1] + ci) * ks[2] + a) * ks[3] + c) * ks[4] + e];
                    acc += xv * kv;
                  }
            r.data[o] = acc;
          }
  return r;
}

// Dice loss evaluated term by term over a flat [D][voxels] layout.
inline double dice_loss(const std::vector<std::vector<double>>& p,
                        const std::vector<std::vector<double>>& t, double smooth) {
  double total = 0.0;
  for (std::size_t d = 0; d < p.size(); ++d) {
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (std::size_t j = 0; j < p[d].size(); ++j) {
      inter += p[d][j] * t[d][j];
      sp += p[d][j];
      st += t[d][j];
    }
    if (sp + st + smooth > 0.0) total += inter / (sp + st + smooth);
  }
  return -2.0 / static_cast<double>(p.size()) * total;
}

// Parameter count of the dense encoder-decoder, tallied layer by layer from
// the wiring description: 3^3 conv = co*ci*27 + co, 1^3 conv = co*ci + co.
inline std::size_t conv3(std::size_t ci, std::size_t co) { return co * ci * 27 + co; }
inline std::size_t conv1(std::size_t ci, std::size_t co) { return co * ci + co; }

inline std::size_t rib_params(std::size_t in, std::size_t out) {
  // branch inputs: in, in + out, in + 2*out
  std::size_t n = conv3(in, out) + conv3(in + out, out) + conv3(in + 2 * out, out);
  if (in != out) n += conv1(in, out);
  return n;
}

inline std::size_t dense_params(std::size_t in, std::size_t out) {
  const std::size_t half = in / 2;
  return conv3(in, half) + conv3(in + half, half) + conv3(in + 2 * half, out);
}

inline std::size_t network_params(std::size_t base, std::size_t depth, std::size_t modalities = 4,
                                  std::size_t classes = 4) {
  std::size_t n = conv3(modalities, base / 2) + rib_params(modalities, base / 2);
  std::vector<std::size_t> widths;
  std::size_t c = base;
  for (std::size_t l = 0; l < depth; ++l) {
    n += dense_params(c, 2 * c);
    c *= 2;
    widths.push_back(c);
  }
  for (std::size_t l = depth - 1; l-- > 0;) {
    n += rib_params(widths[l + 1], widths[l]);
    n += dense_params(widths[l], widths[l]);
  }
  return n + conv1(widths[0], classes);
}

// Connected components by repeated min-label propagation until nothing
// changes. Returns a label per voxel (0 = background, else component id
// starting at 1 in order of first voxel).
inline std::vector<std::size_t> propagate_labels(const std::vector<std::uint8_t>& mask, std::size_t d,
                                                 std::size_t h, std::size_t w, int connectivity) {
  const std::size_t n = d * h * w;
  std::vector<std::size_t> lab(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) lab[i] = i + 1;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t i = (z * h + y) * w + x;
          if (!lab[i]) continue;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (manhattan == 0 || (connectivity == 6 && manhattan > 1)) continue;
                const long zz = static_cast<long>(z) + dz, yy = static_cast<long>(y) + dy,
                           xx = static_cast<long>(x) + dx;
                if (zz < 0 || yy < 0 || xx < 0 || zz >= static_cast<long>(d) ||
                    yy >= static_cast<long>(h) || xx >= static_cast<long>(w))
                  continue;
                const std::size_t j = (static_cast<std::size_t>(zz) * h + static_cast<std::size_t>(yy)) * w +
                                      static_cast<std::size_t>(xx);
                if (lab[j] && lab[j] < lab[i]) {
                  lab[i] = lab[j];
                  changed = true;
                }
              }
        }
  }
  // Renumber by first appearance.
  std::vector<std::size_t> remap(n + 1, 0);
  std::size_t next = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (!lab[i]) continue;
    if (!remap[lab[i]]) remap[lab[i]] = next++;
    lab[i] = remap[lab[i]];
  }
  return lab;
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Counts count(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] && truth[i]) ++c.tp;
    else if (pred[i]) ++c.fp;
    else if (truth[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Number of integer grid points inside an axis-aligned ellipsoid, clipped to
// the grid: for each (z, y) row the x interval is solved in closed form.
inline std::size_t ellipsoid_voxels(const std::array<double, 3>& c, const std::array<double, 3>& r,
                                    std::size_t d, std::size_t h, std::size_t w) {
  std::size_t total = 0;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y) {
      const double qz = (static_cast<double>(z) - c[0]) / r[0];
      const double qy = (static_cast<double>(y) - c[1]) / r[1];
      const double rest = 1.0 - qz * qz - qy * qy;
      if (rest < 0.0) continue;
      const double half = r[2] * std::sqrt(rest);
      const long lo = std::max(0L, static_cast<long>(std::ceil(c[2] - half)));
      const long hi = std::min(static_cast<long>(w) - 1, static_cast<long>(std::floor(c[2] + half)));
      if (hi >= lo) total += static_cast<std::size_t>(hi - lo + 1);
    }
  return total;
}

// Scalar Adam with bias correction.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double x, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mh = m / (1.0 - std::pow(b1, t));
    const double vh = v / (1.0 - std::pow(b2, t));
    return x - lr * mh / (std::sqrt(vh) + eps);
  }
};

// Argmax with ties to the lower index, then raw label decode.
inline std::uint8_t argmax_label(const std::vector<double>& p) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < p.size(); ++k)
    if (p[k] > p[best]) best = k;
  static const std::uint8_t raw[4] = {0, 1, 2, 4};
  return raw[best];
}

}  // namespace oracle
