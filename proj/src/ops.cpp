#include "cunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cunet/error.hpp"
#include "cunet/parallel.hpp"

namespace cunet::ops {

namespace {

constexpr const char* kAxisNames[3] = {"depth", "height", "width"};

std::span<double> grad_of(Tensor t) { return t.grad_buffer(); }

void require_rank5(const Tensor& t, const char* op, const char* what) {
  if (t.rank() != 5) {
    throw ContractError(std::string(op) + ": " + what + " must be order-5 [b,c,d,h,w], got " +
                        shape_str(t.shape()));
  }
}

struct Vol {
  std::size_t b, c, d, h, w;
  std::size_t spatial() const { return d * h * w; }
};

Vol vol_of(const Tensor& t) {
  const auto& s = t.shape();
  return {s[0], s[1], s[2], s[3], s[4]};
}

// Precomputed overlap of one kernel tap with the output along one axis:
// outputs [lo, hi) read input index o*stride + offset.
struct TapRange {
  std::size_t lo = 0, hi = 0;
  std::ptrdiff_t offset = 0;
};

TapRange tap_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t dilation,
                   std::size_t pad, std::size_t k) {
  TapRange r;
  r.offset = static_cast<std::ptrdiff_t>(k * dilation) - static_cast<std::ptrdiff_t>(pad);
  // Need 0 <= o*stride + offset < in.
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = 0;
  if (r.offset < 0) lo = (-r.offset + s - 1) / s;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in) - 1 - r.offset;
  std::ptrdiff_t hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  if (hi < lo) hi = lo;
  r.lo = static_cast<std::size_t>(lo);
  r.hi = static_cast<std::size_t>(hi);
  return r;
}

struct ConvGeom {
  Vol in, out;
  std::size_t kd, kh, kw;
  Triple stride;
  std::vector<TapRange> rd, rh, rw;  // indexed by kernel tap along each axis
};

ConvGeom conv_geom(const Tensor& input, const Tensor& kernel, const Conv3dOptions& o) {
  const Vol in = vol_of(input);
  const auto& ks = kernel.shape();
  ConvGeom g;
  g.in = in;
  g.kd = ks[2];
  g.kh = ks[3];
  g.kw = ks[4];
  g.stride = o.stride;
  const std::size_t ext[3] = {in.d, in.h, in.w};
  const std::size_t kern[3] = {g.kd, g.kh, g.kw};
  std::size_t outs[3];
  for (int a = 0; a < 3; ++a) {
    const std::size_t dilated = o.dilation[a] * (kern[a] - 1) + 1;
    if (ext[a] + 2 * o.padding[a] < dilated) {
      throw ContractError("conv3d: padded " + std::string(kAxisNames[a]) + " extent " +
                          std::to_string(ext[a] + 2 * o.padding[a]) +
                          " is smaller than the dilated kernel extent " + std::to_string(dilated));
    }
    outs[a] = conv_out_extent(ext[a], kern[a], o.stride[a], o.dilation[a], o.padding[a]);
    if (outs[a] == 0) throw ContractError("conv3d: empty output");
  }
  g.out = {in.b, ks[0], outs[0], outs[1], outs[2]};
  for (std::size_t k = 0; k < g.kd; ++k)
    g.rd.push_back(tap_range(in.d, outs[0], o.stride[0], o.dilation[0], o.padding[0], k));
  for (std::size_t k = 0; k < g.kh; ++k)
    g.rh.push_back(tap_range(in.h, outs[1], o.stride[1], o.dilation[1], o.padding[1], k));
  for (std::size_t k = 0; k < g.kw; ++k)
    g.rw.push_back(tap_range(in.w, outs[2], o.stride[2], o.dilation[2], o.padding[2], k));
  return g;
}

// Visits every (output row, input row, width range) pair touched by one
// kernel tap. `fn(out_row_offset, in_row_offset, TapRange w)`.
template <typename Fn>
void for_each_tap_row(const ConvGeom& g, std::size_t kd, std::size_t kh, Fn&& fn) {
  const TapRange& rd = g.rd[kd];
  const TapRange& rh = g.rh[kh];
  for (std::size_t od = rd.lo; od < rd.hi; ++od) {
    const std::size_t id = od * g.stride[0] + rd.offset;
    for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
      const std::size_t ih = oh * g.stride[1] + rh.offset;
      fn((od * g.out.h + oh) * g.out.w, (id * g.in.h + ih) * g.in.w);
    }
  }
}

void check_finite_inputs(const Tensor& t, const char* op) {
  if (!finite_checks()) return;
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

Conv3dOptions Conv3dOptions::same(std::size_t kernel, std::size_t dilation) {
  Conv3dOptions o;
  o.dilation = {dilation, dilation, dilation};
  const std::size_t pad = dilation * (kernel - 1) / 2;
  o.padding = {pad, pad, pad};
  return o;
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t dilation, std::size_t pad) {
  const std::size_t dilated = dilation * (kernel - 1) + 1;
  if (in + 2 * pad < dilated) return 0;
  return (in + 2 * pad - dilated) / stride + 1;
}

Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv3dOptions& opts) {
  require_rank5(input, "conv3d", "input");
  require_rank5(kernel, "conv3d", "kernel");
  if (kernel.dim(1) != input.dim(1)) {
    throw ContractError("conv3d: channel axis mismatch, input has " +
                        std::to_string(input.dim(1)) + " channels but kernel expects " +
                        std::to_string(kernel.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
    throw ContractError("conv3d: bias shape " + shape_str(bias.shape()) +
                        " does not match output channels " + std::to_string(kernel.dim(0)));
  }
  for (int a = 0; a < 3; ++a) {
    if (opts.stride[a] == 0 || opts.dilation[a] == 0) {
      throw ContractError("conv3d: stride and dilation must be positive along " +
                          std::string(kAxisNames[a]));
    }
  }
  check_finite_inputs(input, "conv3d");
  const ConvGeom g = conv_geom(input, kernel, opts);
  const std::size_t ci_n = g.in.c, co_n = g.out.c;
  const std::size_t ktaps = g.kd * g.kh * g.kw;
  const std::size_t in_sp = g.in.spatial(), out_sp = g.out.spatial();

  std::vector<double> out(g.out.b * co_n * out_sp);
  {
    const double* x = input.data().data();
    const double* k = kernel.data().data();
    const double* bb = bias.data().data();
    const std::size_t sw = g.stride[2];
    parallel_for(g.out.b * co_n, [&](std::size_t job) {
      const std::size_t b = job / co_n, co = job % co_n;
      double* y = out.data() + job * out_sp;
      std::fill(y, y + out_sp, bb[co]);
      for (std::size_t ci = 0; ci < ci_n; ++ci) {
        const double* xin = x + (b * ci_n + ci) * in_sp;
        const double* kk = k + (co * ci_n + ci) * ktaps;
        for (std::size_t kd = 0; kd < g.kd; ++kd)
          for (std::size_t kh = 0; kh < g.kh; ++kh)
            for (std::size_t kw = 0; kw < g.kw; ++kw) {
              const double wv = kk[(kd * g.kh + kh) * g.kw + kw];
              const TapRange& rw = g.rw[kw];
              for_each_tap_row(g, kd, kh, [&](std::size_t orow, std::size_t irow) {
                double* yr = y + orow;
                const double* xr = xin + irow + rw.offset;
                if (sw == 1) {
                  for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) yr[ow] += wv * xr[ow];
                } else {
                  for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) yr[ow] += wv * xr[ow * sw];
                }
              });
            }
      }
    });
  }

  const Shape out_shape{g.out.b, co_n, g.out.d, g.out.h, g.out.w};
  return Tensor::make_result(
      out_shape, std::move(out), "conv3d", {input, kernel, bias},
      [input, kernel, bias, g](std::span<const double> gy, std::span<const double>) {
        const std::size_t ci_n = g.in.c, co_n = g.out.c, nb = g.out.b;
        const std::size_t ktaps = g.kd * g.kh * g.kw;
        const std::size_t in_sp = g.in.spatial(), out_sp = g.out.spatial();
        const std::size_t sw = g.stride[2];
        const double* x = input.data().data();
        const double* k = kernel.data().data();
        if (bias.requires_grad()) {
          auto gb = grad_of(bias);
          for (std::size_t co = 0; co < co_n; ++co) {
            double acc = 0.0;
            for (std::size_t b = 0; b < nb; ++b) {
              const double* gr = gy.data() + (b * co_n + co) * out_sp;
              for (std::size_t i = 0; i < out_sp; ++i) acc += gr[i];
            }
            gb[co] += acc;
          }
        }
        if (kernel.requires_grad()) {
          double* gk = grad_of(kernel).data();
          parallel_for(co_n, [&](std::size_t co) {
            for (std::size_t ci = 0; ci < ci_n; ++ci)
              for (std::size_t kd = 0; kd < g.kd; ++kd)
                for (std::size_t kh = 0; kh < g.kh; ++kh)
                  for (std::size_t kw = 0; kw < g.kw; ++kw) {
                    const TapRange& rw = g.rw[kw];
                    double acc = 0.0;
                    for (std::size_t b = 0; b < nb; ++b) {
                      const double* gyb = gy.data() + (b * co_n + co) * out_sp;
                      const double* xin = x + (b * ci_n + ci) * in_sp + rw.offset;
                      for_each_tap_row(g, kd, kh, [&](std::size_t orow, std::size_t irow) {
                        const double* gr = gyb + orow;
                        const double* xr = xin + irow;
                        if (sw == 1) {
                          for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) acc += gr[ow] * xr[ow];
                        } else {
                          for (std::size_t ow = rw.lo; ow < rw.hi; ++ow)
                            acc += gr[ow] * xr[ow * sw];
                        }
                      });
                    }
                    gk[(co * ci_n + ci) * ktaps + (kd * g.kh + kh) * g.kw + kw] += acc;
                  }
          });
        }
        if (input.requires_grad()) {
          double* gx = grad_of(input).data();
          parallel_for(nb * ci_n, [&](std::size_t job) {
            const std::size_t b = job / ci_n, ci = job % ci_n;
            double* gxin = gx + job * in_sp;
            for (std::size_t co = 0; co < co_n; ++co) {
              const double* gyb = gy.data() + (b * co_n + co) * out_sp;
              const double* kk = k + (co * ci_n + ci) * ktaps;
              for (std::size_t kd = 0; kd < g.kd; ++kd)
                for (std::size_t kh = 0; kh < g.kh; ++kh)
                  for (std::size_t kw = 0; kw < g.kw; ++kw) {
                    const double wv = kk[(kd * g.kh + kh) * g.kw + kw];
                    const TapRange& rw = g.rw[kw];
                    for_each_tap_row(g, kd, kh, [&](std::size_t orow, std::size_t irow) {
                      const double* gr = gyb + orow;
                      double* xr = gxin + irow + rw.offset;
                      if (sw == 1) {
                        for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) xr[ow] += wv * gr[ow];
                      } else {
                        for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) xr[ow * sw] += wv * gr[ow];
                      }
                    });
                  }
            }
          });
        }
      });
}

Tensor instance_norm(const Tensor& input, double eps) {
  require_rank5(input, "instance_norm", "input");
  if (!(eps > 0.0)) throw ContractError("instance_norm: eps must be positive");
  const Vol v = vol_of(input);
  const std::size_t n = v.spatial();
  const std::size_t slices = v.b * v.c;
  std::vector<double> out(input.numel());
  std::vector<double> inv_std(slices);
  const double* x = input.data().data();
  parallel_for(slices, [&](std::size_t s) {
    const double* xs = x + s * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xs[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xs[i] - mean) * (xs[i] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[s] = is;
    double* ys = out.data() + s * n;
    for (std::size_t i = 0; i < n; ++i) ys[i] = (xs[i] - mean) * is;
  });
  return Tensor::make_result(
      input.shape(), std::move(out), "instance_norm", {input},
      [input, inv_std = std::move(inv_std), n, slices](std::span<const double> gy,
                                                       std::span<const double> y) {
        double* gx = grad_of(input).data();
        parallel_for(slices, [&](std::size_t s) {
          const double* g = gy.data() + s * n;
          const double* ys = y.data() + s * n;
          double mg = 0.0, mgy = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            mg += g[i];
            mgy += g[i] * ys[i];
          }
          mg /= static_cast<double>(n);
          mgy /= static_cast<double>(n);
          double* gxs = gx + s * n;
          for (std::size_t i = 0; i < n; ++i) gxs[i] += inv_std[s] * (g[i] - mg - ys[i] * mgy);
        });
      });
}

Tensor relu(const Tensor& input) {
  std::vector<double> out(input.data().begin(), input.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::make_result(input.shape(), std::move(out), "relu", {input},
                             [input](std::span<const double> gy, std::span<const double>) {
                               auto gx = grad_of(input);
                               const auto x = input.data();
                               for (std::size_t i = 0; i < gx.size(); ++i)
                                 if (x[i] > 0.0) gx[i] += gy[i];
                             });
}

Tensor dropout(const Tensor& input, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return input;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(input.numel());
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  std::vector<double> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return Tensor::make_result(
      input.shape(), std::move(out), "dropout", {input},
      [input, mask = std::move(mask)](std::span<const double> gy, std::span<const double>) {
        auto gx = grad_of(input);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * mask[i];
      });
}

namespace {

// Source taps for align-corners=false factor-2 upsampling along one axis.
struct Lerp {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<Lerp> upsample_taps(std::size_t in) {
  std::vector<Lerp> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

}  // namespace

Tensor upsample3d_trilinear(const Tensor& input) {
  require_rank5(input, "upsample3d_trilinear", "input");
  const Vol v = vol_of(input);
  const auto td = upsample_taps(v.d), th = upsample_taps(v.h), tw = upsample_taps(v.w);
  const Vol o{v.b, v.c, 2 * v.d, 2 * v.h, 2 * v.w};
  std::vector<double> out(o.b * o.c * o.spatial());
  const double* x = input.data().data();
  parallel_for(v.b * v.c, [&](std::size_t s) {
    const double* xs = x + s * v.spatial();
    double* ys = out.data() + s * o.spatial();
    for (std::size_t od = 0; od < o.d; ++od)
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          const Lerp &a = td[od], &b = th[oh], &c = tw[ow];
          auto at = [&](std::size_t d, std::size_t h, std::size_t w) {
            return xs[(d * v.h + h) * v.w + w];
          };
          ys[(od * o.h + oh) * o.w + ow] =
              a.w0 * (b.w0 * (c.w0 * at(a.i0, b.i0, c.i0) + c.w1 * at(a.i0, b.i0, c.i1)) +
                      b.w1 * (c.w0 * at(a.i0, b.i1, c.i0) + c.w1 * at(a.i0, b.i1, c.i1))) +
              a.w1 * (b.w0 * (c.w0 * at(a.i1, b.i0, c.i0) + c.w1 * at(a.i1, b.i0, c.i1)) +
                      b.w1 * (c.w0 * at(a.i1, b.i1, c.i0) + c.w1 * at(a.i1, b.i1, c.i1)));
        }
  });
  return Tensor::make_result(
      {o.b, o.c, o.d, o.h, o.w}, std::move(out), "upsample3d_trilinear", {input},
      [input, v, o, td, th, tw](std::span<const double> gy, std::span<const double>) {
        double* gx = grad_of(input).data();
        parallel_for(v.b * v.c, [&](std::size_t s) {
          double* gxs = gx + s * v.spatial();
          const double* gys = gy.data() + s * o.spatial();
          for (std::size_t od = 0; od < o.d; ++od)
            for (std::size_t oh = 0; oh < o.h; ++oh)
              for (std::size_t ow = 0; ow < o.w; ++ow) {
                const double g = gys[(od * o.h + oh) * o.w + ow];
                const Lerp &a = td[od], &b = th[oh], &c = tw[ow];
                const std::size_t ds[2] = {a.i0, a.i1}, hs[2] = {b.i0, b.i1},
                                  ws[2] = {c.i0, c.i1};
                const double wd[2] = {a.w0, a.w1}, wh[2] = {b.w0, b.w1}, ww[2] = {c.w0, c.w1};
                for (int i = 0; i < 2; ++i)
                  for (int j = 0; j < 2; ++j)
                    for (int k = 0; k < 2; ++k)
                      gxs[(ds[i] * v.h + hs[j]) * v.w + ws[k]] += g * wd[i] * wh[j] * ww[k];
              }
        });
      });
}

Tensor maxpool3d(const Tensor& input) {
  require_rank5(input, "maxpool3d", "input");
  const Vol v = vol_of(input);
  const std::size_t ext[3] = {v.d, v.h, v.w};
  for (int a = 0; a < 3; ++a) {
    if (ext[a] % 2 != 0) {
      throw ContractError("maxpool3d: odd " + std::string(kAxisNames[a]) + " extent " +
                          std::to_string(ext[a]));
    }
  }
  const Vol o{v.b, v.c, v.d / 2, v.h / 2, v.w / 2};
  std::vector<double> out(o.b * o.c * o.spatial());
  std::vector<std::size_t> argmax(out.size());
  const double* x = input.data().data();
  parallel_for(v.b * v.c, [&](std::size_t s) {
    const double* xs = x + s * v.spatial();
    for (std::size_t od = 0; od < o.d; ++od)
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          bool first = true;
          for (std::size_t dz = 0; dz < 2; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t i =
                    ((2 * od + dz) * v.h + (2 * oh + dy)) * v.w + (2 * ow + dx);
                if (first || xs[i] > best) {
                  best = xs[i];
                  best_i = i;
                  first = false;
                }
              }
          const std::size_t oi = s * o.spatial() + (od * o.h + oh) * o.w + ow;
          out[oi] = best;
          argmax[oi] = s * v.spatial() + best_i;
        }
  });
  return Tensor::make_result(
      {o.b, o.c, o.d, o.h, o.w}, std::move(out), "maxpool3d", {input},
      [input, argmax = std::move(argmax)](std::span<const double> gy, std::span<const double>) {
        auto gx = grad_of(input);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
      });
}

Tensor concat(const std::vector<Tensor>& tensors) {
  if (tensors.empty()) throw ContractError("concat: no inputs");
  for (const auto& t : tensors) require_rank5(t, "concat", "input");
  const Shape& s0 = tensors[0].shape();
  std::size_t channels = 0;
  for (const auto& t : tensors) {
    const Shape& s = t.shape();
    for (std::size_t a : {0, 2, 3, 4}) {
      if (s[a] != s0[a]) {
        throw ContractError("concat: axis " + std::to_string(a) + " mismatch, " + shape_str(s) +
                            " vs " + shape_str(s0));
      }
    }
    channels += s[1];
  }
  const std::size_t nb = s0[0], sp = s0[2] * s0[3] * s0[4];
  std::vector<double> out(nb * channels * sp);
  for (std::size_t b = 0; b < nb; ++b) {
    double* dst = out.data() + b * channels * sp;
    for (const auto& t : tensors) {
      const std::size_t block = t.dim(1) * sp;
      const double* src = t.data().data() + b * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  Shape shape = s0;
  shape[1] = channels;
  return Tensor::make_result(
      shape, std::move(out), "concat", tensors,
      [tensors, nb, channels, sp](std::span<const double> gy, std::span<const double>) {
        std::size_t c0 = 0;
        for (const auto& t : tensors) {
          const std::size_t c = t.dim(1);
          if (t.requires_grad()) {
            auto gx = grad_of(t);
            for (std::size_t b = 0; b < nb; ++b) {
              const double* src = gy.data() + (b * channels + c0) * sp;
              double* dst = gx.data() + b * c * sp;
              for (std::size_t i = 0; i < c * sp; ++i) dst[i] += src[i];
            }
          }
          c0 += c;
        }
      });
}

Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t count) {
  require_rank5(input, "slice_channels", "input");
  const Vol v = vol_of(input);
  if (count == 0 || begin + count > v.c) {
    throw ContractError("slice_channels: range [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") outside " + std::to_string(v.c) +
                        " channels");
  }
  const std::size_t sp = v.spatial();
  std::vector<double> out(v.b * count * sp);
  for (std::size_t b = 0; b < v.b; ++b) {
    const double* src = input.data().data() + (b * v.c + begin) * sp;
    std::copy(src, src + count * sp, out.data() + b * count * sp);
  }
  return Tensor::make_result(
      {v.b, count, v.d, v.h, v.w}, std::move(out), "slice_channels", {input},
      [input, v, begin, count, sp](std::span<const double> gy, std::span<const double>) {
        auto gx = grad_of(input);
        for (std::size_t b = 0; b < v.b; ++b) {
          double* dst = gx.data() + (b * v.c + begin) * sp;
          const double* src = gy.data() + b * count * sp;
          for (std::size_t i = 0; i < count * sp; ++i) dst[i] += src[i];
        }
      });
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b},
                             [a, b](std::span<const double> gy, std::span<const double>) {
                               for (const Tensor& t : {a, b}) {
                                 if (!t.requires_grad()) continue;
                                 auto g = grad_of(t);
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b},
                             [a, b](std::span<const double> gy, std::span<const double>) {
                               if (a.requires_grad()) {
                                 auto g = grad_of(a);
                                 const auto y = b.data();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * y[i];
                               }
                               if (b.requires_grad()) {
                                 auto g = grad_of(b);
                                 const auto x = a.data();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * x[i];
                               }
                             });
}

Tensor sum(const Tensor& input) {
  double acc = 0.0;
  for (double v : input.data()) acc += v;
  return Tensor::make_result({1}, {acc}, "sum", {input},
                             [input](std::span<const double> gy, std::span<const double>) {
                               auto g = grad_of(input);
                               for (double& v : g) v += gy[0];
                             });
}

Tensor softmax_channels(const Tensor& input) {
  require_rank5(input, "softmax_channels", "input");
  const Vol v = vol_of(input);
  const std::size_t sp = v.spatial();
  std::vector<double> out(input.numel());
  const double* x = input.data().data();
  parallel_for(v.b, [&](std::size_t b) {
    const double* xb = x + b * v.c * sp;
    double* yb = out.data() + b * v.c * sp;
    for (std::size_t i = 0; i < sp; ++i) {
      double m = xb[i];
      for (std::size_t c = 1; c < v.c; ++c) m = std::max(m, xb[c * sp + i]);
      double z = 0.0;
      for (std::size_t c = 0; c < v.c; ++c) {
        const double e = std::exp(xb[c * sp + i] - m);
        yb[c * sp + i] = e;
        z += e;
      }
      for (std::size_t c = 0; c < v.c; ++c) yb[c * sp + i] /= z;
    }
  });
  return Tensor::make_result(
      input.shape(), std::move(out), "softmax_channels", {input},
      [input, v, sp](std::span<const double> gy, std::span<const double> y) {
        auto gx = grad_of(input);
        for (std::size_t b = 0; b < v.b; ++b) {
          const std::size_t base = b * v.c * sp;
          for (std::size_t i = 0; i < sp; ++i) {
            double dot = 0.0;
            for (std::size_t c = 0; c < v.c; ++c) dot += gy[base + c * sp + i] * y[base + c * sp + i];
            for (std::size_t c = 0; c < v.c; ++c) {
              const std::size_t j = base + c * sp + i;
              gx[j] += y[j] * (gy[j] - dot);
            }
          }
        }
      });
}

}  // namespace cunet::ops
