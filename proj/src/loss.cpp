#include "cunet/loss.hpp"

#include <string>
#include <vector>

#include "cunet/error.hpp"

namespace cunet {

namespace {

void check_one_hot(const Tensor& truth) {
  const auto& s = truth.shape();
  const std::size_t nb = s[0], nc = s[1], sp = shape_numel(s) / (nb * nc);
  const auto t = truth.data();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t i = 0; i < sp; ++i) {
      int ones = 0;
      for (std::size_t c = 0; c < nc; ++c) {
        const double v = t[(b * nc + c) * sp + i];
        if (v == 1.0) {
          ++ones;
        } else if (v != 0.0) {
          throw ContractError("dice_loss: truth is not one-hot at voxel " + std::to_string(i));
        }
      }
      if (ones != 1) {
        throw ContractError("dice_loss: truth has " + std::to_string(ones) +
                            " hot channels at voxel " + std::to_string(i));
      }
    }
  }
}

}  // namespace

Tensor dice_loss(const Tensor& probs, const Tensor& truth, double smooth) {
  if (probs.shape() != truth.shape()) {
    throw ContractError("dice_loss: shape mismatch " + shape_str(probs.shape()) + " vs " +
                        shape_str(truth.shape()));
  }
  if (probs.rank() < 2) throw ContractError("dice_loss: expected [b, classes, ...]");
  if (smooth < 0.0) throw ContractError("dice_loss: smooth must be non-negative");
  check_one_hot(truth);

  const auto& s = probs.shape();
  const std::size_t nb = s[0], nc = s[1], sp = shape_numel(s) / (nb * nc);
  const auto p = probs.data(), t = truth.data();
  std::vector<double> inter(nc, 0.0), denom(nc, smooth);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      const std::size_t base = (b * nc + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        inter[c] += p[base + i] * t[base + i];
        denom[c] += p[base + i] + t[base + i];
      }
    }
  const double scale = -2.0 / static_cast<double>(nc);
  double loss = 0.0;
  for (std::size_t c = 0; c < nc; ++c) {
    if (denom[c] > 0.0) loss += inter[c] / denom[c];
  }
  loss *= scale;

  return Tensor::make_result(
      {1}, {loss}, "dice_loss", {probs, truth},
      [probs, truth, inter, denom, nb, nc, sp, scale](std::span<const double> gy,
                                                      std::span<const double>) {
        if (!probs.requires_grad()) return;
        Tensor p = probs;
        auto gp = p.grad_buffer();
        const auto t = truth.data();
        for (std::size_t c = 0; c < nc; ++c) {
          if (denom[c] <= 0.0) continue;
          // d/dP (I / S) = (T * S - I) / S^2
          const double inv_s2 = 1.0 / (denom[c] * denom[c]);
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t base = (b * nc + c) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
              gp[base + i] +=
                  gy[0] * scale * (t[base + i] * denom[c] - inter[c]) * inv_s2;
            }
          }
        }
      });
}

}  // namespace cunet
