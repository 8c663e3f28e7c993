#pragma once

#include "cunet/tensor.hpp"

namespace cunet {

constexpr double kDefaultDiceSmooth = 1e-5;

// Multi-class soft dice loss over probabilities `probs` [b, D, d, h, w] and a
// one-hot `truth` of the same shape:
//   loss = -(2 / D) * sum_d  sum_j P_jd T_jd / (sum_j P_jd + sum_j T_jd + smooth)
// where j runs over every voxel of every batch item. `smooth` enters the
// denominator only. Differentiable with respect to `probs`.
Tensor dice_loss(const Tensor& probs, const Tensor& truth, double smooth = kDefaultDiceSmooth);

}  // namespace cunet
