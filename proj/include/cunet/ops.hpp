#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "cunet/rng.hpp"
#include "cunet/tensor.hpp"

// Differentiable operations over order-5 activations [batch, channel, depth,
// height, width]. Every op records a tape node when an input requires grad.
namespace cunet::ops {

using Triple = std::array<std::size_t, 3>;

struct Conv3dOptions {
  Triple stride{1, 1, 1};
  Triple dilation{1, 1, 1};
  Triple padding{0, 0, 0};

  // Extent-preserving padding for an odd kernel: dilation * (k - 1) / 2.
  static Conv3dOptions same(std::size_t kernel, std::size_t dilation);
};

// Output extent along one axis, or 0 when the dilated kernel does not fit.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t dilation, std::size_t pad);

// input [b,ci,d,h,w], kernel [co,ci,kd,kh,kw], bias [co].
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv3dOptions& opts = {});

// Per (batch, channel) standardization without affine parameters.
Tensor instance_norm(const Tensor& input, double eps = 1e-5);

Tensor relu(const Tensor& input);

// Inverted dropout: survivors scaled by 1/(1-rate); identity when !training.
Tensor dropout(const Tensor& input, double rate, Rng& rng, bool training);

// Factor-2 trilinear upsampling, align-corners=false.
Tensor upsample3d_trilinear(const Tensor& input);

// 2x2x2 window, stride 2. Spatial extents must be even.
Tensor maxpool3d(const Tensor& input);

// Concatenation along the channel axis (axis 1).
Tensor concat(const std::vector<Tensor>& tensors);

// Channels [begin, begin + count) of an order-5 tensor.
Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t count);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Scalar sum of all elements, shape [1].
Tensor sum(const Tensor& input);

// Softmax over axis 1 at every (batch, voxel).
Tensor softmax_channels(const Tensor& input);

}  // namespace cunet::ops
