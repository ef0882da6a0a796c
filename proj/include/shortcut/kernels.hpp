#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "shortcut/tensor.hpp"

// Raw numeric kernels on [N, C, H, W] tensors. Convolutions are stride 1 with
// symmetric zero padding; pooling windows are non-overlapping.
namespace shortcut::kernels {

struct ConvGeometry {
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

// y[n,o] = sum_i w[o,i] * x[n,i]  (cross-correlation), no bias.
Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g);
// Adjoint of conv2d in x: <conv2d(x,w), gy> = <x, conv2d_input_grad(gy,w)>.
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape,
                         ConvGeometry g);
// Adjoint of conv2d in w: <conv2d(x,w), gy> = <w, conv2d_weight_grad(x,gy)>.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape,
                          ConvGeometry g);

// Flat indices into the input of max-pooling; one per output element.
using PoolIndex = std::shared_ptr<const std::vector<std::size_t>>;

struct PoolResult {
  Tensor output;
  PoolIndex argmax;
};

// Window (kh, kw); set kh = H and kw = W for global pooling. Ties resolve to
// the first maximum in row-major window order.
PoolResult max_pool(const Tensor& x, std::size_t kh, std::size_t kw);

Tensor gather(const Tensor& x, const std::vector<std::size_t>& index, const Shape& out_shape);
Tensor scatter(const Tensor& y, const std::vector<std::size_t>& index, const Shape& in_shape);

// Per-channel reductions over N and spatial positions (dim 1 is channel).
Tensor channel_sum(const Tensor& x);
Tensor channel_broadcast(const Tensor& per_channel, const Shape& shape);

}  // namespace shortcut::kernels
