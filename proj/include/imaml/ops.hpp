#pragma once

// Differentiable primitives. Every op records itself on the operands' tape
// (if any operand is attached and the tape is recording) and every backward
// rule is expressed with these same ops, so gradients can be differentiated
// again. No broadcasting beyond the explicit helpers below.

#include <cstdint>
#include <memory>
#include <vector>

#include "imaml/tensor.hpp"

namespace imaml::ad {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

// Constant scalars.
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// Unary maps.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor cosh(const Tensor& x);
Tensor sinh(const Tensor& x);
Tensor sqrt(const Tensor& x);
/// Clamps into [lo, hi]; the gradient is zero wherever the clamp is active.
Tensor clamp(const Tensor& x, double lo, double hi);

// Reductions and scalar broadcast.
/// Sum of all elements, shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Broadcasts a one-element tensor to `shape`.
Tensor expand(const Tensor& scalar, const Shape& shape);
Tensor reshape(const Tensor& x, const Shape& shape);

// Linear algebra (2-D).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Image ops on [B, C, H, W].
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);
/// Transposed convolution; `w` is [C_in, C_out, KH, KW] and the output size is
/// (H - 1) * stride - 2 * pad + KH.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);
/// Adjoints of conv2d with respect to its input and its weight.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                         std::size_t stride, std::size_t pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape,
                          std::size_t stride, std::size_t pad);

Tensor max_pool2(const Tensor& x);
Tensor upsample2(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);

/// [C] -> [B, C, H, W] and its adjoint.
Tensor channel_broadcast(const Tensor& v, const Shape& shape);
Tensor channel_sum(const Tensor& x);
/// [B, 1, H, W] -> [B, C, H, W] and its adjoint.
Tensor repeat_channels(const Tensor& x, std::size_t channels);
Tensor sum_channels(const Tensor& x);
/// [B] -> [B, ...] and its adjoint (per-sample reduction).
Tensor sample_broadcast(const Tensor& v, const Shape& shape);
Tensor sample_sum(const Tensor& x);

// Generic index maps, the building block of the layout ops above.
// gather: out[i] = x[index[i]]. scatter_add: out[index[i]] += g[i].
using IndexMap = std::shared_ptr<const std::vector<std::uint32_t>>;
Tensor gather(const Tensor& x, IndexMap index, const Shape& out_shape);
Tensor scatter_add(const Tensor& g, IndexMap index, const Shape& out_shape);

}  // namespace imaml::ad
