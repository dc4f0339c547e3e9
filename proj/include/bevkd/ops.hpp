#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bevkd/tensor.hpp"

// Differentiable operations. All of them record onto the dynamic graph when
// grad mode is on and at least one input requires grad.
namespace bevkd::ops {

// --- shape plumbing -------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank-2 only
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// out[rows[i], :] += src[i, :]
Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t out_rows);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor tile_cols(const Tensor& a, std::size_t times);
// Row r taken from `when_true` if mask[r] else from `when_false`.
Tensor select_rows(std::span<const std::uint8_t> mask, const Tensor& when_true, const Tensor& when_false);

// --- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor add_bias(const Tensor& a, const Tensor& bias);  // [m x n] + [n]
Tensor scale_rows(const Tensor& a, std::span<const double> factors);
// out[n, :] = sum_k weights[n, k] * values[n*K + k, :]
Tensor group_weighted_sum(const Tensor& weights, const Tensor& values);

// --- reductions -----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_last_axis(const Tensor& a);

// --- elementwise ----------------------------------------------------------
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs(const Tensor& a);  // subgradient 0 at 0
Tensor logit(const Tensor& a);
Tensor atan2(const Tensor& y, const Tensor& x);

// --- nn -------------------------------------------------------------------
// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
// Mean of squared element-wise differences.
Tensor l2_loss(const Tensor& a, const Tensor& b);
// Weighted mean negative log-likelihood of `targets` under softmax(logits).
// logits: [N x K]; weights empty means all ones.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const double> weights = {});
// map: [C x H x W]; coords: [N x 2] holding (u, v) = (column, row) in pixel
// units with integer values at pixel centres. Returns [N x C]. Samples whose
// coordinate leaves [0, W-1] x [0, H-1] are zero.
Tensor bilinear_sample(const Tensor& map, const Tensor& coords);
// input: [C_in x H x W]; kernel: [C_out x C_in x k x k], k odd. Same padding,
// output [C_out x ceil(H/stride) x ceil(W/stride)].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // [C x H x W] + [C]

}  // namespace bevkd::ops
