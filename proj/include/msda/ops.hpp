#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "msda/tensor.hpp"

// Differentiable primitives. Shapes must match exactly; the only broadcast is
// a bias vector added to every row (or every channel of a feature map).

namespace msda {

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise, identical shapes
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a * s for a scalar (single-element) tensor s; gradient flows into s.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor reciprocal(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
/// Subgradient at 0 is 0.
Tensor abs(const Tensor& a);
/// Derivative at 0 is 0.
Tensor relu(const Tensor& a);

// Bias broadcasts
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// Reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [m x n] -> [1 x n]
Tensor column_sums(const Tensor& a);

// Row-wise probability maps for [m x c]
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
/// out[i] = x[i, index[i]]
Tensor select_per_row(const Tensor& x, std::span<const int> index);

// Convolutional stack, NCHW layout
/// Valid (unpadded) cross-correlation.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride);
/// [b x c x h x w] -> [b x c]
Tensor global_avg_pool(const Tensor& x);

// Kernel-method helpers
/// out[i, j] = ||x_i - y_j||^2, computed from explicit differences so that
/// identical rows give exactly 0.
Tensor pairwise_sq_dist(const Tensor& x, const Tensor& y);
Tensor concat_rows(std::span<const Tensor> parts);
/// Strict upper triangle of a square matrix, row-major, as a vector.
Tensor upper_triangle(const Tensor& square);
/// Median of all entries (mean of the two middle values for even counts).
/// The gradient flows to the selected entries.
Tensor median(const Tensor& values);

/// Row subset of a batch-major tensor (first axis).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

}  // namespace msda
