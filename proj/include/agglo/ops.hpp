#pragma once

// Differentiable tensor operations. Every function here is pure: it returns a
// new tensor and, when a tape is active and an input requires a gradient,
// records its adjoint on that tape.
//
// Axis arguments accept negative values counting from the last axis.
// Elementwise binary operations broadcast numpy-style: shapes are aligned
// from the trailing dimension and each pair of extents must match or be 1.

#include <span>
#include <vector>

#include "agglo/tensor.hpp"

namespace agglo {

/// Denominator guard used by `div`: a / (b + kDivEpsilon).
inline constexpr double kDivEpsilon = 1e-9;

/// Batched product of the last two axes. `b` may be rank 2 (shared across the
/// leading axes of `a`) or have exactly the same leading axes as `a`.
/// With `transpose_b`, b's last two axes are read as [r, q].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// a / (b + kDivEpsilon). Finite for b == 0.
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);
/// Inclusive prefix sum along `axis`.
template <typename T>
Tensor<T> cumsum(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false);
/// Sum of all elements as a rank-0 tensor.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  return concat(std::span<const Tensor<T>>(parts), axis);
}
/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index begin, Index end);
/// Splits `axis` into `parts` equal pieces.
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, Index parts);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Swaps two axes (materialized copy).
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b);

/// Row lookup: table [V, d], ids [...] -> [..., d]. Throws DataError on ids
/// outside [0, V).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const IntTensor& ids);

/// Normalizes over the last axis, then applies gain and bias ([d] each).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));

/// Causal 1-D convolution over the time axis. x: [b, t, c_in],
/// filter: [k, c_in, c_out]. Output position i reads inputs i-k+1 .. i, where
/// tap j multiplies input i-(k-1)+j and positions before 0 are zero.
template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& filter);

/// Mean negative log-likelihood in nats. logits: [..., V]; targets hold one
/// class id per logits row.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const IntTensor& targets);

}  // namespace agglo
