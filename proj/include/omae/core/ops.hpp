#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "omae/core/tensor.hpp"

namespace omae {

inline constexpr double kLayerNormEps = 1e-6;

// Linear algebra.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Batched a[B x m x k] * b[B x k x n]; with trans_b, b is stored [B x n x k].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false);
/// x[... x in] * weight[out x in]^T + bias[out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

// Elementwise.
/// a + b where b's shape equals a's shape or a trailing suffix of it.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s);
/// Exact-erf GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Normalization.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kLayerNormEps);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
/// Softmax over the last axis of [... x n x n] with entries j > i excluded.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& x);

// Reductions.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Layout.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
/// out[b, j, :] = x[b, index[b * K + j], :] for x [B x T x D], K = index.size() / B.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index);
/// Broadcast size-1 dimensions of x to shape (ranks must match).
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);
/// Rows of table [V x D] selected by ids; output shape is prefix + {D}.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids, Shape prefix);

// Losses (all return a scalar tensor).
/// Weighted mean over rows of the cross-entropy between softmax(logits) and
/// soft target rows. Empty row_weights means all rows weigh 1.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const T> targets,
                                std::span<const T> row_weights = {});
/// Mean binary cross-entropy of sigmoid(logits) against targets.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> targets);
/// Squared error over masked patches, averaged per patch then over masked
/// patches. pred/target [B x L x P], mask [B x L] with 1 = masked.
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, std::span<const T> target,
                     std::span<const T> mask);

}  // namespace omae
