#pragma once

// Differentiable primitives. Batched hidden states are laid out token-major as
// [batch, tokens, features]: each token's feature vector is contiguous, so
// token-wise linear maps are a single GEMM over flattened rows.

#include <span>
#include <vector>

#include "otformer/tensor.hpp"

namespace otf {

inline constexpr double kLayerNormEps = 1e-5;

// Plain 2-D product a[m,k] * b[k,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Per-batch product of a[B,m,k] with b[B,k,n], or with b[B,n,k] transposed.
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b);

// Token-wise affine map x[..., in] -> x * weight^T (+ bias), weight[out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight);
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Elementwise sum. `b` may also match a trailing suffix of a's extents, in
// which case it is broadcast over the leading axes (biases, position tables).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Normalises each vector along the last axis to zero mean and unit variance,
// then applies gain and bias (both shaped like the last axis).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = kLayerNormEps);

// Softmax along the last axis. With a mask ([B, n] flattened, 1 = keep),
// masked positions of a [B, m, n] input get weight zero.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x);
template <typename T>
Tensor<T> masked_softmax_last(const Tensor<T>& x, std::span<const T> key_mask);

// Softmax down each column of a 2-D tensor.
template <typename T>
Tensor<T> softmax_columns(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// Sum of squared entries as a one-element tensor.
template <typename T>
Tensor<T> frobenius_sq(const Tensor<T>& x);
// Per-batch-element squared Frobenius norm: [B, ...] -> [B].
template <typename T>
Tensor<T> batch_frobenius_sq(const Tensor<T>& x);
// sum_b weights[b] * x[b] for x of shape [B].
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights);

template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

// Concatenate along the last axis (e.g. per-head outputs [B,n,k] -> [B,n,H*k]).
template <typename T>
Tensor<T> concat_heads(const std::vector<Tensor<T>>& parts);

// x[B, n, d] -> x[B, start:start+count, d].
template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, std::int64_t start, std::int64_t count);

// x[B, n, d] -> x[B, 1 + n, d] with `token` in slot 0 of every batch element.
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token);

// Multiply each token vector of x[B, n, d] by mask[b*n + j].
template <typename T>
Tensor<T> mask_tokens(const Tensor<T>& x, std::span<const T> mask);

// Mean over unmasked tokens: x[B, n, d] -> [B, d].
template <typename T>
Tensor<T> masked_mean_tokens(const Tensor<T>& x, std::span<const T> mask);

// Rows of table[V, d] gathered by ids (B*n entries) -> [B, n, d].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids, std::int64_t batch,
                           std::int64_t tokens);

// Per-sample softmax cross-entropy: logits[B, C] -> [B].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

// True when every entry is finite.
template <typename T>
bool all_finite(std::span<const T> values);

}  // namespace otf
