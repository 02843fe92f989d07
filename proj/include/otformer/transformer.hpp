#pragma once

// Pre-norm transformer blocks over token-major hidden states X[B, n, d].

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "otformer/tensor.hpp"

namespace otf {

struct BlockShape {
  std::int64_t d = 0;          // hidden (token) dimension
  std::int64_t k = 0;          // per-head query/key/value dimension
  std::int64_t heads = 1;
  std::int64_t fc_hidden = 0;  // width of the token-wise MLP; 4d by default

  static BlockShape make(std::int64_t d, std::int64_t k, std::int64_t heads) {
    return {d, k, heads, 4 * d};
  }
};

template <typename T>
struct NormWeights {
  Tensor<T> gain;
  Tensor<T> bias;
};

// Q, K, V map d -> k; `out` (W) maps k -> d.
template <typename T>
struct AttentionHeadWeights {
  Tensor<T> query;
  Tensor<T> key;
  Tensor<T> value;
  Tensor<T> out;
};

// Two-layer token-wise MLP d -> fc_hidden -> d with GELU in between.
template <typename T>
struct FcWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct BlockWeights {
  std::vector<AttentionHeadWeights<T>> heads;
  FcWeights<T> fc;
  NormWeights<T> norm1;
  NormWeights<T> norm2;

  BlockShape shape() const;
};

template <typename T>
struct BlockStack {
  std::vector<BlockWeights<T>> blocks;
  bool skip_in_fc = true;
};

// Parameter visitor: receives a canonical dotted name and the leaf tensor.
template <typename T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

template <typename T>
void visit_parameters(BlockWeights<T>& block, const std::string& prefix, const ParamVisitor<T>& fn);

// Xavier-uniform matrices, unit gains, zero biases.
template <typename T>
BlockWeights<T> init_block(const BlockShape& shape, std::mt19937_64& rng);

template <typename T>
BlockStack<T> init_stack(const BlockShape& shape, std::int64_t depth, bool skip_in_fc,
                         std::mt19937_64& rng);

// Validates shapes against the block's own extents; throws DimensionError.
template <typename T>
void check_block(const BlockWeights<T>& block);

// Attention probabilities of one head: [B, n_query, n_key], rows sum to one.
// `key_mask` is [B*n] (1 = real token) or empty.
template <typename T>
Tensor<T> attention_probabilities(const Tensor<T>& x, const BlockWeights<T>& block,
                                  std::size_t head, std::span<const T> key_mask = {});

// U = X + sum_h W^h V^h LN1(X) softmax(...): the self-attention sublayer with
// its residual connection.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const BlockWeights<T>& block,
                         std::span<const T> key_mask = {});

// The two halves of a block: the attention output U and the fc branch g(LN2(U)).
template <typename T>
struct BlockParts {
  Tensor<T> attended;
  Tensor<T> fc_branch;
};

template <typename T>
BlockParts<T> block_parts(const Tensor<T>& x, const BlockWeights<T>& block,
                          std::span<const T> key_mask = {});

// U + g(LN2(U)) with the fc skip, g(LN2(U)) without.
template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockWeights<T>& block, bool skip_in_fc,
                        std::span<const T> key_mask = {});

// f_D o ... o f_1 applied to X.
template <typename T>
Tensor<T> stack_forward(const Tensor<T>& x, const BlockStack<T>& stack,
                        std::span<const T> key_mask = {});

}  // namespace otf
