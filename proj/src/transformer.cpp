#include "otformer/transformer.hpp"

#include <cmath>

#include "otformer/ops.hpp"

namespace otf {

namespace {

template <typename T>
Tensor<T> xavier(std::int64_t rows, std::int64_t cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(static_cast<std::size_t>(rows * cols));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  return Tensor<T>::from({rows, cols}, std::move(v), true);
}

template <typename T>
NormWeights<T> unit_norm(std::int64_t d) {
  return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
}

void expect_shape(const char* what, const Shape& got, const Shape& want) {
  if (got != want)
    throw DimensionError(std::string(what) + ": expected " + shape_str(want) + ", got " +
                         shape_str(got));
}

}  // namespace

template <typename T>
BlockShape BlockWeights<T>::shape() const {
  if (heads.empty()) throw ContractError("block has no attention heads");
  return {heads.front().query.dim(1), heads.front().query.dim(0),
          static_cast<std::int64_t>(heads.size()), fc.w1.dim(0)};
}

template <typename T>
void visit_parameters(BlockWeights<T>& block, const std::string& prefix,
                      const ParamVisitor<T>& fn) {
  for (std::size_t h = 0; h < block.heads.size(); ++h) {
    const std::string hp = prefix + "heads." + std::to_string(h) + ".";
    fn(hp + "query", block.heads[h].query);
    fn(hp + "key", block.heads[h].key);
    fn(hp + "value", block.heads[h].value);
    fn(hp + "out", block.heads[h].out);
  }
  fn(prefix + "fc.w1", block.fc.w1);
  fn(prefix + "fc.b1", block.fc.b1);
  fn(prefix + "fc.w2", block.fc.w2);
  fn(prefix + "fc.b2", block.fc.b2);
  fn(prefix + "norm1.gain", block.norm1.gain);
  fn(prefix + "norm1.bias", block.norm1.bias);
  fn(prefix + "norm2.gain", block.norm2.gain);
  fn(prefix + "norm2.bias", block.norm2.bias);
}

template <typename T>
BlockWeights<T> init_block(const BlockShape& s, std::mt19937_64& rng) {
  if (s.d < 1 || s.k < 1 || s.heads < 1 || s.fc_hidden < 1)
    throw ContractError("block extents must be positive");
  BlockWeights<T> b;
  for (std::int64_t h = 0; h < s.heads; ++h) {
    AttentionHeadWeights<T> head;
    head.query = xavier<T>(s.k, s.d, rng);
    head.key = xavier<T>(s.k, s.d, rng);
    head.value = xavier<T>(s.k, s.d, rng);
    head.out = xavier<T>(s.d, s.k, rng);
    b.heads.push_back(std::move(head));
  }
  b.fc.w1 = xavier<T>(s.fc_hidden, s.d, rng);
  b.fc.b1 = Tensor<T>::zeros({s.fc_hidden}, true);
  b.fc.w2 = xavier<T>(s.d, s.fc_hidden, rng);
  b.fc.b2 = Tensor<T>::zeros({s.d}, true);
  b.norm1 = unit_norm<T>(s.d);
  b.norm2 = unit_norm<T>(s.d);
  return b;
}

template <typename T>
BlockStack<T> init_stack(const BlockShape& shape, std::int64_t depth, bool skip_in_fc,
                         std::mt19937_64& rng) {
  if (depth < 1) throw ContractError("a block stack needs at least one block");
  BlockStack<T> stack;
  stack.skip_in_fc = skip_in_fc;
  for (std::int64_t i = 0; i < depth; ++i) stack.blocks.push_back(init_block<T>(shape, rng));
  return stack;
}

template <typename T>
void check_block(const BlockWeights<T>& block) {
  const BlockShape s = block.shape();
  for (const auto& h : block.heads) {
    expect_shape("query", h.query.shape(), {s.k, s.d});
    expect_shape("key", h.key.shape(), {s.k, s.d});
    expect_shape("value", h.value.shape(), {s.k, s.d});
    expect_shape("out", h.out.shape(), {s.d, s.k});
  }
  expect_shape("fc.w1", block.fc.w1.shape(), {s.fc_hidden, s.d});
  expect_shape("fc.b1", block.fc.b1.shape(), {s.fc_hidden});
  expect_shape("fc.w2", block.fc.w2.shape(), {s.d, s.fc_hidden});
  expect_shape("fc.b2", block.fc.b2.shape(), {s.d});
  expect_shape("norm1.gain", block.norm1.gain.shape(), {s.d});
  expect_shape("norm2.gain", block.norm2.gain.shape(), {s.d});
}

namespace {

template <typename T>
void check_input(const Tensor<T>& x, const BlockWeights<T>& block) {
  if (x.rank() != 3 || x.dim(2) != block.shape().d)
    throw DimensionError("hidden state " + shape_str(x.shape()) + " does not match block width " +
                         std::to_string(block.shape().d));
}

template <typename T>
Tensor<T> head_probabilities(const Tensor<T>& normed, const AttentionHeadWeights<T>& head,
                             std::span<const T> key_mask) {
  const T inv_sqrt_k = T(1) / std::sqrt(static_cast<T>(head.query.dim(0)));
  auto q = linear(normed, head.query);
  auto k = linear(normed, head.key);
  auto logits = scale(batched_matmul(q, k, true), inv_sqrt_k);
  return key_mask.empty() ? softmax_last(logits) : masked_softmax_last(logits, key_mask);
}

}  // namespace

template <typename T>
Tensor<T> attention_probabilities(const Tensor<T>& x, const BlockWeights<T>& block,
                                  std::size_t head, std::span<const T> key_mask) {
  check_input(x, block);
  auto normed = layer_norm(x, block.norm1.gain, block.norm1.bias);
  return head_probabilities(normed, block.heads.at(head), key_mask);
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const BlockWeights<T>& block,
                         std::span<const T> key_mask) {
  check_input(x, block);
  auto normed = layer_norm(x, block.norm1.gain, block.norm1.bias);
  std::vector<Tensor<T>> outputs;
  std::vector<Tensor<T>> projections;
  for (const auto& head : block.heads) {
    auto probs = head_probabilities(normed, head, key_mask);
    auto v = linear(normed, head.value);
    outputs.push_back(batched_matmul(probs, v, false));
    projections.push_back(head.out);
  }
  // sum_h W^h O^h == [W^1 ... W^H] [O^1; ...; O^H]
  auto mixed = linear(concat_heads(outputs), concat_heads(projections));
  return add(x, mixed);
}

template <typename T>
BlockParts<T> block_parts(const Tensor<T>& x, const BlockWeights<T>& block,
                          std::span<const T> key_mask) {
  auto u = self_attention(x, block, key_mask);
  auto h = gelu(linear(layer_norm(u, block.norm2.gain, block.norm2.bias), block.fc.w1, block.fc.b1));
  return {u, linear(h, block.fc.w2, block.fc.b2)};
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockWeights<T>& block, bool skip_in_fc,
                        std::span<const T> key_mask) {
  auto parts = block_parts(x, block, key_mask);
  return skip_in_fc ? add(parts.attended, parts.fc_branch) : parts.fc_branch;
}

template <typename T>
Tensor<T> stack_forward(const Tensor<T>& x, const BlockStack<T>& stack,
                        std::span<const T> key_mask) {
  if (stack.blocks.empty()) throw ContractError("empty block stack");
  Tensor<T> out = x;
  for (const auto& block : stack.blocks) out = block_forward(out, block, stack.skip_in_fc, key_mask);
  return out;
}

#define OTF_INSTANTIATE_BLOCKS(T)                                                               \
  template struct BlockWeights<T>;                                                              \
  template void visit_parameters(BlockWeights<T>&, const std::string&, const ParamVisitor<T>&); \
  template BlockWeights<T> init_block<T>(const BlockShape&, std::mt19937_64&);                  \
  template BlockStack<T> init_stack<T>(const BlockShape&, std::int64_t, bool, std::mt19937_64&); \
  template void check_block(const BlockWeights<T>&);                                            \
  template Tensor<T> attention_probabilities(const Tensor<T>&, const BlockWeights<T>&,          \
                                             std::size_t, std::span<const T>);                  \
  template Tensor<T> self_attention(const Tensor<T>&, const BlockWeights<T>&,                   \
                                    std::span<const T>);                                        \
  template BlockParts<T> block_parts(const Tensor<T>&, const BlockWeights<T>&,                  \
                                     std::span<const T>);                                       \
  template Tensor<T> block_forward(const Tensor<T>&, const BlockWeights<T>&, bool,              \
                                   std::span<const T>);                                         \
  template Tensor<T> stack_forward(const Tensor<T>&, const BlockStack<T>&, std::span<const T>);

OTF_INSTANTIATE_BLOCKS(float)
OTF_INSTANTIATE_BLOCKS(double)

}  // namespace otf
