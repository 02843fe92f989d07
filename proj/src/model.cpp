#include "otformer/model.hpp"

#include <cmath>

#include "otformer/ops.hpp"

namespace otf {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::VanillaDiscrete: return "vanilla";
    case Variant::OTContinuous: return "ot";
    case Variant::NODEBlockwise: return "node";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "vanilla") return Variant::VanillaDiscrete;
  if (name == "ot") return Variant::OTContinuous;
  if (name == "node") return Variant::NODEBlockwise;
  throw std::invalid_argument("unknown variant '" + name + "' (expected vanilla|ot|node)");
}

std::string to_string(Pooling p) { return p == Pooling::Cls ? "cls" : "mean"; }

Pooling parse_pooling(const std::string& name) {
  if (name == "cls") return Pooling::Cls;
  if (name == "mean") return Pooling::Mean;
  throw std::invalid_argument("unknown pooling '" + name + "' (expected cls|mean)");
}

BlockShape ModelConfig::block_shape() const {
  return {d, k, heads, fc_hidden > 0 ? fc_hidden : 4 * d};
}

void ModelConfig::validate() const {
  if (d < 1 || k < 1 || heads < 1 || depth < 1)
    throw ContractError("model extents d, k, heads, depth must be >= 1");
  if (classes < 2) throw ContractError("a classifier needs at least two classes");
  if (input_dim < 1 || max_tokens < 1) throw ContractError("input_dim and max_tokens must be >= 1");
  if (continuous()) integrator.validate();
}

namespace {

template <typename T>
Tensor<T> xavier(std::int64_t rows, std::int64_t cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(static_cast<std::size_t>(rows * cols));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  return Tensor<T>::from({rows, cols}, std::move(v), true);
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); shape {extent} or {extent, fan_in}.
template <typename T>
Tensor<T> fan_in_uniform(std::vector<std::int64_t> shape, std::int64_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::int64_t count = 1;
  for (auto e : shape) count *= e;
  std::vector<T> v(static_cast<std::size_t>(count));
  for (auto& e : v) e = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config, ModelWeights<T> weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  if (static_cast<std::int64_t>(weights_.stack.blocks.size()) != config_.depth)
    throw DimensionError("model expects " + std::to_string(config_.depth) + " blocks, got " +
                         std::to_string(weights_.stack.blocks.size()));
  for (const auto& b : weights_.stack.blocks) {
    check_block(b);
    const BlockShape s = b.shape();
    const BlockShape want = config_.block_shape();
    if (s.d != want.d || s.k != want.k || s.heads != want.heads || s.fc_hidden != want.fc_hidden)
      throw DimensionError("block extents do not match the model configuration");
  }
  weights_.stack.skip_in_fc = config_.variant != Variant::NODEBlockwise;
  if (config_.has_cls() != weights_.embed.cls.has_value())
    throw ContractError("cls token must be present exactly when pooling on it");
}

// Blocks are Xavier with zero biases. The linear token map and the head use
// the fan-in rule for weights and biases; the lookup table stays Xavier.
template <typename T>
Model<T> Model<T>::initialise(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto d = config.d;
  ModelWeights<T> w;
  if (config.token_map == TokenMap::Linear) {
    w.embed.token_weight = fan_in_uniform<T>({d, config.input_dim}, config.input_dim, rng);
    w.embed.token_bias = fan_in_uniform<T>({d}, config.input_dim, rng);
  } else {
    w.embed.token_weight = xavier<T>(config.input_dim, d, rng);
  }
  const auto slots = config.max_tokens + (config.has_cls() ? 1 : 0);
  if (config.positional) w.embed.positional = Tensor<T>::zeros({slots, d}, true);
  if (config.has_cls()) w.embed.cls = Tensor<T>::zeros({d}, true);
  w.stack = init_stack<T>(config.block_shape(), config.depth,
                          config.variant != Variant::NODEBlockwise, rng);
  w.head.final_norm = {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
  w.head.weight = fan_in_uniform<T>({config.classes, d}, d, rng);
  w.head.bias = fan_in_uniform<T>({config.classes}, d, rng);
  return Model(config, std::move(w));
}

template <typename T>
Embedded<T> Model<T>::embed(const Batch& batch) const {
  const auto bsz = batch.size, n = batch.tokens, d = config_.d;
  if (bsz < 1 || n < 1) throw ContractError("empty batch");
  if (n > config_.max_tokens)
    throw LengthError("sequence of " + std::to_string(n) + " tokens exceeds max_tokens " +
                      std::to_string(config_.max_tokens));
  if (static_cast<std::int64_t>(batch.lengths.size()) != bsz)
    throw ContractError("batch lengths do not match batch size");

  Tensor<T> tokens;
  if (config_.token_map == TokenMap::Linear) {
    if (batch.feature_dim != config_.input_dim ||
        static_cast<std::int64_t>(batch.features.size()) != bsz * n * batch.feature_dim)
      throw DimensionError("batch features do not match input_dim " +
                           std::to_string(config_.input_dim));
    std::vector<T> raw(batch.features.begin(), batch.features.end());
    auto z = Tensor<T>::from({bsz, n, batch.feature_dim}, std::move(raw));
    tokens = linear(z, weights_.embed.token_weight, *weights_.embed.token_bias);
  } else {
    for (int id : batch.ids)
      if (id < 0 || id >= config_.input_dim)
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config_.input_dim));
    tokens = embedding_lookup(weights_.embed.token_weight, std::span<const int>(batch.ids), bsz, n);
  }

  const std::int64_t lead = config_.has_cls() ? 1 : 0;
  const std::int64_t slots = n + lead;
  Tensor<T> x = config_.has_cls() ? prepend_token(tokens, *weights_.embed.cls) : tokens;
  if (weights_.embed.positional) {
    const auto& table = *weights_.embed.positional;
    auto rows = slots == table.dim(0)
                    ? table
                    : slice_tokens(table.reshape({1, table.dim(0), d}), 0, slots).reshape({slots, d});
    x = add(x, rows);
  }

  Embedded<T> out;
  out.states = x;
  out.mask.assign(static_cast<std::size_t>(bsz * slots), T(0));
  for (std::int64_t b = 0; b < bsz; ++b) {
    const int len = batch.lengths[b];
    if (len < 1 || len > n) throw ContractError("invalid sequence length in batch");
    for (std::int64_t j = 0; j < len + lead; ++j) out.mask[b * slots + j] = T(1);
    out.counts.push_back(static_cast<int>(len + lead));
    if (len < n) out.padded = true;
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::velocity(const Tensor<T>& x, std::span<const T> mask, bool padded,
                             std::optional<std::size_t> block) const {
  std::span<const T> keys = padded ? mask : std::span<const T>{};
  Tensor<T> f;
  if (block) {
    f = block_forward(x, weights_.stack.blocks.at(*block), weights_.stack.skip_in_fc, keys);
  } else {
    f = stack_forward(x, weights_.stack, keys);
  }
  // Padding slots stay put and contribute nothing to the transport cost.
  return padded ? mask_tokens(f, mask) : f;
}

template <typename T>
Tensor<T> Model<T>::head(const Tensor<T>& final_state, std::span<const T> mask) const {
  auto normed = layer_norm(final_state, weights_.head.final_norm.gain, weights_.head.final_norm.bias);
  return linear(pool(normed, config_.pooling, mask), weights_.head.weight, weights_.head.bias);
}

template <typename T>
ForwardResult<T> Model<T>::forward(const Batch& batch, const ForwardOptions& opts) const {
  Embedded<T> emb = embed(batch);
  const std::span<const T> mask(emb.mask);
  const auto bsz = batch.size;
  ForwardResult<T> res;
  res.token_counts = emb.counts;
  res.transport_cost_raw = Tensor<T>::zeros({bsz});
  Tensor<T> x = emb.states;
  const IntegratorConfig icfg = opts.integrator.value_or(config_.integrator);

  switch (config_.variant) {
    case Variant::VanillaDiscrete:
      for (std::size_t i = 0; i < weights_.stack.blocks.size(); ++i)
        x = add(x, velocity(x, mask, emb.padded, i));
      break;
    case Variant::OTContinuous: {
      VelocityField<T> field = [&](const Tensor<T>& s) { return velocity(s, mask, emb.padded); };
      auto traj = integrate(x, field, icfg, opts.record_states);
      x = traj.final_state();
      res.transport_cost_raw = traj.transport_cost_raw;
      if (opts.record_states) res.trajectories.push_back(std::move(traj));
      break;
    }
    case Variant::NODEBlockwise:
      for (std::size_t i = 0; i < weights_.stack.blocks.size(); ++i) {
        VelocityField<T> field = [&, i](const Tensor<T>& s) {
          return velocity(s, mask, emb.padded, i);
        };
        auto traj = integrate(x, field, icfg, opts.record_states);
        x = traj.final_state();
        res.transport_cost_raw = add(res.transport_cost_raw, traj.transport_cost_raw);
        if (opts.record_states) res.trajectories.push_back(std::move(traj));
      }
      break;
  }
  res.final_state = x;
  res.logits = head(x, mask);
  return res;
}

template <typename T>
void Model<T>::visit_parameters(const ParamVisitor<T>& fn) {
  auto& e = weights_.embed;
  fn("embed.token_map.weight", e.token_weight);
  if (e.token_bias) fn("embed.token_map.bias", *e.token_bias);
  if (e.positional) fn("embed.positional", *e.positional);
  if (e.cls) fn("embed.cls", *e.cls);
  for (std::size_t i = 0; i < weights_.stack.blocks.size(); ++i)
    otf::visit_parameters(weights_.stack.blocks[i], "blocks." + std::to_string(i) + ".", fn);
  fn("head.norm.gain", weights_.head.final_norm.gain);
  fn("head.norm.bias", weights_.head.final_norm.bias);
  fn("head.weight", weights_.head.weight);
  fn("head.bias", weights_.head.bias);
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameters() {
  std::vector<Tensor<T>> out;
  visit_parameters([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
std::int64_t Model<T>::parameter_count() {
  std::int64_t n = 0;
  visit_parameters([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
std::int64_t Model<T>::block_parameter_count() {
  std::int64_t n = 0;
  for (auto& b : weights_.stack.blocks)
    otf::visit_parameters<T>(b, "", [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
Tensor<T> pool(const Tensor<T>& final_state, Pooling pooling, std::span<const T> mask) {
  if (final_state.rank() != 3) throw DimensionError("pool expects [B, n, d], got " + shape_str(final_state.shape()));
  const auto bsz = final_state.dim(0), d = final_state.dim(2);
  if (pooling == Pooling::Cls) return slice_tokens(final_state, 0, 1).reshape({bsz, d});
  return masked_mean_tokens(final_state, mask);
}

template class Model<float>;
template class Model<double>;
template Tensor<float> pool(const Tensor<float>&, Pooling, std::span<const float>);
template Tensor<double> pool(const Tensor<double>&, Pooling, std::span<const double>);

}  // namespace otf
