#pragma once

// Full classifiers: input embedding, hidden-state dynamics, output head.
//
//   VanillaDiscrete  X <- X + f_i(X) for each block i
//   OTContinuous     dX/dt = (f_D o ... o f_1)(X), integrated over [0, T]
//   NODEBlockwise    D chained ODEs, one per block, fc skip removed

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "otformer/ode.hpp"
#include "otformer/tensor.hpp"
#include "otformer/transformer.hpp"

namespace otf {

enum class Variant { VanillaDiscrete, OTContinuous, NODEBlockwise };
enum class Pooling { Cls, Mean };
enum class TokenMap { Linear, Lookup };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& name);

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Raised when an operation needs a continuous-time model.
class VariantError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  Variant variant = Variant::OTContinuous;
  std::int64_t d = 16;
  std::int64_t k = 16;
  std::int64_t heads = 1;
  std::int64_t depth = 1;
  std::int64_t fc_hidden = 0;  // 0 selects 4d
  TokenMap token_map = TokenMap::Linear;
  std::int64_t input_dim = 1;   // feature width (Linear) or vocabulary size (Lookup)
  std::int64_t max_tokens = 1;  // longest raw sequence accepted
  bool positional = true;
  Pooling pooling = Pooling::Mean;
  std::int64_t classes = 2;
  IntegratorConfig integrator;

  BlockShape block_shape() const;
  bool has_cls() const { return pooling == Pooling::Cls; }
  bool continuous() const { return variant != Variant::VanillaDiscrete; }
  void validate() const;
};

// Raw inputs for a batch, right-padded to a common token count.
struct Batch {
  std::int64_t size = 0;
  std::int64_t tokens = 0;
  std::int64_t feature_dim = 0;
  std::vector<double> features;  // size * tokens * feature_dim, Linear token maps
  std::vector<int> ids;          // size * tokens, Lookup token maps
  std::vector<int> lengths;      // real tokens per example
  std::vector<int> labels;
};

template <typename T>
struct EmbeddingWeights {
  Tensor<T> token_weight;               // [d, input_dim] (Linear) or [vocab, d] (Lookup)
  std::optional<Tensor<T>> token_bias;  // Linear only
  std::optional<Tensor<T>> positional;  // [max_tokens (+1 with cls), d]
  std::optional<Tensor<T>> cls;         // [d]
};

template <typename T>
struct HeadWeights {
  NormWeights<T> final_norm;
  Tensor<T> weight;  // [C, d]
  Tensor<T> bias;    // [C]
};

template <typename T>
struct ModelWeights {
  EmbeddingWeights<T> embed;
  BlockStack<T> stack;
  HeadWeights<T> head;
};

template <typename T>
struct Embedded {
  Tensor<T> states;      // X(0): [B, n, d], n includes the cls slot
  std::vector<T> mask;   // [B*n], 1 for real tokens
  std::vector<int> counts;
  bool padded = false;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;              // [B, C]
  Tensor<T> transport_cost_raw;  // [B]; zeros for the vanilla variant
  std::vector<int> token_counts; // per-sample n used for 1/(dn)
  Tensor<T> final_state;
  std::vector<Trajectory<T>> trajectories;  // filled when states are recorded
};

struct ForwardOptions {
  std::optional<IntegratorConfig> integrator;  // overrides the model's own
  bool record_states = false;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, ModelWeights<T> weights);

  static Model initialise(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelWeights<T>& weights() { return weights_; }
  const ModelWeights<T>& weights() const { return weights_; }

  Embedded<T> embed(const Batch& batch) const;
  // Velocity field of the single OT system (or of block `block` for N-ODE).
  Tensor<T> velocity(const Tensor<T>& x, std::span<const T> mask, bool padded,
                     std::optional<std::size_t> block = std::nullopt) const;
  ForwardResult<T> forward(const Batch& batch, const ForwardOptions& opts = {}) const;
  Tensor<T> head(const Tensor<T>& final_state, std::span<const T> mask) const;

  void visit_parameters(const ParamVisitor<T>& fn);
  std::vector<Tensor<T>> parameters();
  std::int64_t parameter_count();
  std::int64_t block_parameter_count();

 private:
  ModelConfig config_;
  ModelWeights<T> weights_;
};

// cls column when `pooling` is Cls, otherwise mean over unmasked tokens.
template <typename T>
Tensor<T> pool(const Tensor<T>& final_state, Pooling pooling, std::span<const T> mask = {});

}  // namespace otf
