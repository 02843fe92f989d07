#pragma once

// Regularised objective, Adam, and the epoch loop with NaN/explosion
// monitoring.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "otformer/data.hpp"
#include "otformer/model.hpp"

namespace otf {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kExplosionThreshold = 1e4;

// Learning rate `rate` applies to epochs in [begin, end).
struct LrPhase {
  int begin = 0;
  int end = 0;
  double rate = 5e-4;
};

struct TrainConfig {
  ModelConfig model;  // variant lives in model.variant
  TaskKind task = TaskKind::Mnist;
  double lambda = 0.01;
  std::vector<LrPhase> schedule;  // empty: constant 5e-4
  int epochs = 45;
  int batch_size = 100;
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;
  std::optional<double> grad_clip;
  double explosion_threshold = kExplosionThreshold;
  int eval_batch_size = 250;

  void validate() const;
  double learning_rate(int epoch) const;
};

// Copies extents that the task determines (input width, token count,
// class count, token map) into `model`.
void configure_for_task(ModelConfig& model, const TaskData& task);

struct ObjectiveParts {
  double data_fit = 0;   // batch-mean cross-entropy
  double transport = 0;  // batch-mean cost_b / (2 d n_b), before lambda
};

// mean_b [ CE_b + lambda / (2 d n_b) * cost_b ], with n_b each sample's own
// token count.
template <typename T>
Tensor<T> objective(const Tensor<T>& logits, std::span<const int> targets,
                    const Tensor<T>& transport_cost_raw, double lambda, std::int64_t d,
                    std::span<const int> token_counts, ObjectiveParts* parts = nullptr);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {});
  // Applies one update from the gradients currently held by the parameters.
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// Global L2 norm over every parameter gradient; NaN/Inf propagate.
template <typename T>
double grad_norm(std::span<const Tensor<T>> params);

struct EpochStability {
  double max_norm = 0;
  double mean_norm = 0;
  std::int64_t steps = 0;
};

// Pure observer of the gradient-norm stream.
class StabilityMonitor {
 public:
  explicit StabilityMonitor(double threshold = kExplosionThreshold) : threshold_(threshold) {}
  // Returns true when this observation trips the flag (first time only).
  bool observe(double norm);
  void end_epoch();
  bool flagged() const { return flag_step_.has_value(); }
  bool non_finite() const { return non_finite_; }
  std::optional<std::int64_t> flag_step() const { return flag_step_; }
  const std::vector<EpochStability>& epochs() const { return epochs_; }
  const EpochStability& current() const { return current_; }

 private:
  double threshold_;
  std::int64_t step_ = 0;
  std::optional<std::int64_t> flag_step_;
  bool non_finite_ = false;
  EpochStability current_;
  double sum_ = 0;
  std::vector<EpochStability> epochs_;
};

struct RunRow {
  int epoch = 0;
  double train_loss = 0;
  double train_transport = 0;
  double train_accuracy = 0;
  double test_loss = 0;
  double test_accuracy = 0;
  double mean_grad_norm = 0;
  bool nan_flag = false;
};

struct RunRecord {
  std::vector<RunRow> rows;
  std::optional<std::int64_t> explosion_step;  // first step over the threshold
  bool aborted() const { return !rows.empty() && rows.back().nan_flag; }
};

void write_run_csv(std::ostream& out, const RunRecord& record);
std::string run_csv(const RunRecord& record);

struct EvalResult {
  double loss = 0;      // mean cross-entropy
  double accuracy = 0;
  double transport = 0; // mean cost_b / (2 d n_b)
};

template <typename T>
EvalResult evaluate(const Model<T>& model, const TaskData& task, const std::vector<Example>& split,
                    int batch_size, const ForwardOptions& opts = {});

template <typename T>
struct TrainResult {
  Model<T> model;
  RunRecord record;
};

using EpochCallback = std::function<void(const RunRow&)>;

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const TaskData& data, const EpochCallback& on_epoch = {});

}  // namespace otf
