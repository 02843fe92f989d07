#pragma once

// Post-training analyses: inference step sweeps, trajectory straightness,
// paired lambda ablations, and the finite-difference gradient suite.

#include <ostream>
#include <string>
#include <vector>

#include "otformer/config.hpp"
#include "otformer/model.hpp"

namespace otf {

struct SweepRow {
  int steps = 0;
  double accuracy = 0;
  double loss = 0;
};

// Re-evaluates the frozen model at each step count with the same scheme and
// horizon. Throws VariantError for the discrete variant.
template <typename T>
std::vector<SweepRow> sweep_steps(const Model<T>& model, const TaskData& task, const std::vector<Example>& split,
                                  const std::vector<int>& steps, int batch_size = 250);

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

struct SampleStraightness {
  double arc_length = 0;    // sum_k ||X_{k+1} - X_k||_F
  double displacement = 0;  // ||X(T) - X(0)||_F
  double ratio = 1;         // arc / displacement; 1 when degenerate
  double speed_cv = 0;      // std / mean of per-step speed
  bool degenerate = false;  // displacement == 0
};

struct StraightnessReport {
  std::vector<SampleStraightness> samples;
  double mean_ratio = 1;
  double p95_ratio = 1;
  double mean_speed_cv = 0;
  int degenerate_count = 0;
};

// Per-sample statistics from a list of recorded states (each [B, n, d]).
// For chained trajectories (one per N-ODE block) pass the concatenation.
template <typename T>
StraightnessReport straightness_from_states(const std::vector<Tensor<T>>& states);

// Integrates up to `max_samples` examples of `split` with states recorded.
template <typename T>
StraightnessReport straightness(const Model<T>& model, const TaskData& task, const std::vector<Example>& split,
                                int max_samples = 256);

void write_straightness_csv(std::ostream& out, const StraightnessReport& report);

struct AblationRow {
  std::uint64_t seed = 0;
  double lambda = 0;
  double final_test_accuracy = 0;
  double best_test_accuracy = 0;
  bool nan_flag = false;
  double mean_ratio = 0;  // straightness on the test split (continuous variants)
};

// Trains {lambda = 0, lambda = cfg.train.lambda} for each seed on the same
// data subset and initialisation.
std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                std::ostream* progress = nullptr);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

struct GradcheckItem {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

// Central finite differences at double precision. Primitives are held to
// 1e-6 and composite items (block, full objectives) to 1e-4. The error is
// max_i |g_analytic[i] - g_fd[i]| / (|g_fd[i]| + 1e-8), step 1e-5.
std::vector<GradcheckItem> gradcheck_suite(std::uint64_t seed = 0);

}  // namespace otf
