#pragma once

// Experiment configuration: a YAML mapping with task, model, integrator,
// train and output sections. Every key has a default and
// unknown keys are rejected.

#include <filesystem>
#include <string>

#include "otformer/data.hpp"
#include "otformer/ode.hpp"
#include "otformer/training.hpp"

namespace otf {

struct TaskParams {
  TaskKind kind = TaskKind::Mnist;
  std::filesystem::path data_dir = "data/mnist";
  int train_per_class = 100;
  int test_per_class = 50;
  int count = 1000;            // parity / point clouds: total examples
  int max_len = 16;            // parity
  int points = 64;             // point clouds
  double test_fraction = 0.2;  // parity / point clouds
};

struct ExperimentConfig {
  TaskParams task;
  TrainConfig train;
  std::filesystem::path out_dir = "runs/default";
};

// Defaults for each task (lambda 0.01 for MNIST, 0.5 for parity, 1.0 for
// point clouds).
ExperimentConfig default_config(TaskKind kind = TaskKind::Mnist);

// Throws ConfigError on syntax errors, unknown keys, or invalid values.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string render_config(const ExperimentConfig& cfg);

// Loads the dataset the config describes; `seed` picks the subset or the
// generator stream.
TaskData load_task(const TaskParams& params, std::uint64_t seed);

}  // namespace otf
