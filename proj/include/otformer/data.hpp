#pragma once

// Desk-scale classification tasks: binary parity, MNIST subsets cut into
// 7x7 patch tokens, and synthetic 2-D point-cloud shapes.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "otformer/errors.hpp"
#include "otformer/model.hpp"

namespace otf {

enum class TaskKind { Parity, Mnist, PointCloud };

std::string to_string(TaskKind k);
TaskKind parse_task(const std::string& name);

struct Example {
  std::vector<double> features;  // tokens * feature_dim (raw-feature tasks)
  std::vector<int> ids;          // tokens (token-id tasks)
  int tokens = 0;
  int label = 0;
  // Generator parameters kept for inspection; point clouds store
  // {center_x, center_y, radius, rotation}.
  std::vector<double> aux;
};

struct TaskData {
  TaskKind kind = TaskKind::Parity;
  TokenMap token_map = TokenMap::Lookup;
  std::int64_t feature_dim = 1;  // feature width, or vocabulary size for Lookup
  std::int64_t max_tokens = 1;
  std::int64_t classes = 2;
  std::vector<Example> train;
  std::vector<Example> test;
};

// Right-pads the selected examples into one Batch.
Batch make_batch(const TaskData& task, const std::vector<Example>& split,
                 std::span<const std::size_t> indices);
Batch make_batch(const TaskData& task, const std::vector<Example>& split);

// ---- parity -------------------------------------------------------------

// `count` sequences of uniform length in [1, max_len] with uniform bits;
// label = XOR of the bits. The last `test_fraction` of them form the test split.
TaskData gen_parity(std::size_t count, int max_len, std::uint64_t seed,
                    double test_fraction = 0.2);

int parity_label(std::span<const int> bits);

// ---- MNIST / IDX --------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
inline constexpr int kPatch = 7;

struct IdxFile {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

// Big-endian IDX container of unsigned bytes. Throws FormatError with the
// byte offset of the first inconsistency.
IdxFile parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const IdxFile& file);
IdxFile read_idx_file(const std::filesystem::path& path);
void write_idx_file(const std::filesystem::path& path, const IdxFile& file);

// 28x28 image (row-major bytes) -> 16 tokens of 49 features in [0, 1].
std::vector<double> image_to_patches(std::span<const std::uint8_t> image, int rows, int cols);

// Samples `train_per_class` images per digit from train-{images,labels}
// files in `dir` and `test_per_class` from the t10k files (or, when those
// are absent, from the remaining training images).
TaskData load_mnist_subset(const std::filesystem::path& dir, int train_per_class,
                           int test_per_class, std::uint64_t seed);

// ---- point clouds -------------------------------------------------------

inline constexpr double kPointNoise = 0.05;
enum class Shape2D { Circle = 0, Square = 1, TwoMoons = 2 };

std::vector<double> sample_shape(Shape2D shape, int points, std::uint64_t seed,
                                 std::vector<double>* aux = nullptr);

// Balanced classes cycling circle/square/two-moons; tokens are raw (x, y).
TaskData gen_pointcloud(std::size_t count, int points_per_cloud, std::uint64_t seed,
                        double test_fraction = 0.2);

// ---- cache --------------------------------------------------------------

inline constexpr std::uint32_t kTaskCacheVersion = 1;

// Binary cache keyed by a caller-supplied string (task, seed, sizes).
void save_task_cache(const std::filesystem::path& path, const TaskData& task,
                     const std::string& key);
// Throws FormatError when the file is corrupt or was written for another key.
TaskData load_task_cache(const std::filesystem::path& path, const std::string& key);

}  // namespace otf
