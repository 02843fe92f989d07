#include "otformer/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "binary_io.hpp"

namespace otf {

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Parity: return "parity";
    case TaskKind::Mnist: return "mnist";
    case TaskKind::PointCloud: return "pointcloud";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  if (name == "parity") return TaskKind::Parity;
  if (name == "mnist") return TaskKind::Mnist;
  if (name == "pointcloud") return TaskKind::PointCloud;
  throw std::invalid_argument("unknown task '" + name + "' (expected parity|mnist|pointcloud)");
}

Batch make_batch(const TaskData& task, const std::vector<Example>& split,
                 std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch needs at least one example");
  const bool lookup = task.token_map == TokenMap::Lookup;
  int n = 0;
  for (auto i : indices) n = std::max(n, split.at(i).tokens);
  Batch b;
  b.size = static_cast<std::int64_t>(indices.size());
  b.tokens = n;
  b.feature_dim = lookup ? 1 : task.feature_dim;
  if (lookup) {
    b.ids.assign(static_cast<std::size_t>(b.size * n), 0);
  } else {
    b.features.assign(static_cast<std::size_t>(b.size * n * b.feature_dim), 0.0);
  }
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Example& e = split[indices[r]];
    if (lookup) {
      std::copy(e.ids.begin(), e.ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * n));
    } else {
      std::copy(e.features.begin(), e.features.end(),
                b.features.begin() + static_cast<std::ptrdiff_t>(r * n * b.feature_dim));
    }
    b.lengths.push_back(e.tokens);
    b.labels.push_back(e.label);
  }
  return b;
}

Batch make_batch(const TaskData& task, const std::vector<Example>& split) {
  std::vector<std::size_t> all(split.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(task, split, all);
}

namespace {

void split_tail(std::vector<Example>&& all, double test_fraction, TaskData& out) {
  if (test_fraction < 0.0 || test_fraction >= 1.0)
    throw ContractError("test_fraction must lie in [0, 1)");
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * all.size()));
  const auto cut = all.size() - n_test;
  out.train.assign(std::make_move_iterator(all.begin()),
                   std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cut)));
  out.test.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cut)),
                  std::make_move_iterator(all.end()));
}

}  // namespace

// ---- parity ---------------------------------------------------------------

int parity_label(std::span<const int> bits) {
  int p = 0;
  for (int b : bits) p ^= (b & 1);
  return p;
}

TaskData gen_parity(std::size_t count, int max_len, std::uint64_t seed, double test_fraction) {
  if (max_len < 1) throw ContractError("parity max_len must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len_dist(1, max_len);
  std::bernoulli_distribution bit;
  std::vector<Example> all(count);
  for (auto& e : all) {
    e.tokens = len_dist(rng);
    e.ids.resize(static_cast<std::size_t>(e.tokens));
    for (auto& v : e.ids) v = bit(rng) ? 1 : 0;
    e.label = parity_label(e.ids);
  }
  TaskData t;
  t.kind = TaskKind::Parity;
  t.token_map = TokenMap::Lookup;
  t.feature_dim = 2;
  t.max_tokens = max_len;
  t.classes = 2;
  split_tail(std::move(all), test_fraction, t);
  return t;
}

// ---- IDX --------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

IdxFile parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX header truncated at byte offset " + std::to_string(bytes.size()));
  IdxFile f;
  f.magic = read_be32(bytes, 0);
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("bad IDX magic at byte offset 0");
  if (bytes[2] != 0x08) throw FormatError("unsupported IDX element type at byte offset 2 (only unsigned bytes)");
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError("IDX rank 0 at byte offset 3");
  std::size_t pos = 4;
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    if (pos + 4 > bytes.size()) throw FormatError("IDX header truncated at byte offset " + std::to_string(pos));
    f.dims.push_back(read_be32(bytes, pos));
    total *= f.dims.back();
    pos += 4;
  }
  const std::size_t have = bytes.size() - pos;
  if (have < total)
    throw FormatError("IDX payload truncated at byte offset " + std::to_string(bytes.size()) + " (expected " +
                      std::to_string(total) + " payload bytes, found " + std::to_string(have) + ")");
  if (have > total) throw FormatError("trailing bytes after IDX payload at byte offset " + std::to_string(pos + total));
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return f;
}

std::vector<std::uint8_t> serialize_idx(const IdxFile& file) {
  if (file.dims.empty() || file.dims.size() > 255) throw ContractError("IDX rank must lie in [1, 255]");
  if ((file.magic & 0xFF) != file.dims.size() || (file.magic >> 8) != 0x08)
    throw ContractError("IDX magic does not match the declared rank/type");
  std::uint64_t total = 1;
  for (auto d : file.dims) total *= d;
  if (total != file.payload.size()) throw ContractError("IDX payload length differs from the product of extents");
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * file.dims.size() + file.payload.size());
  put_be32(out, file.magic);
  for (auto d : file.dims) put_be32(out, d);
  out.insert(out.end(), file.payload.begin(), file.payload.end());
  return out;
}

IdxFile read_idx_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open IDX file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_idx(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.filename().string() + ": " + e.what());
  }
}

void write_idx_file(const std::filesystem::path& path, const IdxFile& file) {
  const auto bytes = serialize_idx(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write IDX file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> image_to_patches(std::span<const std::uint8_t> image, int rows, int cols) {
  if (rows % kPatch != 0 || cols % kPatch != 0)
    throw DimensionError("image extents must be multiples of the patch size");
  if (image.size() != static_cast<std::size_t>(rows) * cols) throw DimensionError("image byte count mismatch");
  const int pr = rows / kPatch, pc = cols / kPatch;
  std::vector<double> out;
  out.reserve(image.size());
  for (int py = 0; py < pr; ++py)
    for (int px = 0; px < pc; ++px)
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; ++x)
          out.push_back(image[static_cast<std::size_t>((py * kPatch + y) * cols + px * kPatch + x)] / 255.0);
  return out;
}

namespace {

struct IdxPair {
  IdxFile images, labels;
  int rows = 0, cols = 0;
  std::size_t count = 0;
};

IdxPair load_pair(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxPair p{read_idx_file(images), read_idx_file(labels)};
  if (p.images.magic != kIdxImagesMagic)
    throw FormatError(images.filename().string() + ": image magic mismatch at byte offset 0");
  if (p.labels.magic != kIdxLabelsMagic)
    throw FormatError(labels.filename().string() + ": label magic mismatch at byte offset 0");
  if (p.images.dims[0] != p.labels.dims[0])
    throw FormatError("image and label files disagree on the example count");
  p.count = p.images.dims[0];
  p.rows = static_cast<int>(p.images.dims[1]);
  p.cols = static_cast<int>(p.images.dims[2]);
  for (std::size_t i = 0; i < p.count; ++i)
    if (p.labels.payload[i] > 9)
      throw FormatError(labels.filename().string() + ": label out of range at byte offset " + std::to_string(8 + i));
  return p;
}

Example mnist_example(const IdxPair& p, std::size_t i) {
  const std::size_t px = static_cast<std::size_t>(p.rows) * p.cols;
  Example e;
  e.features = image_to_patches(std::span(p.images.payload).subspan(i * px, px), p.rows, p.cols);
  e.tokens = (p.rows / kPatch) * (p.cols / kPatch);
  e.label = p.labels.payload[i];
  return e;
}

// Shuffled indices per digit.
std::array<std::vector<std::size_t>, 10> by_class(const IdxPair& p, std::mt19937_64& rng) {
  std::array<std::vector<std::size_t>, 10> out;
  for (std::size_t i = 0; i < p.count; ++i) out[p.labels.payload[i]].push_back(i);
  for (auto& v : out) std::shuffle(v.begin(), v.end(), rng);
  return out;
}

}  // namespace

TaskData load_mnist_subset(const std::filesystem::path& dir, int train_per_class, int test_per_class,
                           std::uint64_t seed) {
  if (train_per_class < 1 || test_per_class < 0) throw ContractError("per-class counts must be positive");
  const IdxPair train = load_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  if (train.images.dims.size() != 3) throw FormatError("image file must have rank 3");
  const bool has_test = std::filesystem::exists(dir / "t10k-images-idx3-ubyte");
  std::mt19937_64 rng(seed);
  const auto train_idx = by_class(train, rng);

  TaskData t;
  t.kind = TaskKind::Mnist;
  t.token_map = TokenMap::Linear;
  t.feature_dim = kPatch * kPatch;
  t.max_tokens = (train.rows / kPatch) * (train.cols / kPatch);
  t.classes = 10;

  auto take = [](const std::vector<std::size_t>& pool, std::size_t from, int want, int digit) {
    if (pool.size() < from + static_cast<std::size_t>(want))
      throw ContractError("not enough images of digit " + std::to_string(digit) + " for the requested subset");
    return std::span(pool).subspan(from, static_cast<std::size_t>(want));
  };
  for (int c = 0; c < 10; ++c)
    for (auto i : take(train_idx[c], 0, train_per_class, c)) t.train.push_back(mnist_example(train, i));

  if (has_test) {
    const IdxPair test = load_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
    const auto test_idx = by_class(test, rng);
    for (int c = 0; c < 10; ++c)
      for (auto i : take(test_idx[c], 0, test_per_class, c)) t.test.push_back(mnist_example(test, i));
  } else {
    for (int c = 0; c < 10; ++c)
      for (auto i : take(train_idx[c], static_cast<std::size_t>(train_per_class), test_per_class, c))
        t.test.push_back(mnist_example(train, i));
  }
  // Interleave classes so that contiguous slices stay balanced.
  std::shuffle(t.train.begin(), t.train.end(), rng);
  std::shuffle(t.test.begin(), t.test.end(), rng);
  return t;
}

// ---- point clouds -----------------------------------------------------------

std::vector<double> sample_shape(Shape2D shape, int points, std::uint64_t seed, std::vector<double>* aux) {
  if (points < 8) throw ContractError("points_per_cloud must be >= 8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kPointNoise);
  const double pi = std::numbers::pi;
  const double cx = 2.0 * unit(rng) - 1.0, cy = 2.0 * unit(rng) - 1.0;
  const double r = 0.6 + 0.8 * unit(rng);
  const double rot = 2.0 * pi * unit(rng);
  const double cr = std::cos(rot), sr = std::sin(rot);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(2 * points));
  for (int i = 0; i < points; ++i) {
    double x = 0, y = 0;
    const double u = unit(rng);
    switch (shape) {
      case Shape2D::Circle:
        x = r * std::cos(2 * pi * u);
        y = r * std::sin(2 * pi * u);
        break;
      case Shape2D::Square: {
        // Perimeter of a square with half-side r.
        const double s = 4.0 * u;
        const int side = std::min(3, static_cast<int>(s));
        const double t = 2.0 * (s - side) - 1.0;
        const double xs[4] = {t, 1.0, -t, -1.0}, ys[4] = {-1.0, t, 1.0, -t};
        x = r * xs[side];
        y = r * ys[side];
        break;
      }
      case Shape2D::TwoMoons: {
        // Two interleaved half circles, centred on the origin.
        const double a = pi * unit(rng);
        if (u < 0.5) {
          x = std::cos(a) - 0.5;
          y = std::sin(a) - 0.25;
        } else {
          x = 0.5 - std::cos(a);
          y = 0.25 - std::sin(a);
        }
        x *= r;
        y *= r;
        break;
      }
    }
    x += noise(rng);
    y += noise(rng);
    out.push_back(cx + cr * x - sr * y);
    out.push_back(cy + sr * x + cr * y);
  }
  if (aux) *aux = {cx, cy, r, rot};
  return out;
}

TaskData gen_pointcloud(std::size_t count, int points_per_cloud, std::uint64_t seed, double test_fraction) {
  std::mt19937_64 rng(seed);
  std::vector<Example> all(count);
  for (std::size_t i = 0; i < count; ++i) {
    Example& e = all[i];
    e.label = static_cast<int>(i % 3);
    e.tokens = points_per_cloud;
    e.features = sample_shape(static_cast<Shape2D>(e.label), points_per_cloud, rng(), &e.aux);
  }
  TaskData t;
  t.kind = TaskKind::PointCloud;
  t.token_map = TokenMap::Linear;
  t.feature_dim = 2;
  t.max_tokens = points_per_cloud;
  t.classes = 3;
  split_tail(std::move(all), test_fraction, t);
  return t;
}

// ---- cache ------------------------------------------------------------------

namespace {

constexpr char kTaskMagic[8] = {'O', 'T', 'F', 'T', 'A', 'S', 'K', '\0'};

void put_split(detail::Writer& w, const std::vector<Example>& split) {
  w.put(static_cast<std::uint64_t>(split.size()));
  for (const auto& e : split) {
    w.put(static_cast<std::int32_t>(e.tokens));
    w.put(static_cast<std::int32_t>(e.label));
    w.put(static_cast<std::uint32_t>(e.features.size()));
    for (double v : e.features) w.put(v);
    w.put(static_cast<std::uint32_t>(e.ids.size()));
    for (int v : e.ids) w.put(static_cast<std::int32_t>(v));
    w.put(static_cast<std::uint32_t>(e.aux.size()));
    for (double v : e.aux) w.put(v);
  }
}

std::vector<Example> get_split(detail::Reader& r, std::int64_t classes) {
  const auto n = r.get<std::uint64_t>();
  std::vector<Example> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    Example e;
    e.tokens = r.get<std::int32_t>();
    const auto off = r.offset();
    e.label = r.get<std::int32_t>();
    if (e.label < 0 || e.label >= classes)
      throw FormatError("label out of range at byte offset " + std::to_string(off));
    e.features.resize(r.get<std::uint32_t>());
    for (auto& v : e.features) v = r.get<double>();
    e.ids.resize(r.get<std::uint32_t>());
    for (auto& v : e.ids) v = r.get<std::int32_t>();
    e.aux.resize(r.get<std::uint32_t>());
    for (auto& v : e.aux) v = r.get<double>();
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

void save_task_cache(const std::filesystem::path& path, const TaskData& task, const std::string& key) {
  detail::Writer w;
  w.put_raw(kTaskMagic, 8);
  w.put(kTaskCacheVersion);
  w.put_string(key);
  w.put(static_cast<std::uint8_t>(task.kind));
  w.put(static_cast<std::uint8_t>(task.token_map));
  w.put(task.feature_dim);
  w.put(task.max_tokens);
  w.put(task.classes);
  put_split(w, task.train);
  put_split(w, task.test);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write task cache " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
}

TaskData load_task_cache(const std::filesystem::path& path, const std::string& key) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open task cache " + path.string());
  detail::Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
  char magic[8];
  r.get_raw(magic, 8);
  if (std::memcmp(magic, kTaskMagic, 8) != 0) throw FormatError("bad task cache magic at byte offset 0");
  if (const auto v = r.get<std::uint32_t>(); v != kTaskCacheVersion)
    throw FormatError("unsupported task cache version " + std::to_string(v));
  if (const auto k = r.get_string(); k != key)
    throw FormatError("task cache was written for key '" + k + "', requested '" + key + "'");
  TaskData t;
  const auto kind = r.get<std::uint8_t>();
  const auto map = r.get<std::uint8_t>();
  if (kind > 2 || map > 1) throw FormatError("invalid task tag at byte offset " + std::to_string(r.offset() - 2));
  t.kind = static_cast<TaskKind>(kind);
  t.token_map = static_cast<TokenMap>(map);
  t.feature_dim = r.get<std::int64_t>();
  t.max_tokens = r.get<std::int64_t>();
  t.classes = r.get<std::int64_t>();
  t.train = get_split(r, t.classes);
  t.test = get_split(r, t.classes);
  if (!r.done()) throw FormatError("trailing bytes at byte offset " + std::to_string(r.offset()));
  return t;
}

}  // namespace otf
