#include <doctest.h>

#include <fstream>
#include <numeric>

#include "otformer/config.hpp"
#include "otformer/data.hpp"
#include "otformer/training.hpp"
#include "support.hpp"

using namespace otf;
using namespace otf::test;

namespace {

const std::filesystem::path kMnistDir = OTF_SOURCE_DIR "/data/mnist";

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Handcrafted cloud features: relative radial spread and the mean distance
// from the centroid to the point-cloud's farthest point over mean radius.
std::array<double, 2> cloud_features(const std::vector<double>& pts) {
  const std::size_t m = pts.size() / 2;
  double cx = 0, cy = 0;
  for (std::size_t i = 0; i < m; ++i) cx += pts[2 * i] / m, cy += pts[2 * i + 1] / m;
  std::vector<double> r(m);
  for (std::size_t i = 0; i < m; ++i) r[i] = std::hypot(pts[2 * i] - cx, pts[2 * i + 1] - cy);
  const double mean = std::accumulate(r.begin(), r.end(), 0.0) / m;
  double var = 0;
  for (double v : r) var += (v - mean) * (v - mean) / m;
  const double far = *std::max_element(r.begin(), r.end());
  return {std::sqrt(var) / mean, far / mean};
}

}  // namespace

TEST_CASE("parity labels") {
  const std::vector<int> a = {1, 0, 1}, b = {1}, c = {0};
  CHECK(parity_label(a) == 0);
  CHECK(parity_label(b) == 1);
  CHECK(parity_label(c) == 0);
}

TEST_CASE("parity generator: lengths, labels, balance, determinism") {
  auto data = gen_parity(10000, 16, 0);
  CHECK(data.train.size() == 8000);
  CHECK(data.test.size() == 2000);
  CHECK(data.token_map == TokenMap::Lookup);
  CHECK(data.feature_dim == 2);
  int ones = 0, total = 0;
  for (const auto* split : {&data.train, &data.test})
    for (const auto& e : *split) {
      CHECK(e.tokens >= 1);
      CHECK(e.tokens <= 16);
      CHECK(e.label == parity_label(e.ids));
      ones += e.label;
      ++total;
    }
  const double frac = static_cast<double>(ones) / total;
  MESSAGE("label balance " << frac);
  CHECK(frac >= 0.45);
  CHECK(frac <= 0.55);

  auto again = gen_parity(10000, 16, 0);
  CHECK(again.train[17].ids == data.train[17].ids);
  CHECK(gen_parity(50, 16, 1).train[0].ids != gen_parity(50, 16, 2).train[0].ids);
  CHECK_THROWS_AS(gen_parity(10, 0, 0), ContractError);
}

TEST_CASE("make_batch right-pads to the longest example") {
  auto data = gen_parity(20, 8, 3);
  const std::vector<std::size_t> idx = {0, 1, 2};
  auto b = make_batch(data, data.train, idx);
  int longest = 0;
  for (auto i : idx) longest = std::max(longest, data.train[i].tokens);
  CHECK(b.tokens == longest);
  CHECK(b.ids.size() == static_cast<std::size_t>(3 * longest));
  CHECK(b.lengths[1] == data.train[1].tokens);
  CHECK(b.labels[2] == data.train[2].label);
}

TEST_CASE("IDX round trip and errors") {
  IdxFile f;
  f.magic = kIdxImagesMagic;
  f.dims = {2, 3, 2};
  f.payload = {0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255};
  auto bytes = serialize_idx(f);
  CHECK(bytes.size() == 4 + 12 + 12);
  CHECK(bytes[3] == 3);
  CHECK(bytes[7] == 2);  // big-endian extent
  auto back = parse_idx(bytes);
  CHECK(back.magic == f.magic);
  CHECK(back.dims == f.dims);
  CHECK(back.payload == f.payload);
  CHECK(serialize_idx(back) == bytes);

  auto truncated = bytes;
  truncated.pop_back();
  try {
    parse_idx(truncated);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  auto bad = bytes;
  bad[2] = 0x0D;
  CHECK_THROWS_AS(parse_idx(bad), FormatError);
  bad = bytes;
  bad[0] = 1;
  CHECK_THROWS_AS(parse_idx(bad), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(parse_idx(extra), FormatError);
  CHECK_THROWS_AS(parse_idx(std::vector<std::uint8_t>{0, 0}), FormatError);
  CHECK_THROWS(read_idx_file("/nonexistent/train-images-idx3-ubyte"));
}

TEST_CASE("MNIST files: header magic values and byte-exact round trip") {
  if (!std::filesystem::exists(kMnistDir / "train-images-idx3-ubyte")) return;
  for (const char* name : {"train-images-idx3-ubyte", "t10k-images-idx3-ubyte"}) {
    const auto raw = read_bytes(kMnistDir / name);
    auto f = parse_idx(raw);
    CHECK(f.magic == 2051);
    CHECK(f.dims[1] == 28);
    CHECK(serialize_idx(f) == raw);
  }
  for (const char* name : {"train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"}) {
    const auto raw = read_bytes(kMnistDir / name);
    CHECK(parse_idx(raw).magic == 2049);
    CHECK(serialize_idx(parse_idx(raw)) == raw);
  }
}

TEST_CASE("image patching") {
  std::vector<std::uint8_t> img(28 * 28);
  for (int r = 0; r < 28; ++r)
    for (int c = 0; c < 28; ++c) img[r * 28 + c] = static_cast<std::uint8_t>(r * 7 + c % 7);
  auto p = image_to_patches(img, 28, 28);
  CHECK(p.size() == 16 * 49);
  // token 5 is patch row 1, col 1; its feature (2, 3) is pixel (9, 10)
  CHECK(p[5 * 49 + 2 * 7 + 3] == doctest::Approx((9 * 7 + 10 % 7) / 255.0));
  for (double v : p) CHECK((v >= 0.0 && v <= 1.0));

  std::vector<std::uint8_t> zero(28 * 28, 0);
  for (double v : image_to_patches(zero, 28, 28)) CHECK(v == 0.0);
  CHECK_THROWS_AS(image_to_patches(zero, 27, 28), DimensionError);
}

TEST_CASE("MNIST subset sampling is class-balanced and deterministic") {
  if (!std::filesystem::exists(kMnistDir / "train-images-idx3-ubyte")) return;
  auto data = load_mnist_subset(kMnistDir, 10, 5, 0);
  CHECK(data.train.size() == 100);
  CHECK(data.test.size() == 50);
  std::array<int, 10> counts{};
  for (const auto& e : data.train) {
    ++counts[e.label];
    CHECK(e.tokens == 16);
    CHECK(e.features.size() == 16 * 49);
  }
  for (int c : counts) CHECK(c == 10);
  CHECK(data.classes == 10);
  auto again = load_mnist_subset(kMnistDir, 10, 5, 0);
  CHECK(again.train[3].features == data.train[3].features);
  auto other = load_mnist_subset(kMnistDir, 10, 5, 1);
  CHECK(other.train[3].features != data.train[3].features);
  CHECK_THROWS(load_mnist_subset("/nonexistent", 10, 5, 0));
}

TEST_CASE("circle samples stay within 4 sigma of the radius") {
  int inside = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<double> aux;
    auto pts = sample_shape(Shape2D::Circle, 64, seed, &aux);
    for (std::size_t i = 0; i < pts.size() / 2; ++i) {
      const double dist = std::hypot(pts[2 * i] - aux[0], pts[2 * i + 1] - aux[1]);
      inside += std::abs(dist - aux[2]) <= 4 * kPointNoise;
      ++total;
    }
  }
  CHECK(static_cast<double>(inside) / total >= 0.99);
}

TEST_CASE("point-cloud generator: balance and labels") {
  auto data = gen_pointcloud(300, 32, 0);
  std::array<int, 3> counts{};
  for (const auto* split : {&data.train, &data.test})
    for (const auto& e : *split) {
      ++counts[e.label];
      CHECK(e.tokens == 32);
    }
  for (int c : counts) CHECK(c == 100);
  CHECK_THROWS_AS(gen_pointcloud(10, 4, 0), ContractError);
}

TEST_CASE("nearest-centroid baseline separates the shapes") {
  auto data = gen_pointcloud(600, 64, 0);
  std::array<std::array<double, 2>, 3> centroid{};
  std::array<int, 3> n{};
  for (const auto& e : data.train) {
    auto f = cloud_features(e.features);
    centroid[e.label][0] += f[0];
    centroid[e.label][1] += f[1];
    ++n[e.label];
  }
  for (int c = 0; c < 3; ++c) centroid[c][0] /= n[c], centroid[c][1] /= n[c];
  int hits = 0;
  for (const auto& e : data.test) {
    auto f = cloud_features(e.features);
    int best = 0;
    double bd = 1e300;
    for (int c = 0; c < 3; ++c) {
      const double dd = std::hypot(f[0] - centroid[c][0], f[1] - centroid[c][1]);
      if (dd < bd) bd = dd, best = c;
    }
    hits += best == e.label;
  }
  const double acc = static_cast<double>(hits) / data.test.size();
  MESSAGE("nearest-centroid accuracy " << acc);
  CHECK(acc >= 0.8);
}

TEST_CASE("point-cloud logits are invariant under point permutation (f32, no positional)") {
  auto data = gen_pointcloud(6, 16, 4);
  auto cfg = default_config(TaskKind::PointCloud).train.model;
  REQUIRE_FALSE(cfg.positional);
  configure_for_task(cfg, data);
  auto model = Model<float>::initialise(cfg, 3);
  auto permuted = data;
  std::mt19937_64 rng(5);
  for (auto& e : permuted.train) {
    std::vector<int> perm(e.tokens);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> f(e.features.size());
    for (int j = 0; j < e.tokens; ++j)
      for (int c = 0; c < 2; ++c) f[j * 2 + c] = e.features[perm[j] * 2 + c];
    e.features = f;
  }
  auto a = model.forward(make_batch(data, data.train)).logits;
  auto b = model.forward(make_batch(permuted, permuted.train)).logits;
  CHECK(max_abs_diff(a, b) < 1e-5);
}

TEST_CASE("generators are deterministic; task cache round-trips") {
  auto a = gen_pointcloud(30, 16, 9), b = gen_pointcloud(30, 16, 9);
  CHECK(a.train[4].features == b.train[4].features);
  auto dir = scratch_dir("cache");
  save_task_cache(dir / "pc.bin", a, "pointcloud/9/30/16");
  auto back = load_task_cache(dir / "pc.bin", "pointcloud/9/30/16");
  CHECK(back.train.size() == a.train.size());
  CHECK(back.test[2].features == a.test[2].features);
  CHECK(back.train[7].label == a.train[7].label);
  CHECK(back.train[7].aux == a.train[7].aux);
  CHECK_THROWS_AS(load_task_cache(dir / "pc.bin", "pointcloud/9/30/17"), FormatError);

  auto p = gen_parity(30, 8, 2);
  save_task_cache(dir / "par.bin", p, "k");
  CHECK(load_task_cache(dir / "par.bin", "k").train[3].ids == p.train[3].ids);
}
