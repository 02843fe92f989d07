#include <doctest.h>

#include <fstream>

#include "otformer/checkpoint.hpp"
#include "otformer/model.hpp"
#include "support.hpp"

using namespace otf;
using namespace otf::test;

namespace {

ModelConfig tiny(Variant v, std::int64_t depth = 1) {
  ModelConfig c;
  c.variant = v;
  c.d = 4;
  c.k = 2;
  c.heads = 2;
  c.depth = depth;
  c.input_dim = 3;
  c.max_tokens = 5;
  c.classes = 3;
  c.integrator = {Scheme::ForwardEuler, 2, 1.0};
  return c;
}

Batch feature_batch(std::int64_t bsz, std::int64_t n, std::int64_t fdim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Batch b;
  b.size = bsz;
  b.tokens = n;
  b.feature_dim = fdim;
  for (std::int64_t i = 0; i < bsz * n * fdim; ++i) b.features.push_back(u(rng));
  b.lengths.assign(static_cast<std::size_t>(bsz), static_cast<int>(n));
  b.labels.assign(static_cast<std::size_t>(bsz), 0);
  return b;
}

// Perturbs every weight away from its structured init so that zero biases
// and unit gains cannot hide mistakes.
template <typename T>
void jitter(Model<T>& m, std::uint64_t seed, double amp = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amp, amp);
  m.visit_parameters([&](const std::string&, Tensor<T>& t) {
    for (auto& v : t.mutable_data()) v += static_cast<T>(u(rng));
  });
}

}  // namespace

TEST_CASE("variant and pooling names round-trip") {
  for (auto v : {Variant::VanillaDiscrete, Variant::OTContinuous, Variant::NODEBlockwise})
    CHECK(parse_variant(to_string(v)) == v);
  CHECK(parse_pooling("cls") == Pooling::Cls);
  CHECK_THROWS_AS(parse_variant("resnet"), std::invalid_argument);
}

TEST_CASE("linear token map embeds raw features, positional rows added") {
  auto cfg = tiny(Variant::OTContinuous);
  auto m = Model<double>::initialise(cfg, 1);
  jitter(m, 2);
  auto batch = feature_batch(2, 4, 3, 3);
  auto emb = m.embed(batch);
  CHECK(emb.states.shape() == Shape{2, 4, 4});
  CHECK_FALSE(emb.padded);
  const auto& w = m.weights().embed;
  // token 1 of sample 1, feature row 2
  double expect = w.token_bias->at(2) + w.positional->at(1 * 4 + 2);
  for (int c = 0; c < 3; ++c) expect += w.token_weight.at(2 * 3 + c) * batch.features[(4 + 1) * 3 + c];
  CHECK(emb.states.at((4 + 1) * 4 + 2) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("cls pooling prepends a slot") {
  auto cfg = tiny(Variant::OTContinuous);
  cfg.pooling = Pooling::Cls;
  auto m = Model<double>::initialise(cfg, 1);
  auto emb = m.embed(feature_batch(1, 5, 3, 4));
  CHECK(emb.states.shape() == Shape{1, 6, 4});
  CHECK(emb.counts[0] == 6);
  CHECK(m.weights().embed.positional->dim(0) == 6);
}

TEST_CASE("lookup token map: vocabulary and length errors") {
  auto cfg = tiny(Variant::OTContinuous);
  cfg.token_map = TokenMap::Lookup;
  cfg.input_dim = 2;
  auto m = Model<double>::initialise(cfg, 1);
  Batch b;
  b.size = 1;
  b.tokens = 3;
  b.ids = {0, 1, 2};
  b.lengths = {3};
  b.labels = {0};
  CHECK_THROWS_AS(m.embed(b), VocabularyError);
  b.ids = {0, 1, 1};
  auto emb = m.embed(b);
  const auto& table = m.weights().embed.token_weight;
  CHECK(emb.states.at(4 + 3) == table.at(4 + 3) + m.weights().embed.positional->at(4 + 3));

  b.tokens = 6;
  b.ids.assign(6, 0);
  CHECK_THROWS_AS(m.embed(b), LengthError);
}

TEST_CASE("D=1 single Euler step equals the vanilla residual update bitwise") {
  auto base = tiny(Variant::VanillaDiscrete);
  auto van = Model<double>::initialise(base, 5);
  jitter(van, 6);
  auto ot_cfg = base;
  ot_cfg.variant = Variant::OTContinuous;
  ot_cfg.integrator = single_step_equivalence_input();
  Model<double> ot(ot_cfg, van.weights());
  auto batch = feature_batch(3, 4, 3, 7);
  auto a = van.forward(batch), b = ot.forward(batch);
  CHECK(bitwise_equal(a.logits, b.logits));
  CHECK(bitwise_equal(a.final_state, b.final_state));
  CHECK(a.transport_cost_raw.at(0) == 0.0);
  CHECK(b.transport_cost_raw.at(0) > 0.0);
}

TEST_CASE("N-ODE removes the fc skip: its velocity is OT's velocity minus U") {
  auto node_cfg = tiny(Variant::NODEBlockwise);
  auto node = Model<double>::initialise(node_cfg, 8);
  jitter(node, 9);
  CHECK_FALSE(node.weights().stack.skip_in_fc);
  auto ot_cfg = node_cfg;
  ot_cfg.variant = Variant::OTContinuous;
  auto w = node.weights();
  w.stack.skip_in_fc = true;
  Model<double> ot(ot_cfg, w);

  std::mt19937_64 rng(10);
  auto x = rand_tensor({2, 3, 4}, rng, false);
  auto fn = node.velocity(x, {}, false, 0);
  auto fo = ot.velocity(x, {}, false);
  auto u = self_attention(x, node.weights().stack.blocks[0]);
  CHECK(max_abs_diff(fo, add(u, fn)) < 1e-14);
}

TEST_CASE("N-ODE and OT trajectories differ for D=2") {
  auto node_cfg = tiny(Variant::NODEBlockwise, 2);
  auto node = Model<double>::initialise(node_cfg, 11);
  auto ot_cfg = node_cfg;
  ot_cfg.variant = Variant::OTContinuous;
  auto w = node.weights();
  w.stack.skip_in_fc = true;
  Model<double> ot(ot_cfg, w);
  auto batch = feature_batch(2, 3, 3, 12);
  CHECK_FALSE(bitwise_equal(node.forward(batch).final_state, ot.forward(batch).final_state));
}

TEST_CASE("pooling examples") {
  auto x = TD::from({1, 3, 2}, {1, 2, 3, 4, 5, 9});
  auto cls = pool(x, Pooling::Cls);
  CHECK(cls.shape() == Shape{1, 2});
  CHECK(cls.at(0) == 1.0);
  CHECK(cls.at(1) == 2.0);
  auto mean = pool(x, Pooling::Mean);
  CHECK(mean.at(0) == 3.0);
  CHECK(mean.at(1) == 5.0);
  const std::vector<double> mask = {1, 1, 0};
  auto masked = pool(x, Pooling::Mean, std::span<const double>(mask));
  CHECK(masked.at(0) == 2.0);
  CHECK(masked.at(1) == 3.0);
}

TEST_CASE("padding does not change a sample's logits") {
  auto cfg = tiny(Variant::OTContinuous);
  cfg.positional = false;
  auto m = Model<double>::initialise(cfg, 13);
  jitter(m, 14);
  auto full = feature_batch(1, 3, 3, 15);
  auto padded = full;
  padded.tokens = 5;
  padded.features.resize(15, 7.0);
  auto a = m.forward(full), b = m.forward(padded);
  CHECK(max_abs_diff(a.logits, b.logits) < 1e-12);
  CHECK(std::abs(a.transport_cost_raw.at(0) - b.transport_cost_raw.at(0)) < 1e-12);
  CHECK(b.token_counts[0] == 3);
}

TEST_CASE("parameter counts: shared OT at d=64 vs vanilla at d=128") {
  auto mk = [](Variant v, std::int64_t d, std::int64_t depth) {
    ModelConfig c;
    c.variant = v;
    c.d = c.k = d;
    c.heads = 1;
    c.depth = depth;
    c.input_dim = 49;
    c.max_tokens = 16;
    c.pooling = Pooling::Cls;
    c.classes = 10;
    return Model<float>::initialise(c, 0);
  };
  auto ot = mk(Variant::OTContinuous, 64, 1);
  auto van = mk(Variant::VanillaDiscrete, 128, 1);
  auto node = mk(Variant::NODEBlockwise, 64, 1);
  const double reduction = 1.0 - static_cast<double>(ot.parameter_count()) / van.parameter_count();
  MESSAGE("OT " << ot.parameter_count() << " vs vanilla " << van.parameter_count());
  CHECK(reduction >= 0.7);
  CHECK(node.parameter_count() == ot.parameter_count());
  // attention 4dk + fc (2 * 4d^2 + 5d) + two norms 4d
  CHECK(ot.block_parameter_count() == 4 * 64 * 64 + 8 * 64 * 64 + 5 * 64 + 4 * 64);
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  auto dir = scratch_dir("ckpt");
  for (auto v : {Variant::VanillaDiscrete, Variant::OTContinuous, Variant::NODEBlockwise}) {
    auto cfg = tiny(v, 2);
    cfg.pooling = Pooling::Cls;
    auto m = Model<float>::initialise(cfg, 21);
    jitter(m, 22);
    save_checkpoint(dir / "m.ckpt", m, "echo text");
    std::string echo;
    auto back = load_checkpoint<float>(dir / "m.ckpt", &echo);
    CHECK(echo == "echo text");
    CHECK(back.config().variant == v);
    auto p = m.parameters(), q = back.parameters();
    REQUIRE(p.size() == q.size());
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(bitwise_equal(p[i], q[i]));
    auto batch = feature_batch(2, 4, 3, 23);
    CHECK(bitwise_equal(m.forward(batch).logits, back.forward(batch).logits));
  }
  CHECK(read_checkpoint_header(dir / "m.ckpt").precision == Precision::F32);
  CHECK_THROWS_AS(load_checkpoint<double>(dir / "m.ckpt"), FormatError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto dir = scratch_dir("ckpt_bad");
  auto m = Model<double>::initialise(tiny(Variant::OTContinuous), 1);
  save_checkpoint(dir / "m.ckpt", m, "");
  std::ifstream in(dir / "m.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});

  auto write = [&](const std::string& s) {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << s;
  };
  write(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(load_checkpoint<double>(dir / "bad.ckpt"), FormatError);
  auto wrong_magic = bytes;
  wrong_magic[0] = 'X';
  write(wrong_magic);
  CHECK_THROWS_AS(load_checkpoint<double>(dir / "bad.ckpt"), FormatError);
  write(bytes + "trailing");
  CHECK_THROWS_AS(load_checkpoint<double>(dir / "bad.ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint<double>(dir / "missing.ckpt"), std::exception);
}

TEST_CASE("logit gradients through the OT model match finite differences") {
  auto cfg = tiny(Variant::OTContinuous, 2);
  cfg.integrator = {Scheme::RK4, 2, 1.0};
  auto m = Model<double>::initialise(cfg, 31);
  jitter(m, 32);
  auto batch = feature_batch(2, 3, 3, 33);
  batch.lengths = {3, 2};
  CHECK(fd_rel_error(project([&] { return m.forward(batch).logits; }), m.parameters()) < 1e-4);
}
