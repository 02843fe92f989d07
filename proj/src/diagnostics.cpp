#include "otformer/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>

#include "otformer/ops.hpp"
#include "otformer/transformer.hpp"

namespace otf {

// ---- step sweep ---------------------------------------------------------------

template <typename T>
std::vector<SweepRow> sweep_steps(const Model<T>& model, const TaskData& task, const std::vector<Example>& split,
                                  const std::vector<int>& steps, int batch_size) {
  if (!model.config().continuous())
    throw VariantError("step sweeps need a continuous-time variant, got " + to_string(model.config().variant));
  std::vector<SweepRow> rows;
  for (int n : steps) {
    ForwardOptions opts;
    opts.integrator = model.config().integrator;
    opts.integrator->steps = n;
    opts.integrator->validate();
    const EvalResult r = evaluate(model, task, split, batch_size, opts);
    rows.push_back({n, r.accuracy, r.loss});
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "steps,test_accuracy,test_loss\n" << std::setprecision(6);
  for (const auto& r : rows) out << r.steps << ',' << r.accuracy << ',' << r.loss << '\n';
}

// ---- straightness -----------------------------------------------------------

template <typename T>
StraightnessReport straightness_from_states(const std::vector<Tensor<T>>& states) {
  if (states.size() < 2) throw ContractError("straightness needs at least two recorded states");
  const auto& first = states.front();
  const auto bsz = first.dim(0);
  const auto per = static_cast<std::size_t>(first.numel() / bsz);
  StraightnessReport rep;
  std::vector<double> speeds;
  for (std::int64_t b = 0; b < bsz; ++b) {
    const auto off = static_cast<std::size_t>(b) * per;
    SampleStraightness s;
    speeds.clear();
    for (std::size_t k = 0; k + 1 < states.size(); ++k) {
      const auto x0 = states[k].data().subspan(off, per), x1 = states[k + 1].data().subspan(off, per);
      double sq = 0;
      for (std::size_t i = 0; i < per; ++i) {
        const double d = static_cast<double>(x1[i]) - static_cast<double>(x0[i]);
        sq += d * d;
      }
      speeds.push_back(std::sqrt(sq));
      s.arc_length += speeds.back();
    }
    const auto a = states.front().data().subspan(off, per), z = states.back().data().subspan(off, per);
    double sq = 0;
    for (std::size_t i = 0; i < per; ++i) {
      const double d = static_cast<double>(z[i]) - static_cast<double>(a[i]);
      sq += d * d;
    }
    s.displacement = std::sqrt(sq);
    if (s.displacement == 0.0) {
      s.degenerate = true;
      s.ratio = 1.0;
      ++rep.degenerate_count;
    } else {
      s.ratio = s.arc_length / s.displacement;
    }
    // Uniform steps within each segment, so step length is proportional to speed.
    const double mean = std::accumulate(speeds.begin(), speeds.end(), 0.0) / static_cast<double>(speeds.size());
    double var = 0;
    for (double v : speeds) var += (v - mean) * (v - mean);
    var /= static_cast<double>(speeds.size());
    s.speed_cv = mean > 0 ? std::sqrt(var) / mean : 0.0;
    rep.samples.push_back(s);
  }
  std::vector<double> ratios;
  for (const auto& s : rep.samples) {
    ratios.push_back(s.ratio);
    rep.mean_speed_cv += s.speed_cv;
  }
  rep.mean_speed_cv /= static_cast<double>(rep.samples.size());
  rep.mean_ratio = std::accumulate(ratios.begin(), ratios.end(), 0.0) / static_cast<double>(ratios.size());
  std::sort(ratios.begin(), ratios.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ratios.size())));
  rep.p95_ratio = ratios[std::clamp<std::size_t>(rank, 1, ratios.size()) - 1];
  return rep;
}

template <typename T>
StraightnessReport straightness(const Model<T>& model, const TaskData& task, const std::vector<Example>& split,
                                int max_samples) {
  if (!model.config().continuous())
    throw VariantError("straightness needs a continuous-time variant, got " + to_string(model.config().variant));
  if (split.empty()) throw ContractError("straightness needs at least one example");
  const auto n = std::min<std::size_t>(split.size(), static_cast<std::size_t>(max_samples));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.record_states = true;
  const auto res = model.forward(make_batch(task, split, idx), opts);
  std::vector<Tensor<T>> states;
  for (const auto& traj : res.trajectories)
    for (std::size_t k = states.empty() ? 0 : 1; k < traj.states.size(); ++k) states.push_back(traj.states[k]);
  return straightness_from_states(states);
}

void write_straightness_csv(std::ostream& out, const StraightnessReport& rep) {
  out << "sample,arc_length,displacement,ratio,speed_cv,degenerate\n" << std::setprecision(6);
  for (std::size_t i = 0; i < rep.samples.size(); ++i) {
    const auto& s = rep.samples[i];
    out << i << ',' << s.arc_length << ',' << s.displacement << ',' << s.ratio << ',' << s.speed_cv << ','
        << (s.degenerate ? 1 : 0) << '\n';
  }
  out << "mean,,," << rep.mean_ratio << ',' << rep.mean_speed_cv << ',' << rep.degenerate_count << '\n';
  out << "p95,,," << rep.p95_ratio << ",,\n";
}

// ---- ablation ---------------------------------------------------------------

namespace {

template <typename T>
AblationRow ablation_run(const ExperimentConfig& cfg, const TaskData& data, double lambda) {
  TrainConfig tc = cfg.train;
  tc.lambda = lambda;
  const auto res = train<T>(tc, data);
  AblationRow row;
  row.seed = tc.seed;
  row.lambda = lambda;
  row.nan_flag = res.record.aborted();
  for (const auto& r : res.record.rows) row.best_test_accuracy = std::max(row.best_test_accuracy, r.test_accuracy);
  if (!res.record.rows.empty()) row.final_test_accuracy = res.record.rows.back().test_accuracy;
  if (!row.nan_flag && res.model.config().continuous()) {
    try {
      row.mean_ratio = straightness(res.model, data, data.test).mean_ratio;
    } catch (const IntegrationBlowup&) {
      row.mean_ratio = std::nan("");
    }
  }
  return row;
}

}  // namespace

std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                std::ostream* progress) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds) {
    ExperimentConfig c = cfg;
    c.train.seed = seed;
    const TaskData data = load_task(c.task, seed);
    for (double lambda : {0.0, cfg.train.lambda}) {
      rows.push_back(c.train.precision == Precision::F64 ? ablation_run<double>(c, data, lambda)
                                                         : ablation_run<float>(c, data, lambda));
      if (progress) {
        const auto& r = rows.back();
        *progress << "seed " << seed << " lambda " << lambda << ": test acc " << r.final_test_accuracy
                  << " (best " << r.best_test_accuracy << ")" << (r.nan_flag ? " NaN" : "") << " ratio "
                  << r.mean_ratio << '\n';
      }
    }
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "seed,lambda,final_test_accuracy,best_test_accuracy,nan_flag,mean_ratio\n" << std::setprecision(6);
  for (const auto& r : rows)
    out << r.seed << ',' << r.lambda << ',' << r.final_test_accuracy << ',' << r.best_test_accuracy << ','
        << (r.nan_flag ? 1 : 0) << ',' << r.mean_ratio << '\n';
}

// ---- finite differences ------------------------------------------------------

namespace {

using TD = Tensor<double>;
using Fn = std::function<TD(const std::vector<TD>&)>;

TD random_leaf(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = u(rng);
  return TD::from(std::move(shape), std::move(v), true);
}

// Values bounded away from zero (for kinked ops).
TD random_offset_leaf(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::bernoulli_distribution sign;
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = sign(rng) ? u(rng) : -u(rng);
  return TD::from(std::move(shape), std::move(v), true);
}

// Reduces f to a scalar with a fixed random projection, then compares the
// reverse-mode gradient of every input against central differences.
double fd_check(const Fn& f, const std::vector<TD>& inputs, std::mt19937_64& rng, double h = 1e-5) {
  const TD probe = f(inputs);
  std::vector<double> proj(static_cast<std::size_t>(probe.numel()));
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& p : proj) p = u(rng);
  auto scalar = [&](const std::vector<TD>& in) {
    const TD out = f(in);
    const TD w = TD::from(out.shape(), proj);
    return sum(mul(out, w));
  };
  for (const auto& x : inputs) x.impl()->grad.clear();
  scalar(inputs).backward();

  double worst = 0;
  for (const auto& x : inputs) {
    if (!x.requires_grad()) continue;
    std::vector<double> analytic(static_cast<std::size_t>(x.numel()), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    std::vector<double> numeric(analytic.size());
    auto data = x.impl()->data.data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = scalar(inputs).item();
      data[i] = keep - h;
      const double down = scalar(inputs).item();
      data[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    for (std::size_t i = 0; i < numeric.size(); ++i)
      worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / (std::abs(numeric[i]) + 1e-8));
  }
  return worst;
}

ModelConfig tiny_config(Variant v, Scheme scheme) {
  ModelConfig c;
  c.variant = v;
  c.d = 4;
  c.k = 2;
  c.heads = 2;
  c.depth = 2;
  c.token_map = TokenMap::Linear;
  c.input_dim = 3;
  c.max_tokens = 3;
  c.classes = 3;
  c.integrator = {scheme, 2, 1.0};
  return c;
}

// Randomises every parameter (zero-initialised ones included) so that no
// gradient path is trivially zero.
void jitter(Model<double>& model, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  model.visit_parameters([&](const std::string& name, TD& t) {
    for (auto& v : t.mutable_data()) v = name.find("gain") != std::string::npos ? 1.0 + u(rng) : u(rng);
  });
}

double objective_check(Variant v, Scheme scheme, double lambda, std::mt19937_64& rng) {
  Model<double> model = Model<double>::initialise(tiny_config(v, scheme), rng());
  jitter(model, rng);
  Batch b;
  b.size = 2;
  b.tokens = 3;
  b.feature_dim = 3;
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 18; ++i) b.features.push_back(u(rng));
  b.lengths = {3, 2};  // second sample padded
  b.labels = {1, 2};
  auto f = [&](const std::vector<TD>&) {
    const auto res = model.forward(b);
    return objective(res.logits, b.labels, res.transport_cost_raw, lambda, model.config().d, res.token_counts)
        .reshape({1});
  };
  return fd_check(f, model.parameters(), rng);
}

}  // namespace

std::vector<GradcheckItem> gradcheck_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradcheckItem> items;
  auto prim = [&](const std::string& name, const Fn& f, const std::vector<TD>& in) {
    items.push_back({name, fd_check(f, in, rng), 1e-6});
  };
  auto R = [&](Shape s) { return random_leaf(std::move(s), rng); };
  const std::vector<double> mask = {1, 1, 0, 1, 0, 0};  // [B=2, n=3]

  prim("matmul", [](auto& x) { return matmul(x[0], x[1]); }, {R({3, 4}), R({4, 5})});
  prim("batched_matmul", [](auto& x) { return batched_matmul(x[0], x[1], false); }, {R({2, 3, 4}), R({2, 4, 5})});
  prim("batched_matmul_t", [](auto& x) { return batched_matmul(x[0], x[1], true); }, {R({2, 3, 4}), R({2, 5, 4})});
  prim("linear", [](auto& x) { return linear(x[0], x[1], x[2]); }, {R({2, 3, 4}), R({5, 4}), R({5})});
  prim("add", [](auto& x) { return add(x[0], x[1]); }, {R({2, 3}), R({2, 3})});
  prim("add_broadcast", [](auto& x) { return add(x[0], x[1]); }, {R({2, 3, 4}), R({4})});
  prim("sub", [](auto& x) { return sub(x[0], x[1]); }, {R({2, 3}), R({2, 3})});
  prim("mul", [](auto& x) { return mul(x[0], x[1]); }, {R({2, 3}), R({2, 3})});
  prim("scale", [](auto& x) { return scale(x[0], 0.7); }, {R({2, 3})});
  prim("relu", [](auto& x) { return relu(x[0]); }, {random_offset_leaf({2, 5}, rng)});
  prim("gelu", [](auto& x) { return gelu(scale(x[0], 3.0)); }, {R({2, 5})});
  prim("layer_norm", [](auto& x) { return layer_norm(x[0], x[1], x[2]); }, {R({2, 3, 4}), R({4}), R({4})});
  prim("softmax_last", [](auto& x) { return softmax_last(x[0]); }, {R({2, 3, 4})});
  prim("masked_softmax_last",
       [&](auto& x) { return masked_softmax_last(x[0], std::span<const double>(mask)); }, {R({2, 3, 3})});
  prim("softmax_columns", [](auto& x) { return softmax_columns(x[0]); }, {R({3, 4})});
  prim("sum", [](auto& x) { return sum(x[0]); }, {R({2, 3})});
  prim("mean", [](auto& x) { return mean(x[0]); }, {R({2, 3})});
  prim("frobenius_sq", [](auto& x) { return frobenius_sq(x[0]); }, {R({2, 3})});
  prim("batch_frobenius_sq", [](auto& x) { return batch_frobenius_sq(x[0]); }, {R({2, 3, 4})});
  prim("weighted_sum", [](auto& x) {
    const std::vector<double> w = {0.3, -1.2, 2.0};
    return weighted_sum(x[0], std::span<const double>(w));
  }, {R({3})});
  prim("transpose", [](auto& x) { return transpose(x[0]); }, {R({3, 4})});
  prim("concat_heads", [](auto& x) { return concat_heads(std::vector<TD>{x[0], x[1]}); },
       {R({2, 3, 2}), R({2, 3, 3})});
  prim("slice_tokens", [](auto& x) { return slice_tokens(x[0], 1, 2); }, {R({2, 4, 3})});
  prim("prepend_token", [](auto& x) { return prepend_token(x[0], x[1]); }, {R({2, 3, 4}), R({4})});
  prim("mask_tokens", [&](auto& x) { return mask_tokens(x[0], std::span<const double>(mask)); }, {R({2, 3, 4})});
  prim("masked_mean_tokens",
       [&](auto& x) { return masked_mean_tokens(x[0], std::span<const double>(mask)); }, {R({2, 3, 4})});
  prim("embedding_lookup", [](auto& x) {
    const std::vector<int> ids = {0, 2, 2, 1, 0, 0};
    return embedding_lookup(x[0], std::span<const int>(ids), 2, 3);
  }, {R({3, 4})});
  prim("cross_entropy", [](auto& x) {
    const std::vector<int> t = {2, 0};
    return cross_entropy(x[0], std::span<const int>(t));
  }, {R({2, 3})});

  // Composite items.
  auto composite = [&](const std::string& name, double err) { items.push_back({name, err, 1e-4}); };
  for (bool skip : {true, false}) {
    BlockShape shape = BlockShape::make(4, 2, 2);
    auto block = init_block<double>(shape, rng);
    std::vector<TD> in{R({2, 3, 4})};
    visit_parameters<double>(block, "", [&](const std::string& name, TD& t) {
      std::uniform_real_distribution<double> u(-0.5, 0.5);
      for (auto& v : t.mutable_data()) v = name.find("gain") != std::string::npos ? 1.0 + u(rng) : u(rng);
      in.push_back(t);
    });
    composite(skip ? "block_forward" : "block_forward_noskip",
              fd_check([&](auto& x) { return block_forward(x[0], block, skip, std::span<const double>(mask)); },
                       in, rng));
  }
  composite("objective_ot_euler", objective_check(Variant::OTContinuous, Scheme::ForwardEuler, 0.7, rng));
  composite("objective_ot_rk4", objective_check(Variant::OTContinuous, Scheme::RK4, 0.7, rng));
  composite("objective_node_euler", objective_check(Variant::NODEBlockwise, Scheme::ForwardEuler, 0.7, rng));
  composite("objective_vanilla", objective_check(Variant::VanillaDiscrete, Scheme::ForwardEuler, 0.0, rng));
  return items;
}

template std::vector<SweepRow> sweep_steps(const Model<float>&, const TaskData&, const std::vector<Example>&,
                                           const std::vector<int>&, int);
template std::vector<SweepRow> sweep_steps(const Model<double>&, const TaskData&, const std::vector<Example>&,
                                           const std::vector<int>&, int);
template StraightnessReport straightness_from_states(const std::vector<Tensor<float>>&);
template StraightnessReport straightness_from_states(const std::vector<Tensor<double>>&);
template StraightnessReport straightness(const Model<float>&, const TaskData&, const std::vector<Example>&, int);
template StraightnessReport straightness(const Model<double>&, const TaskData&, const std::vector<Example>&, int);

}  // namespace otf
