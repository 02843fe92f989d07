// otf: train, evaluate and analyse OT-Transformer models.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "otformer/checkpoint.hpp"
#include "otformer/config.hpp"
#include "otformer/diagnostics.hpp"

namespace fs = std::filesystem;
using namespace otf;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNaN = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string steps;
  std::optional<double> lambda;
  std::string precision;
  std::string variant;
  std::string checkpoint;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_steps(const std::string& csv) {
  std::vector<int> out;
  std::stringstream s(csv);
  std::string item;
  while (std::getline(s, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      throw UsageError("--steps expects a comma-separated list of positive integers, got '" + csv + "'");
    }
    if (used != item.size() || v < 1)
      throw UsageError("--steps expects a comma-separated list of positive integers, got '" + csv + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--steps is empty");
  return out;
}

ExperimentConfig effective_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? default_config() : load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.lambda) {
    if (!(*c.lambda >= 0)) throw ConfigError("--lambda must be >= 0");
    cfg.train.lambda = *c.lambda;
  }
  if (!c.precision.empty()) cfg.train.precision = parse_precision(c.precision);
  if (!c.variant.empty()) cfg.train.model.variant = parse_variant(c.variant);
  if (!c.steps.empty()) cfg.train.model.integrator.steps = parse_steps(c.steps).front();
  // Round-trip through the text form so overrides are validated like file input.
  return parse_config(render_config(cfg));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

fs::path checkpoint_path(const Common& c) {
  if (!c.checkpoint.empty()) return c.checkpoint;
  if (!c.out.empty()) return fs::path(c.out) / "model.ckpt";
  throw UsageError("pass --checkpoint PATH (or --out DIR containing model.ckpt)");
}

fs::path output_dir(const Common& c, const fs::path& ckpt) {
  fs::path dir = c.out.empty() ? ckpt.parent_path() : fs::path(c.out);
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  return dir;
}

template <typename T>
int run_train(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const std::string echo = render_config(cfg);
  write_text(cfg.out_dir / "config.echo", echo);
  const TaskData data = load_task(cfg.task, cfg.train.seed);
  std::cout << "task " << to_string(data.kind) << ": " << data.train.size() << " train / " << data.test.size()
            << " test, variant " << to_string(cfg.train.model.variant) << ", lambda " << cfg.train.lambda << '\n';
  auto res = train<T>(cfg.train, data, [](const RunRow& r) {
    std::cout << "epoch " << std::setw(3) << r.epoch << "  loss " << std::setprecision(4) << r.train_loss
              << "  transport " << r.train_transport << "  train acc " << r.train_accuracy << "  test acc "
              << r.test_accuracy << (r.nan_flag ? "  NaN" : "") << std::endl;
  });
  write_text(cfg.out_dir / "run.csv", run_csv(res.record));
  if (res.record.aborted()) {
    std::cerr << "training aborted: non-finite loss or gradient at epoch " << res.record.rows.back().epoch << '\n';
    return kExitNaN;
  }
  save_checkpoint(cfg.out_dir / "model.ckpt", res.model, echo);
  std::cout << "wrote " << (cfg.out_dir / "run.csv").string() << " and " << (cfg.out_dir / "model.ckpt").string()
            << '\n';
  return 0;
}

struct Loaded {
  ExperimentConfig cfg;
  TaskData data;
};

Loaded data_for(const std::string& echo) {
  Loaded l{parse_config(echo), {}};
  l.data = load_task(l.cfg.task, l.cfg.train.seed);
  return l;
}

template <typename T>
int run_eval(const fs::path& ckpt, const std::string& steps) {
  std::string echo;
  const Model<T> model = load_checkpoint<T>(ckpt, &echo);
  const Loaded l = data_for(echo);
  ForwardOptions opts;
  if (!steps.empty()) {
    if (!model.config().continuous()) throw VariantError("--steps needs a continuous-time variant");
    opts.integrator = model.config().integrator;
    opts.integrator->steps = parse_steps(steps).front();
  }
  const EvalResult r = evaluate(model, l.data, l.data.test, l.cfg.train.eval_batch_size, opts);
  std::cout << "test accuracy " << r.accuracy << "  test loss " << r.loss << "  (" << l.data.test.size()
            << " examples";
  if (model.config().continuous())
    std::cout << ", " << (opts.integrator ? opts.integrator->steps : model.config().integrator.steps) << " steps";
  std::cout << ")\n";
  return 0;
}

template <typename T>
int run_sweep(const fs::path& ckpt, const fs::path& out, const std::string& steps) {
  std::string echo;
  const Model<T> model = load_checkpoint<T>(ckpt, &echo);
  const Loaded l = data_for(echo);
  const auto rows = sweep_steps(model, l.data, l.data.test, parse_steps(steps.empty() ? "1,2,4,8,16,20" : steps),
                                l.cfg.train.eval_batch_size);
  std::ofstream f(out / "sweep.csv");
  write_sweep_csv(f, rows);
  write_sweep_csv(std::cout, rows);
  return 0;
}

template <typename T>
int run_straightness(const fs::path& ckpt, const fs::path& out) {
  std::string echo;
  const Model<T> model = load_checkpoint<T>(ckpt, &echo);
  const Loaded l = data_for(echo);
  const auto rep = straightness(model, l.data, l.data.test);
  std::ofstream f(out / "straightness.csv");
  write_straightness_csv(f, rep);
  std::cout << "mean ratio " << rep.mean_ratio << "  p95 ratio " << rep.p95_ratio << "  mean speed cv "
            << rep.mean_speed_cv << "  degenerate " << rep.degenerate_count << " of " << rep.samples.size() << '\n';
  return 0;
}

void apply_threads() {
  if (const char* env = std::getenv("OTF_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) throw UsageError("OTF_THREADS must be a positive integer");
    Eigen::setNbThreads(static_cast<int>(n));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OT-Transformer training and diagnostics"};
  app.require_subcommand(1);
  Common c;
  std::string seeds = "0,1,2,3,4";

  auto add_config_flags = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "YAML experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "override train.seed");
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--lambda", c.lambda, "override train.lambda");
    sub->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--variant", c.variant, "vanilla, ot or node")->check(CLI::IsMember({"vanilla", "ot", "node"}));
    sub->add_option("--steps", c.steps, "integration steps");
  };
  auto add_checkpoint_flags = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", c.checkpoint, "model checkpoint (default OUT/model.ckpt)");
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--steps", c.steps, "comma-separated step counts");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model; writes config.echo, run.csv, model.ckpt");
  add_config_flags(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "report test metrics of a checkpoint");
  add_checkpoint_flags(eval_cmd);
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite at f64");
  auto* sweep_cmd = app.add_subcommand("sweep-steps", "test accuracy of a frozen model per step count");
  add_checkpoint_flags(sweep_cmd);
  auto* straight_cmd = app.add_subcommand("straightness", "arc-length / displacement report");
  add_checkpoint_flags(straight_cmd);
  auto* ablate_cmd = app.add_subcommand("ablate", "paired lambda=0 vs lambda runs");
  add_config_flags(ablate_cmd);
  ablate_cmd->add_option("--seeds", seeds, "comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    apply_threads();
    if (*train_cmd) {
      const auto cfg = effective_config(c);
      return cfg.train.precision == Precision::F64 ? run_train<double>(cfg) : run_train<float>(cfg);
    }
    if (*grad_cmd) {
      double worst = 0;
      bool ok = true;
      for (const auto& item : gradcheck_suite()) {
        std::cout << std::left << std::setw(24) << item.name << std::scientific << std::setprecision(3)
                  << item.max_rel_error << "  (tol " << item.tolerance << ")" << (item.passed() ? "" : "  FAIL")
                  << '\n';
        worst = std::max(worst, item.max_rel_error);
        ok = ok && item.passed();
      }
      std::cout << "max relative error " << worst << '\n';
      return worst < 1e-4 && ok ? 0 : 1;
    }
    if (*ablate_cmd) {
      const auto cfg = effective_config(c);
      std::vector<std::uint64_t> list;
      for (int s : parse_steps(seeds.empty() ? "" : seeds)) list.push_back(static_cast<std::uint64_t>(s));
      fs::create_directories(cfg.out_dir);
      write_text(cfg.out_dir / "config.echo", render_config(cfg));
      const auto rows = ablate(cfg, list, &std::cout);
      std::ofstream f(cfg.out_dir / "ablate.csv");
      write_ablation_csv(f, rows);
      return 0;
    }
    const fs::path ckpt = checkpoint_path(c);
    const bool f64 = read_checkpoint_header(ckpt).precision == Precision::F64;
    if (*eval_cmd) return f64 ? run_eval<double>(ckpt, c.steps) : run_eval<float>(ckpt, c.steps);
    const fs::path out = output_dir(c, ckpt);
    if (*sweep_cmd) return f64 ? run_sweep<double>(ckpt, out, c.steps) : run_sweep<float>(ckpt, out, c.steps);
    if (*straight_cmd) return f64 ? run_straightness<double>(ckpt, out) : run_straightness<float>(ckpt, out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
