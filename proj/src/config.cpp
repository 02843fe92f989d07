#include "otformer/config.hpp"

#include "otformer/checkpoint.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace otf {

ExperimentConfig default_config(TaskKind kind) {
  ExperimentConfig c;
  c.task.kind = kind;
  auto& m = c.train.model;
  m.variant = Variant::OTContinuous;
  m.integrator = {Scheme::ForwardEuler, 20, 1.0};
  c.train.task = kind;
  switch (kind) {
    case TaskKind::Mnist:
      m.d = m.k = 64;
      m.heads = 1;
      m.depth = 1;
      m.pooling = Pooling::Cls;
      c.train.lambda = 0.01;
      c.train.epochs = 45;
      c.train.schedule = {{0, 35, 5e-4}, {35, 45, 5e-5}};
      c.out_dir = "runs/mnist";
      break;
    case TaskKind::Parity:
      m.d = 16;
      m.k = 8;
      m.heads = 2;
      m.depth = 1;
      m.pooling = Pooling::Mean;
      m.integrator.steps = 10;
      c.train.lambda = 0.5;
      c.train.epochs = 50;
      c.train.batch_size = 32;
      c.train.schedule = {{0, 50, 3e-3}};
      c.task.count = 1000;
      c.out_dir = "runs/parity";
      break;
    case TaskKind::PointCloud:
      m.d = 32;
      m.k = 16;
      m.heads = 2;
      m.depth = 1;
      m.positional = false;
      m.pooling = Pooling::Mean;
      m.integrator.steps = 10;
      c.train.lambda = 1.0;
      c.train.epochs = 30;
      c.train.batch_size = 32;
      c.train.schedule = {{0, 30, 1e-3}};
      c.task.count = 600;
      c.out_dir = "runs/pointcloud";
      break;
  }
  return c;
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ConfigError("config: " + msg); }

void reject_unknown(const YAML::Node& t, const std::string& where, const std::set<std::string>& allowed) {
  for (const auto& kv : t) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) fail("unknown key '" + (where.empty() ? "" : where + ".") + key + "'");
  }
}

YAML::Node section(const YAML::Node& root, const char* name) {
  const YAML::Node node = root[name];
  if (!node || node.IsNull()) return {};
  if (!node.IsMap()) fail(std::string("'") + name + "' must be a mapping");
  return node;
}

template <typename V>
void read(const YAML::Node& t, const std::string& where, const char* key, V& out) {
  const YAML::Node node = t[key];
  if (!node) return;
  const std::string full = where + "." + key;
  if (!node.IsScalar()) fail("'" + full + "' must be a scalar");
  try {
    if constexpr (std::is_same_v<V, bool>) {
      out = node.as<bool>();
    } else if constexpr (std::is_floating_point_v<V>) {
      out = node.as<double>();
    } else if constexpr (std::is_integral_v<V>) {
      const auto v = node.as<std::int64_t>();
      if (v < static_cast<std::int64_t>(std::numeric_limits<V>::min()) ||
          (v > 0 && static_cast<std::uint64_t>(v) > static_cast<std::uint64_t>(std::numeric_limits<V>::max())))
        fail("'" + full + "' is out of range");
      out = static_cast<V>(v);
    } else {
      out = node.as<std::string>();
    }
  } catch (const YAML::BadConversion&) {
    const char* what = std::is_same_v<V, bool>              ? "a boolean"
                       : std::is_floating_point_v<V>        ? "a number"
                       : std::is_integral_v<V>              ? "an integer"
                                                            : "a string";
    fail("'" + full + "' must be " + what + ", got '" + node.Scalar() + "'");
  }
}

template <typename E, typename Parse>
void read_enum(const YAML::Node& t, const std::string& where, const char* key, E& out, Parse parse) {
  if (!t[key]) return;
  std::string s;
  read(t, where, key, s);
  try {
    out = parse(s);
  } catch (const std::invalid_argument& e) {
    fail("'" + where + "." + key + "': " + e.what());
  }
}

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    fail(e.what());
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) fail("top level must be a mapping of sections");
  reject_unknown(root, "", {"task", "model", "integrator", "train", "output"});

  // Task-dependent defaults first, so a config naming only the task is complete.
  TaskKind kind = TaskKind::Mnist;
  if (const auto t = section(root, "task")) read_enum(t, "task", "kind", kind, parse_task);
  ExperimentConfig c = default_config(kind);

  if (const auto t = section(root, "task")) {
    reject_unknown(t, "task", {"kind", "data_dir", "train_per_class", "test_per_class", "count", "max_len",
                               "points", "test_fraction"});
    std::string dir = c.task.data_dir.string();
    read(t, "task", "data_dir", dir);
    c.task.data_dir = dir;
    read(t, "task", "train_per_class", c.task.train_per_class);
    read(t, "task", "test_per_class", c.task.test_per_class);
    read(t, "task", "count", c.task.count);
    read(t, "task", "max_len", c.task.max_len);
    read(t, "task", "points", c.task.points);
    read(t, "task", "test_fraction", c.task.test_fraction);
  }
  auto& m = c.train.model;
  if (const auto t = section(root, "model")) {
    reject_unknown(t, "model", {"variant", "d", "k", "heads", "depth", "fc_hidden", "positional", "pooling"});
    read_enum(t, "model", "variant", m.variant, parse_variant);
    read(t, "model", "d", m.d);
    read(t, "model", "k", m.k);
    read(t, "model", "heads", m.heads);
    read(t, "model", "depth", m.depth);
    read(t, "model", "fc_hidden", m.fc_hidden);
    read(t, "model", "positional", m.positional);
    read_enum(t, "model", "pooling", m.pooling, parse_pooling);
  }
  if (const auto t = section(root, "integrator")) {
    reject_unknown(t, "integrator", {"scheme", "steps", "horizon"});
    read_enum(t, "integrator", "scheme", m.integrator.scheme, parse_scheme);
    read(t, "integrator", "steps", m.integrator.steps);
    read(t, "integrator", "horizon", m.integrator.horizon);
  }
  auto& tr = c.train;
  if (const auto t = section(root, "train")) {
    reject_unknown(t, "train", {"lambda", "epochs", "batch_size", "eval_batch_size", "seed", "precision",
                                "grad_clip", "explosion_threshold", "schedule"});
    const int default_epochs = tr.epochs;
    read(t, "train", "lambda", tr.lambda);
    read(t, "train", "epochs", tr.epochs);
    read(t, "train", "batch_size", tr.batch_size);
    read(t, "train", "eval_batch_size", tr.eval_batch_size);
    read(t, "train", "seed", tr.seed);
    read_enum(t, "train", "precision", tr.precision, parse_precision);
    if (t["grad_clip"] && !t["grad_clip"].IsNull()) {
      double clip = 0;
      read(t, "train", "grad_clip", clip);
      tr.grad_clip = clip;
    }
    read(t, "train", "explosion_threshold", tr.explosion_threshold);
    if (const YAML::Node sched = t["schedule"]) {
      if (!sched.IsSequence()) fail("'train.schedule' must be a list of {begin, end, rate} mappings");
      tr.schedule.clear();
      for (const auto& phase : sched) {
        if (!phase.IsMap()) fail("'train.schedule' entries must be mappings");
        reject_unknown(phase, "train.schedule", {"begin", "end", "rate"});
        LrPhase p;
        read(phase, "train.schedule", "begin", p.begin);
        read(phase, "train.schedule", "end", p.end);
        read(phase, "train.schedule", "rate", p.rate);
        tr.schedule.push_back(p);
      }
    } else if (tr.epochs != default_epochs && tr.epochs > 0) {
      // Keep the default schedule's shape but stretch it over the new length.
      for (auto& p : tr.schedule) {
        p.begin = static_cast<int>(std::lround(static_cast<double>(p.begin) * tr.epochs / default_epochs));
        p.end = static_cast<int>(std::lround(static_cast<double>(p.end) * tr.epochs / default_epochs));
      }
      std::erase_if(tr.schedule, [](const LrPhase& p) { return p.end <= p.begin; });
      if (!tr.schedule.empty()) tr.schedule.back().end = tr.epochs;
    }
  }
  if (const auto t = section(root, "output")) {
    reject_unknown(t, "output", {"dir"});
    std::string dir = c.out_dir.string();
    read(t, "output", "dir", dir);
    c.out_dir = dir;
  }
  tr.task = c.task.kind;
  try {
    tr.validate();
    if (m.continuous()) m.integrator.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
  if (c.task.kind == TaskKind::Parity && c.task.max_len < 1) fail("'task.max_len' must be >= 1");
  if (c.task.kind == TaskKind::PointCloud && c.task.points < 8) fail("'task.points' must be >= 8");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

std::string render_config(const ExperimentConfig& c) {
  const auto& m = c.train.model;
  const auto& tr = c.train;
  std::ostringstream o;
  o << "task:\n"
    << "  kind: " << quoted(to_string(c.task.kind)) << "\n"
    << "  data_dir: " << quoted(c.task.data_dir.string()) << "\n"
    << "  train_per_class: " << c.task.train_per_class << "\n"
    << "  test_per_class: " << c.task.test_per_class << "\n"
    << "  count: " << c.task.count << "\n"
    << "  max_len: " << c.task.max_len << "\n"
    << "  points: " << c.task.points << "\n"
    << "  test_fraction: " << num(c.task.test_fraction) << "\n\n";
  o << "model:\n"
    << "  variant: " << quoted(to_string(m.variant)) << "\n"
    << "  d: " << m.d << "\n  k: " << m.k << "\n  heads: " << m.heads << "\n  depth: " << m.depth << "\n"
    << "  fc_hidden: " << m.fc_hidden << "\n"
    << "  positional: " << (m.positional ? "true" : "false") << "\n"
    << "  pooling: " << quoted(to_string(m.pooling)) << "\n\n";
  o << "integrator:\n"
    << "  scheme: " << quoted(to_string(m.integrator.scheme)) << "\n"
    << "  steps: " << m.integrator.steps << "\n"
    << "  horizon: " << num(m.integrator.horizon) << "\n\n";
  o << "train:\n"
    << "  lambda: " << num(tr.lambda) << "\n"
    << "  epochs: " << tr.epochs << "\n"
    << "  batch_size: " << tr.batch_size << "\n"
    << "  eval_batch_size: " << tr.eval_batch_size << "\n"
    << "  seed: " << tr.seed << "\n"
    << "  precision: " << quoted(to_string(tr.precision)) << "\n";
  if (tr.grad_clip) o << "  grad_clip: " << num(*tr.grad_clip) << "\n";
  o << "  explosion_threshold: " << num(tr.explosion_threshold) << "\n"
    << "  schedule:";
  if (tr.schedule.empty()) o << " []";
  for (const auto& p : tr.schedule)
    o << "\n    - {begin: " << p.begin << ", end: " << p.end << ", rate: " << num(p.rate) << "}";
  o << "\n\n";
  o << "output:\n"
    << "  dir: " << quoted(c.out_dir.string()) << "\n";
  return o.str();
}

TaskData load_task(const TaskParams& p, std::uint64_t seed) {
  switch (p.kind) {
    case TaskKind::Mnist: return load_mnist_subset(p.data_dir, p.train_per_class, p.test_per_class, seed);
    case TaskKind::Parity: return gen_parity(static_cast<std::size_t>(p.count), p.max_len, seed, p.test_fraction);
    case TaskKind::PointCloud:
      return gen_pointcloud(static_cast<std::size_t>(p.count), p.points, seed, p.test_fraction);
  }
  throw ConfigError("unknown task");
}

}  // namespace otf
