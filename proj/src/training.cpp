#include "otformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "otformer/ops.hpp"

namespace otf {

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(explosion_threshold > 0.0)) throw ConfigError("explosion_threshold must be positive");
  if (schedule.empty()) return;
  int covered = 0;
  for (const auto& p : schedule) {
    if (p.begin != covered || p.end <= p.begin)
      throw ConfigError("lr schedule phases must be contiguous, non-empty and start at epoch 0");
    if (!(p.rate >= 0.0)) throw ConfigError("learning rates must be >= 0");
    covered = p.end;
  }
  if (covered < epochs) throw ConfigError("lr schedule must cover every epoch");
}

double TrainConfig::learning_rate(int epoch) const {
  if (schedule.empty()) return 5e-4;
  for (const auto& p : schedule)
    if (epoch >= p.begin && epoch < p.end) return p.rate;
  return schedule.back().rate;
}

void configure_for_task(ModelConfig& model, const TaskData& task) {
  model.token_map = task.token_map;
  model.input_dim = task.feature_dim;
  model.max_tokens = task.max_tokens;
  model.classes = task.classes;
}

template <typename T>
Tensor<T> objective(const Tensor<T>& logits, std::span<const int> targets,
                    const Tensor<T>& transport_cost_raw, double lambda, std::int64_t d,
                    std::span<const int> token_counts, ObjectiveParts* parts) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  const auto bsz = logits.dim(0);
  if (transport_cost_raw.numel() != bsz || static_cast<std::int64_t>(token_counts.size()) != bsz)
    throw DimensionError("objective: cost and token counts must have one entry per sample");
  const Tensor<T> ce = cross_entropy(logits, targets);
  std::vector<T> mean_w(static_cast<std::size_t>(bsz), T(1) / static_cast<T>(bsz));
  std::vector<T> reg_w(static_cast<std::size_t>(bsz));
  for (std::int64_t b = 0; b < bsz; ++b)
    reg_w[b] = static_cast<T>(1.0 / (2.0 * static_cast<double>(d) * token_counts[b] * bsz));

  if (parts) {
    parts->data_fit = 0;
    parts->transport = 0;
    for (std::int64_t b = 0; b < bsz; ++b) {
      parts->data_fit += static_cast<double>(ce.at(b)) / bsz;
      parts->transport += static_cast<double>(reg_w[b]) * static_cast<double>(transport_cost_raw.at(b));
    }
  }
  Tensor<T> loss = weighted_sum(ce, std::span<const T>(mean_w));
  if (lambda == 0.0) return loss;
  for (auto& w : reg_w) w *= static_cast<T>(lambda);
  return add(loss, weighted_sum(transport_cost_raw, std::span<const T>(reg_w)));
}

// ---- Adam -----------------------------------------------------------------

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
  const T rate = static_cast<T>(lr), eps = static_cast<T>(cfg_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      w[j] -= rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

template <typename T>
double grad_norm(std::span<const Tensor<T>> params) {
  double s = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(s);
}

// ---- stability --------------------------------------------------------------

bool StabilityMonitor::observe(double norm) {
  const std::int64_t at = step_++;
  const bool finite = std::isfinite(norm);
  if (finite) {
    current_.max_norm = std::max(current_.max_norm, norm);
    sum_ += norm;
  } else {
    current_.max_norm = norm;
    non_finite_ = true;
  }
  ++current_.steps;
  current_.mean_norm = finite ? sum_ / static_cast<double>(current_.steps) : norm;
  if (!flag_step_ && (!finite || norm > threshold_)) {
    flag_step_ = at;
    return true;
  }
  return false;
}

void StabilityMonitor::end_epoch() {
  epochs_.push_back(current_);
  current_ = {};
  sum_ = 0;
}

// ---- run record -------------------------------------------------------------

void write_run_csv(std::ostream& out, const RunRecord& record) {
  out << "epoch,train_loss,train_transport,train_accuracy,test_loss,test_accuracy,mean_grad_norm,nan_flag\n";
  std::ostringstream line;
  line << std::setprecision(6);
  for (const auto& r : record.rows) {
    line.str("");
    line << r.epoch << ',' << r.train_loss << ',' << r.train_transport << ',' << r.train_accuracy << ','
         << r.test_loss << ',' << r.test_accuracy << ',' << r.mean_grad_norm << ',' << (r.nan_flag ? 1 : 0)
         << '\n';
    out << line.str();
  }
}

std::string run_csv(const RunRecord& record) {
  std::ostringstream s;
  write_run_csv(s, record);
  return s.str();
}

// ---- evaluation / training --------------------------------------------------

namespace {

template <typename T>
int correct(const Tensor<T>& logits, std::span<const int> labels) {
  const auto bsz = logits.dim(0), c = logits.dim(1);
  const auto v = logits.data();
  int hits = 0;
  for (std::int64_t b = 0; b < bsz; ++b) {
    const auto row = v.subspan(static_cast<std::size_t>(b * c), static_cast<std::size_t>(c));
    if (std::max_element(row.begin(), row.end()) - row.begin() == labels[b]) ++hits;
  }
  return hits;
}

}  // namespace

template <typename T>
EvalResult evaluate(const Model<T>& model, const TaskData& task, const std::vector<Example>& split,
                    int batch_size, const ForwardOptions& opts) {
  EvalResult r;
  if (split.empty()) return r;
  NoGradGuard no_grad;
  std::vector<std::size_t> idx(split.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  int hits = 0;
  for (std::size_t lo = 0; lo < idx.size(); lo += static_cast<std::size_t>(batch_size)) {
    const auto hi = std::min(idx.size(), lo + static_cast<std::size_t>(batch_size));
    const Batch batch = make_batch(task, split, std::span(idx).subspan(lo, hi - lo));
    const auto res = model.forward(batch, opts);
    ObjectiveParts parts;
    objective(res.logits, batch.labels, res.transport_cost_raw, 0.0, model.config().d, res.token_counts, &parts);
    const double w = static_cast<double>(hi - lo) / static_cast<double>(split.size());
    r.loss += parts.data_fit * w;
    r.transport += parts.transport * w;
    hits += correct(res.logits, batch.labels);
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(split.size());
  return r;
}

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const TaskData& data, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.train.empty()) throw ContractError("training split is empty");
  ModelConfig mc = cfg.model;
  configure_for_task(mc, data);
  TrainResult<T> out{Model<T>::initialise(mc, cfg.seed), {}};
  Model<T>& model = out.model;
  auto params = model.parameters();
  Adam<T> adam(params);
  StabilityMonitor monitor(cfg.explosion_threshold);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5eed5eed5eed5eedULL);

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto n = order.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = cfg.learning_rate(epoch);
    RunRow row;
    row.epoch = epoch;
    int hits = 0;
    std::size_t seen = 0;
    for (std::size_t lo = 0; lo < n && !row.nan_flag; lo += bs) {
      const auto hi = std::min(n, lo + bs);
      const Batch batch = make_batch(data, data.train, std::span(order).subspan(lo, hi - lo));
      for (auto& p : params) p.zero_grad();
      ObjectiveParts parts;
      Tensor<T> loss;
      ForwardResult<T> res;
      try {
        res = model.forward(batch);
        loss = objective(res.logits, batch.labels, res.transport_cost_raw, cfg.lambda, mc.d,
                         res.token_counts, &parts);
      } catch (const IntegrationBlowup&) {
        row.nan_flag = true;
        break;
      }
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        row.nan_flag = true;
        break;
      }
      loss.backward();
      const double norm = grad_norm<T>(params);
      monitor.observe(norm);
      if (!std::isfinite(norm)) {
        row.nan_flag = true;
        break;
      }
      if (cfg.grad_clip && norm > *cfg.grad_clip) {
        const T f = static_cast<T>(*cfg.grad_clip / norm);
        for (auto& p : params)
          if (p.has_grad())
            for (auto& g : p.impl()->grad) g *= f;
      }
      adam.step(lr);
      const double w = static_cast<double>(hi - lo);
      row.train_loss += parts.data_fit * w;
      row.train_transport += parts.transport * w;
      hits += correct(res.logits, batch.labels);
      seen += hi - lo;
    }
    if (seen > 0) {
      row.train_loss /= static_cast<double>(seen);
      row.train_transport /= static_cast<double>(seen);
      row.train_accuracy = static_cast<double>(hits) / static_cast<double>(seen);
    }
    row.mean_grad_norm = monitor.current().mean_norm;
    monitor.end_epoch();
    if (!row.nan_flag) {
      try {
        const EvalResult test = evaluate(model, data, data.test, cfg.eval_batch_size);
        row.test_loss = test.loss;
        row.test_accuracy = test.accuracy;
        if (!std::isfinite(test.loss)) row.nan_flag = true;
      } catch (const IntegrationBlowup&) {
        row.nan_flag = true;
      }
    }
    out.record.rows.push_back(row);
    if (on_epoch) on_epoch(row);
    if (row.nan_flag) break;
  }
  out.record.explosion_step = monitor.flag_step();
  return out;
}

#define OTF_INSTANTIATE_TRAINING(T)                                                                   \
  template Tensor<T> objective(const Tensor<T>&, std::span<const int>, const Tensor<T>&, double,       \
                               std::int64_t, std::span<const int>, ObjectiveParts*);                  \
  template class Adam<T>;                                                                             \
  template double grad_norm(std::span<const Tensor<T>>);                                              \
  template EvalResult evaluate(const Model<T>&, const TaskData&, const std::vector<Example>&, int,     \
                               const ForwardOptions&);                                                \
  template TrainResult<T> train(const TrainConfig&, const TaskData&, const EpochCallback&);

OTF_INSTANTIATE_TRAINING(float)
OTF_INSTANTIATE_TRAINING(double)

}  // namespace otf
