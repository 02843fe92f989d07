#include "otformer/ode.hpp"

#include "otformer/ops.hpp"

namespace otf {

std::string to_string(Scheme s) { return s == Scheme::RK4 ? "rk4" : "euler"; }

Scheme parse_scheme(const std::string& name) {
  if (name == "euler" || name == "forward_euler") return Scheme::ForwardEuler;
  if (name == "rk4") return Scheme::RK4;
  throw std::invalid_argument("unknown integration scheme '" + name + "' (expected euler|rk4)");
}

void IntegratorConfig::validate() const {
  if (steps < 1) throw ContractError("integrator needs at least one step, got " + std::to_string(steps));
  if (!(horizon > 0.0)) throw ContractError("integration horizon must be positive");
}

IntegratorConfig single_step_equivalence_input() { return {Scheme::ForwardEuler, 1, 1.0}; }

namespace {

template <typename T>
Tensor<T> checked_velocity(const VelocityField<T>& field, const Tensor<T>& x, int step) {
  Tensor<T> v = field(x);
  if (v.shape() != x.shape())
    throw DimensionError("velocity field returned " + shape_str(v.shape()) + " for state " +
                         shape_str(x.shape()));
  if (!all_finite(v.data()))
    throw IntegrationBlowup(step, "non-finite velocity at step " + std::to_string(step));
  return v;
}

template <typename T>
std::vector<T> per_sample_sq(const Tensor<T>& bfs) {
  return {bfs.data().begin(), bfs.data().end()};
}

}  // namespace

template <typename T>
Trajectory<T> integrate(const Tensor<T>& x0, const VelocityField<T>& field,
                        const IntegratorConfig& cfg, bool record_states) {
  cfg.validate();
  if (!all_finite(x0.data())) throw IntegrationBlowup(0, "non-finite initial state");
  const T h = static_cast<T>(cfg.step_size());
  const auto batch = x0.dim(0);

  Trajectory<T> traj;
  traj.states.push_back(x0);
  Tensor<T> cost = Tensor<T>::zeros({batch});
  Tensor<T> x = x0;

  for (int step = 0; step < cfg.steps; ++step) {
    if (cfg.scheme == Scheme::ForwardEuler) {
      auto f = checked_velocity(field, x, step);
      auto sq = batch_frobenius_sq(f);
      traj.velocity_sq.push_back(per_sample_sq(sq));
      cost = add(cost, scale(sq, h));
      x = add(x, scale(f, h));
    } else {
      const T half = h / T(2);
      auto k1 = checked_velocity(field, x, step);
      auto k2 = checked_velocity(field, add(x, scale(k1, half)), step);
      auto k3 = checked_velocity(field, add(x, scale(k2, half)), step);
      auto k4 = checked_velocity(field, add(x, scale(k3, h)), step);
      const Tensor<T>* stages[] = {&k1, &k2, &k3, &k4};
      const T weights[] = {T(1), T(2), T(2), T(1)};
      Tensor<T> incr = k1;
      for (int s = 0; s < 4; ++s) {
        auto sq = batch_frobenius_sq(*stages[s]);
        traj.velocity_sq.push_back(per_sample_sq(sq));
        cost = add(cost, scale(sq, h * weights[s] / T(6)));
        if (s > 0) incr = add(incr, scale(*stages[s], weights[s]));
      }
      x = add(x, scale(incr, h / T(6)));
    }
    if (!all_finite(x.data()))
      throw IntegrationBlowup(step, "non-finite state after step " + std::to_string(step));
    if (record_states || step + 1 == cfg.steps) traj.states.push_back(x);
  }
  traj.transport_cost_raw = cost;
  return traj;
}

template Trajectory<float> integrate(const Tensor<float>&, const VelocityField<float>&,
                                     const IntegratorConfig&, bool);
template Trajectory<double> integrate(const Tensor<double>&, const VelocityField<double>&,
                                      const IntegratorConfig&, bool);

}  // namespace otf
