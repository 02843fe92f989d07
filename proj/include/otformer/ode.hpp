#pragma once

// Fixed-step integration of dX/dt = f(X) with the transport cost
// integral of ||f||_F^2 accumulated alongside. Every step is part of the
// autodiff graph (discretize-then-optimize).

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "otformer/tensor.hpp"

namespace otf {

enum class Scheme { ForwardEuler, RK4 };

std::string to_string(Scheme s);
Scheme parse_scheme(const std::string& name);

struct IntegratorConfig {
  Scheme scheme = Scheme::ForwardEuler;
  int steps = 1;
  double horizon = 1.0;

  double step_size() const { return horizon / steps; }
  // Throws ContractError unless steps >= 1 and horizon > 0.
  void validate() const;
  // f evaluations per step.
  int stages() const { return scheme == Scheme::RK4 ? 4 : 1; }
};

// {ForwardEuler, N=1, T=1}: one step reproduces the residual update X + f(X).
IntegratorConfig single_step_equivalence_input();

/// Non-finite state or velocity encountered during integration.
class IntegrationBlowup : public std::runtime_error {
 public:
  IntegrationBlowup(int step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

template <typename T>
using VelocityField = std::function<Tensor<T>(const Tensor<T>&)>;

template <typename T>
struct Trajectory {
  // X(t_0) ... X(t_N) when recorded; otherwise {X(t_0), X(T)}.
  std::vector<Tensor<T>> states;
  // Squared Frobenius norm of every f evaluation, one entry per batch
  // element: N rows for Euler, 4N (stage order) for RK4.
  std::vector<std::vector<T>> velocity_sq;
  // Quadrature of the integral of ||f||_F^2 over [0, T], per batch element [B];
  // unscaled by lambda / (2 d n).
  Tensor<T> transport_cost_raw;

  const Tensor<T>& final_state() const { return states.back(); }
};

// Euler: X_{k+1} = X_k + h f(X_k), cost sum_k h ||f(X_k)||^2 (left endpoint).
// RK4: classical four-stage step, cost weighted by the stage weights
// (1, 2, 2, 1) / 6. Throws IntegrationBlowup with the offending step index.
template <typename T>
Trajectory<T> integrate(const Tensor<T>& x0, const VelocityField<T>& field,
                        const IntegratorConfig& cfg, bool record_states);

}  // namespace otf
