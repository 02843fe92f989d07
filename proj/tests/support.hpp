#pragma once

// Shared helpers for the unit tests: random tensors, a finite-difference
// oracle, and scratch directories.

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "otformer/ops.hpp"
#include "otformer/tensor.hpp"

namespace otf::test {

using TD = Tensor<double>;
using TF = Tensor<float>;

template <typename T = double>
Tensor<T> rand_tensor(Shape shape, std::mt19937_64& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<T>(u(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), grad);
}

// max_i |analytic_i - fd_i| / (|fd_i| + 1e-8) over every input that requires
// a gradient, for the scalar loss(inputs). Central differences, step h.
inline double fd_rel_error(const std::function<TD()>& loss, const std::vector<TD>& inputs, double h = 1e-5) {
  for (const auto& x : inputs) x.impl()->grad.clear();
  loss().backward();
  double worst = 0;
  for (const auto& x : inputs) {
    std::vector<double> analytic(x.data().size(), 0.0);
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
    NoGradGuard guard;
    auto& data = x.impl()->data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = loss().item();
      data[i] = keep - h;
      const double down = loss().item();
      data[i] = keep;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
    }
  }
  return worst;
}

// Random projection p . f(x) turning any tensor-valued f into a scalar loss.
inline std::function<TD()> project(std::function<TD()> f, std::uint64_t seed = 99) {
  auto probe = f();
  std::mt19937_64 rng(seed);
  auto w = rand_tensor<double>(probe.shape(), rng, false, 0.5, 1.5);
  return [f, w] { return sum(mul(f(), w)); };
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("otf_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

}  // namespace otf::test
