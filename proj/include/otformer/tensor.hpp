#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Results of differentiable
// operations carry a GradNode that records their parents and a closure that
// pushes the output gradient back to them. Leaves created without gradient
// tracking never acquire a node.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace otf {

enum class Precision { F32, F64 };

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// Raised when operand extents are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API precondition is violated (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
struct GradNode {
  std::vector<ImplPtr<T>> parents;
  // Receives the gradient and value of the node's output and accumulates
  // into the parents' grad buffers.
  std::function<void(std::span<const T> grad, std::span<const T> value)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;
};

bool grad_enabled();

// Grad buffer of `impl`, zero-initialised on first use.
template <typename T>
std::span<T> grad_buffer(TensorImpl<T>& impl) {
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

}  // namespace detail

/// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  // Writable view for leaves only (parameter updates, initialisation).
  std::span<T> mutable_data();

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl_->node == nullptr; }
  bool has_node() const { return impl_->node != nullptr; }

  T item() const;
  T at(std::int64_t flat_index) const { return impl_->data[static_cast<std::size_t>(flat_index)]; }

  // Copy of the values with no graph attached.
  Tensor detach() const;

  // Populates grad of every reachable tensor that requires it. Leaf grads
  // accumulate across calls until zero_grad().
  void backward() const;

  // Same values under new extents; gradients flow straight through.
  Tensor reshape(Shape shape) const;

  const detail::ImplPtr<T>& impl() const { return impl_; }
  explicit Tensor(detail::ImplPtr<T> impl) : impl_(std::move(impl)) {}

 private:
  detail::ImplPtr<T> impl_;
};

namespace detail {

// Wraps freshly computed values into a tensor, attaching a grad node when any
// parent participates in differentiation and grad mode is on.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<ImplPtr<T>> parents,
                      std::function<void(std::span<const T>, std::span<const T>)> backward);

}  // namespace detail

template <typename T>
void backward(const Tensor<T>& loss) {
  loss.backward();
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace otf
