#include "otformer/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace otf {

namespace {
thread_local int no_grad_depth = 0;
}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

namespace detail {
bool grad_enabled() { return no_grad_depth == 0; }
}  // namespace detail

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

namespace {

void check_shape(const Shape& s) {
  for (auto e : s)
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor() : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  impl_->shape = {1};
  impl_->data.assign(1, T(0));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(impl_->shape));
  return impl_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (impl_->node) throw ContractError("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (impl_->node) throw ContractError("requires_grad can only be changed on leaves");
  impl_->requires_grad = on;
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1)
    throw ContractError("item() on tensor of shape " + shape_str(impl_->shape));
  return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(impl_->shape, impl_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  check_shape(shape);
  if (shape_numel(shape) != numel())
    throw DimensionError("cannot reshape " + shape_str(impl_->shape) + " to " + shape_str(shape));
  auto src = impl_;
  return detail::make_result<T>(std::move(shape), impl_->data, {src}, [src](std::span<const T> g, std::span<const T>) {
    auto gs = detail::grad_buffer(*src);
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g[i];
  });
}

template <typename T>
void Tensor<T>::backward() const {
  using Impl = detail::TensorImpl<T>;
  if (impl_->data.size() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(impl_->shape));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS; unrolled integrations produce deep graphs.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (cur->node && next < cur->node->parents.size()) {
      Impl* p = cur->node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(cur);
    stack.pop_back();
  }

  for (Impl* t : order)
    if (t->node) t->grad.assign(t->data.size(), T(0));
  detail::grad_buffer(*impl_)[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* t = *it;
    if (!t->node) continue;
    t->node->backward(t->grad, t->data);
  }
  // Intermediate gradients are scratch space.
  for (Impl* t : order)
    if (t->node && t != impl_.get()) std::vector<T>().swap(t->grad);
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<ImplPtr<T>> parents,
                      std::function<void(std::span<const T>, std::span<const T>)> backward) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  const bool track =
      grad_enabled() && std::any_of(parents.begin(), parents.end(),
                                    [](const ImplPtr<T>& p) { return p && p->requires_grad; });
  if (track) {
    impl->requires_grad = true;
    impl->node = std::make_shared<GradNode<T>>();
    impl->node->parents = std::move(parents);
    impl->node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(impl));
}

template Tensor<float> make_result(Shape, std::vector<float>, std::vector<ImplPtr<float>>,
                                   std::function<void(std::span<const float>, std::span<const float>)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<ImplPtr<double>>,
                                    std::function<void(std::span<const double>, std::span<const double>)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace otf
