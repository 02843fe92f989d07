#include "otformer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace otf {

using detail::grad_buffer;
using detail::ImplPtr;
using detail::make_result;

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// c[m,n] += op(a) * op(b), all row-major; op transposes when the flag is set.
template <typename T>
void gemm_acc(const T* a, bool ta, const T* b, bool tb, T* c, Eigen::Index m, Eigen::Index n,
              Eigen::Index k) {
  Eigen::Map<const RowMat<T>> A(a, ta ? k : m, ta ? m : k);
  Eigen::Map<const RowMat<T>> B(b, tb ? n : k, tb ? k : n);
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (!ta && !tb)
    C.noalias() += A * B;
  else if (ta && !tb)
    C.noalias() += A.transpose() * B;
  else if (!ta && tb)
    C.noalias() += A * B.transpose();
  else
    C.noalias() += A.transpose() * B.transpose();
}

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t r) {
  if (x.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(x.shape()));
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

template <typename T>
std::vector<T> to_vec(std::span<const T> s) {
  return {s.begin(), s.end()};
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) dim_error("matmul", a.shape(), b.shape());
  std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
  gemm_acc(a.data().data(), false, b.data().data(), false, out.data(), m, n, k);
  ImplPtr<T> pa = a.impl(), pb = b.impl();
  return make_result<T>({m, n}, std::move(out), {pa, pb},
                        [pa, pb, m, n, k](std::span<const T> g, std::span<const T>) {
                          if (pa->requires_grad)
                            gemm_acc(g.data(), false, pb->data.data(), true,
                                     grad_buffer(*pa).data(), m, k, n);
                          if (pb->requires_grad)
                            gemm_acc(pa->data.data(), true, g.data(), false,
                                     grad_buffer(*pb).data(), k, n, m);
                        });
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank("batched_matmul", a, 3);
  require_rank("batched_matmul", b, 3);
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  if (b.dim(0) != batch) dim_error("batched_matmul", a.shape(), b.shape());
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) dim_error("batched_matmul", a.shape(), b.shape());
  std::vector<T> out(static_cast<std::size_t>(batch * m * n), T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t i = 0; i < batch; ++i)
    gemm_acc(ad + i * m * k, false, bd + i * k * n, transpose_b, out.data() + i * m * n, m, n, k);
  ImplPtr<T> pa = a.impl(), pb = b.impl();
  return make_result<T>(
      {batch, m, n}, std::move(out), {pa, pb},
      [pa, pb, batch, m, n, k, transpose_b](std::span<const T> g, std::span<const T>) {
        for (std::int64_t i = 0; i < batch; ++i) {
          const T* gi = g.data() + i * m * n;
          const T* ai = pa->data.data() + i * m * k;
          const T* bi = pb->data.data() + i * k * n;
          if (pa->requires_grad)
            gemm_acc(gi, false, bi, !transpose_b, grad_buffer(*pa).data() + i * m * k, m, k, n);
          if (pb->requires_grad) {
            T* gb = grad_buffer(*pb).data() + i * k * n;
            if (transpose_b)
              gemm_acc(gi, true, ai, false, gb, n, k, m);
            else
              gemm_acc(ai, true, gi, false, gb, k, n, m);
          }
        }
      });
}

namespace {

template <typename T>
Tensor<T> linear_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  require_rank("linear", w, 2);
  const auto out_dim = w.dim(0), in_dim = w.dim(1);
  if (x.shape().back() != in_dim) dim_error("linear", x.shape(), w.shape());
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_dim))
    dim_error("linear bias", w.shape(), bias->shape());
  const auto rows = x.numel() / in_dim;
  std::vector<T> out(static_cast<std::size_t>(rows * out_dim), T(0));
  if (bias)
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy(bias->data().begin(), bias->data().end(), out.begin() + r * out_dim);
  gemm_acc(x.data().data(), false, w.data().data(), true, out.data(), rows, out_dim, in_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  ImplPtr<T> px = x.impl(), pw = w.impl();
  ImplPtr<T> pb = bias ? bias->impl() : nullptr;
  std::vector<ImplPtr<T>> parents{px, pw};
  if (pb) parents.push_back(pb);
  return make_result<T>(std::move(shape), std::move(out), std::move(parents),
                        [px, pw, pb, rows, in_dim, out_dim](std::span<const T> g,
                                                            std::span<const T>) {
                          if (px->requires_grad)
                            gemm_acc(g.data(), false, pw->data.data(), false,
                                     grad_buffer(*px).data(), rows, in_dim, out_dim);
                          if (pw->requires_grad)
                            gemm_acc(g.data(), true, px->data.data(), false,
                                     grad_buffer(*pw).data(), out_dim, in_dim, rows);
                          if (pb && pb->requires_grad) {
                            auto gb = grad_buffer(*pb);
                            for (std::int64_t r = 0; r < rows; ++r)
                              for (std::int64_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return linear_impl(x, weight, static_cast<const Tensor<T>*>(nullptr));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear_impl(x, weight, &bias);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape())) dim_error("add", a.shape(), b.shape());
  const auto n = a.numel(), period = b.numel();
  std::vector<T> out = to_vec(a.data());
  const auto bd = b.data();
  for (std::int64_t i = 0; i < n; i += period)
    for (std::int64_t j = 0; j < period; ++j) out[i + j] += bd[j];
  ImplPtr<T> pa = a.impl(), pb = b.impl();
  return make_result<T>(a.shape(), std::move(out), {pa, pb},
                        [pa, pb, n, period](std::span<const T> g, std::span<const T>) {
                          if (pa->requires_grad) {
                            auto ga = grad_buffer(*pa);
                            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
                          }
                          if (pb->requires_grad) {
                            auto gb = grad_buffer(*pb);
                            for (std::int64_t i = 0; i < n; i += period)
                              for (std::int64_t j = 0; j < period; ++j) gb[j] += g[i + j];
                          }
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) dim_error("sub", a.shape(), b.shape());
  const auto n = a.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
  ImplPtr<T> pa = a.impl(), pb = b.impl();
  return make_result<T>(a.shape(), std::move(out), {pa, pb},
                        [pa, pb, n](std::span<const T> g, std::span<const T>) {
                          if (pa->requires_grad) {
                            auto ga = grad_buffer(*pa);
                            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
                          }
                          if (pb->requires_grad) {
                            auto gb = grad_buffer(*pb);
                            for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) dim_error("mul", a.shape(), b.shape());
  const auto n = a.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  ImplPtr<T> pa = a.impl(), pb = b.impl();
  return make_result<T>(a.shape(), std::move(out), {pa, pb},
                        [pa, pb, n](std::span<const T> g, std::span<const T>) {
                          if (pa->requires_grad) {
                            auto ga = grad_buffer(*pa);
                            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb->data[i];
                          }
                          if (pb->requires_grad) {
                            auto gb = grad_buffer(*pb);
                            for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa->data[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out = to_vec(x.data());
  for (auto& v : out) v *= factor;
  ImplPtr<T> px = x.impl();
  return make_result<T>(x.shape(), std::move(out), {px},
                        [px, factor](std::span<const T> g, std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out = to_vec(x.data());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  ImplPtr<T> px = x.impl();
  return make_result<T>(x.shape(), std::move(out), {px},
                        [px](std::span<const T> g, std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::size_t i = 0; i < gx.size(); ++i)
                            if (px->data[i] > T(0)) gx[i] += g[i];
                        });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T a = static_cast<T>(0.044715);
  const auto n = static_cast<Eigen::Index>(x.data().size());
  Eigen::Map<const Arr> v(x.data().data(), n);
  Arr t = (c * (v + a * v.cube())).tanh();
  std::vector<T> out(x.data().size());
  Eigen::Map<Arr>(out.data(), n) = T(0.5) * v * (T(1) + t);
  ImplPtr<T> px = x.impl();
  return make_result<T>(x.shape(), std::move(out), {px},
                        [px, c, a, t = std::move(t), n](std::span<const T> g, std::span<const T>) {
                          Eigen::Map<const Arr> v(px->data.data(), n);
                          Eigen::Map<const Arr> gm(g.data(), n);
                          Eigen::Map<Arr> gx(grad_buffer(*px).data(), n);
                          gx += gm * (T(0.5) * (T(1) + t) +
                                      T(0.5) * v * (T(1) - t.square()) * c *
                                          (T(1) + T(3) * a * v.square()));
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
  const auto d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d) dim_error("layer_norm gain", x.shape(), gain.shape());
  if (bias.rank() != 1 || bias.dim(0) != d) dim_error("layer_norm bias", x.shape(), bias.shape());
  const auto rows = x.numel() / d;
  std::vector<T> out(x.data().size());
  std::vector<T> xhat(x.data().size());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd[r] = rs;
    for (std::int64_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  ImplPtr<T> px = x.impl(), pg = gain.impl(), pb = bias.impl();
  return make_result<T>(
      x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](std::span<const T> g,
                                                                         std::span<const T>) {
        if (pg->requires_grad) {
          auto gg = grad_buffer(*pg);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (pb->requires_grad) {
          auto gb = grad_buffer(*pb);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (!px->requires_grad) return;
        auto gx = grad_buffer(*px);
        const auto& gain_v = pg->data;
        for (std::int64_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * gain_v[j];
            m1 += dh;
            m2 += dh * xhat[r * d + j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::int64_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * gain_v[j];
            gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
          }
        }
      });
}

namespace {

// Row-wise softmax over `len`-long rows; `keep` (may be null) marks live entries.
template <typename T>
void softmax_row(const T* in, T* out, std::int64_t len, const T* keep) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::int64_t j = 0; j < len; ++j)
    if (!keep || keep[j] != T(0)) mx = std::max(mx, in[j]);
  T total = 0;
  for (std::int64_t j = 0; j < len; ++j) {
    const T e = (!keep || keep[j] != T(0)) ? std::exp(in[j] - mx) : T(0);
    out[j] = e;
    total += e;
  }
  if (total > T(0))
    for (std::int64_t j = 0; j < len; ++j) out[j] /= total;
}

template <typename T>
Tensor<T> softmax_rows_impl(const Tensor<T>& x, std::span<const T> key_mask) {
  const auto len = x.shape().back();
  const auto rows = x.numel() / len;
  std::int64_t rows_per_batch = rows;
  if (!key_mask.empty()) {
    require_rank("masked_softmax_last", x, 3);
    rows_per_batch = x.dim(1);
    if (static_cast<std::int64_t>(key_mask.size()) != x.dim(0) * len)
      throw DimensionError("masked_softmax_last: mask has " + std::to_string(key_mask.size()) +
                           " entries for input " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* keep = key_mask.empty() ? nullptr : key_mask.data() + (r / rows_per_batch) * len;
    softmax_row(x.data().data() + r * len, out.data() + r * len, len, keep);
  }
  ImplPtr<T> px = x.impl();
  return make_result<T>(x.shape(), std::move(out), {px},
                        [px, rows, len](std::span<const T> g, std::span<const T> y) {
                          auto gx = grad_buffer(*px);
                          for (std::int64_t r = 0; r < rows; ++r) {
                            const T* yr = y.data() + r * len;
                            const T* gr = g.data() + r * len;
                            T dot = 0;
                            for (std::int64_t j = 0; j < len; ++j) dot += gr[j] * yr[j];
                            for (std::int64_t j = 0; j < len; ++j)
                              gx[r * len + j] += yr[j] * (gr[j] - dot);
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  return softmax_rows_impl(x, std::span<const T>{});
}

template <typename T>
Tensor<T> masked_softmax_last(const Tensor<T>& x, std::span<const T> key_mask) {
  return softmax_rows_impl(x, key_mask);
}

template <typename T>
Tensor<T> softmax_columns(const Tensor<T>& x) {
  require_rank("softmax_columns", x, 2);
  return transpose(softmax_last(transpose(x)));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  ImplPtr<T> px = x.impl();
  return make_result<T>({1}, {s}, {px}, [px](std::span<const T> g, std::span<const T>) {
    auto gx = grad_buffer(*px);
    for (auto& v : gx) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> frobenius_sq(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v * v;
  ImplPtr<T> px = x.impl();
  return make_result<T>({1}, {s}, {px}, [px](std::span<const T> g, std::span<const T>) {
    auto gx = grad_buffer(*px);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * px->data[i] * g[0];
  });
}

template <typename T>
Tensor<T> batch_frobenius_sq(const Tensor<T>& x) {
  const auto batch = x.dim(0);
  const auto per = x.numel() / batch;
  std::vector<T> out(static_cast<std::size_t>(batch), T(0));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < per; ++i) {
      const T v = x.data()[b * per + i];
      out[b] += v * v;
    }
  ImplPtr<T> px = x.impl();
  return make_result<T>({batch}, std::move(out), {px},
                        [px, batch, per](std::span<const T> g, std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t i = 0; i < per; ++i)
                              gx[b * per + i] += T(2) * px->data[b * per + i] * g[b];
                        });
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights) {
  require_rank("weighted_sum", x, 1);
  if (static_cast<std::int64_t>(weights.size()) != x.dim(0))
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         shape_str(x.shape()));
  T s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x.data()[i];
  ImplPtr<T> px = x.impl();
  return make_result<T>({1}, {s}, {px},
                        [px, w = to_vec(weights)](std::span<const T> g, std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::size_t i = 0; i < w.size(); ++i) gx[i] += w[i] * g[0];
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank("transpose", x, 2);
  const auto r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.data().size());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  ImplPtr<T> px = x.impl();
  return make_result<T>({c, r}, std::move(out), {px},
                        [px, r, c](std::span<const T> g, std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::int64_t i = 0; i < r; ++i)
                            for (std::int64_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                        });
}

template <typename T>
Tensor<T> concat_heads(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_heads: no inputs");
  if (parts.size() == 1) return parts.front();
  Shape lead = parts.front().shape();
  lead.pop_back();
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) dim_error("concat_heads", parts.front().shape(), p.shape());
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const auto rows = shape_numel(lead);
  std::vector<T> out(static_cast<std::size_t>(rows * total));
  std::vector<ImplPtr<T>> parents;
  std::int64_t off = 0;
  for (std::size_t h = 0; h < parts.size(); ++h) {
    const auto w = widths[h];
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(parts[h].data().data() + r * w, w, out.data() + r * total + off);
    off += w;
    parents.push_back(parts[h].impl());
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result<T>(std::move(shape), std::move(out), parents,
                        [parents, widths, rows, total](std::span<const T> g, std::span<const T>) {
                          std::int64_t o = 0;
                          for (std::size_t h = 0; h < parents.size(); ++h) {
                            const auto w = widths[h];
                            if (parents[h]->requires_grad) {
                              auto gp = grad_buffer(*parents[h]);
                              for (std::int64_t r = 0; r < rows; ++r)
                                for (std::int64_t j = 0; j < w; ++j)
                                  gp[r * w + j] += g[r * total + o + j];
                            }
                            o += w;
                          }
                        });
}

template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, std::int64_t start, std::int64_t count) {
  require_rank("slice_tokens", x, 3);
  const auto batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (start < 0 || count < 1 || start + count > n)
    throw DimensionError("slice_tokens: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
  std::vector<T> out(static_cast<std::size_t>(batch * count * d));
  for (std::int64_t b = 0; b < batch; ++b)
    std::copy_n(x.data().data() + (b * n + start) * d, count * d, out.data() + b * count * d);
  ImplPtr<T> px = x.impl();
  return make_result<T>({batch, count, d}, std::move(out), {px},
                        [px, batch, n, d, start, count](std::span<const T> g, std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t i = 0; i < count * d; ++i)
                              gx[(b * n + start) * d + i] += g[b * count * d + i];
                        });
}

template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  require_rank("prepend_token", x, 3);
  const auto batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (token.numel() != d) dim_error("prepend_token", x.shape(), token.shape());
  std::vector<T> out(static_cast<std::size_t>(batch * (n + 1) * d));
  for (std::int64_t b = 0; b < batch; ++b) {
    std::copy_n(token.data().data(), d, out.data() + b * (n + 1) * d);
    std::copy_n(x.data().data() + b * n * d, n * d, out.data() + (b * (n + 1) + 1) * d);
  }
  ImplPtr<T> px = x.impl(), pt = token.impl();
  return make_result<T>({batch, n + 1, d}, std::move(out), {px, pt},
                        [px, pt, batch, n, d](std::span<const T> g, std::span<const T>) {
                          for (std::int64_t b = 0; b < batch; ++b) {
                            const T* gb = g.data() + b * (n + 1) * d;
                            if (pt->requires_grad) {
                              auto gt = grad_buffer(*pt);
                              for (std::int64_t j = 0; j < d; ++j) gt[j] += gb[j];
                            }
                            if (px->requires_grad) {
                              auto gx = grad_buffer(*px);
                              for (std::int64_t i = 0; i < n * d; ++i) gx[b * n * d + i] += gb[d + i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> mask_tokens(const Tensor<T>& x, std::span<const T> mask) {
  require_rank("mask_tokens", x, 3);
  const auto tokens = x.dim(0) * x.dim(1), d = x.dim(2);
  if (static_cast<std::int64_t>(mask.size()) != tokens)
    throw DimensionError("mask_tokens: mask has " + std::to_string(mask.size()) +
                         " entries for " + shape_str(x.shape()));
  std::vector<T> out = to_vec(x.data());
  for (std::int64_t t = 0; t < tokens; ++t)
    for (std::int64_t j = 0; j < d; ++j) out[t * d + j] *= mask[t];
  ImplPtr<T> px = x.impl();
  return make_result<T>(x.shape(), std::move(out), {px},
                        [px, m = to_vec(mask), tokens, d](std::span<const T> g, std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::int64_t t = 0; t < tokens; ++t)
                            for (std::int64_t j = 0; j < d; ++j) gx[t * d + j] += g[t * d + j] * m[t];
                        });
}

template <typename T>
Tensor<T> masked_mean_tokens(const Tensor<T>& x, std::span<const T> mask) {
  require_rank("masked_mean_tokens", x, 3);
  const auto batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  std::vector<T> m(static_cast<std::size_t>(batch * n), T(1));
  if (!mask.empty()) {
    if (static_cast<std::int64_t>(mask.size()) != batch * n)
      throw DimensionError("masked_mean_tokens: mask has " + std::to_string(mask.size()) +
                           " entries for " + shape_str(x.shape()));
    m = to_vec(mask);
  }
  std::vector<T> weight(m.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    T count = 0;
    for (std::int64_t j = 0; j < n; ++j) count += m[b * n + j];
    for (std::int64_t j = 0; j < n; ++j)
      weight[b * n + j] = count > T(0) ? m[b * n + j] / count : T(0);
  }
  std::vector<T> out(static_cast<std::size_t>(batch * d), T(0));
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t k = 0; k < d; ++k)
        out[b * d + k] += weight[b * n + j] * x.data()[(b * n + j) * d + k];
  ImplPtr<T> px = x.impl();
  return make_result<T>({batch, d}, std::move(out), {px},
                        [px, weight = std::move(weight), batch, n, d](std::span<const T> g,
                                                                     std::span<const T>) {
                          auto gx = grad_buffer(*px);
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t j = 0; j < n; ++j)
                              for (std::int64_t k = 0; k < d; ++k)
                                gx[(b * n + j) * d + k] += weight[b * n + j] * g[b * d + k];
                        });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids, std::int64_t batch,
                           std::int64_t tokens) {
  require_rank("embedding_lookup", table, 2);
  const auto vocab = table.dim(0), d = table.dim(1);
  if (static_cast<std::int64_t>(ids.size()) != batch * tokens)
    throw DimensionError("embedding_lookup: " + std::to_string(ids.size()) + " ids for " +
                         std::to_string(batch) + "x" + std::to_string(tokens) + " tokens");
  std::vector<T> out(static_cast<std::size_t>(batch * tokens * d));
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= vocab)
      throw std::out_of_range("embedding_lookup: token id " + std::to_string(ids[t]) +
                              " outside vocabulary of " + std::to_string(vocab));
    std::copy_n(table.data().data() + ids[t] * d, d, out.data() + static_cast<std::int64_t>(t) * d);
  }
  ImplPtr<T> pt = table.impl();
  return make_result<T>({batch, tokens, d}, std::move(out), {pt},
                        [pt, idv = std::vector<int>(ids.begin(), ids.end()), d](std::span<const T> g,
                                                                                 std::span<const T>) {
                          auto gt = grad_buffer(*pt);
                          for (std::size_t t = 0; t < idv.size(); ++t)
                            for (std::int64_t k = 0; k < d; ++k)
                              gt[idv[t] * d + k] += g[static_cast<std::int64_t>(t) * d + k];
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank("cross_entropy", logits, 2);
  const auto batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != batch)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  std::vector<T> probs(logits.data().size());
  std::vector<T> out(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    const int y = targets[b];
    if (y < 0 || y >= classes)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    const T* row = logits.data().data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = 0;
    for (std::int64_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const T lse = mx + std::log(total);
    out[b] = lse - row[y];
    for (std::int64_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
  }
  ImplPtr<T> pl = logits.impl();
  return make_result<T>(
      {batch}, std::move(out), {pl},
      [pl, probs = std::move(probs), tv = std::vector<int>(targets.begin(), targets.end()), batch,
       classes](std::span<const T> g, std::span<const T>) {
        auto gl = grad_buffer(*pl);
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t c = 0; c < classes; ++c)
            gl[b * classes + c] +=
                g[b] * (probs[b * classes + c] - (c == tv[b] ? T(1) : T(0)));
      });
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

#define OTF_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&, bool);                    \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);    \
  template Tensor<T> softmax_last(const Tensor<T>&);                                              \
  template Tensor<T> masked_softmax_last(const Tensor<T>&, std::span<const T>);                   \
  template Tensor<T> softmax_columns(const Tensor<T>&);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> frobenius_sq(const Tensor<T>&);                                              \
  template Tensor<T> batch_frobenius_sq(const Tensor<T>&);                                        \
  template Tensor<T> weighted_sum(const Tensor<T>&, std::span<const T>);                          \
  template Tensor<T> transpose(const Tensor<T>&);                                                 \
  template Tensor<T> concat_heads(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> slice_tokens(const Tensor<T>&, std::int64_t, std::int64_t);                  \
  template Tensor<T> prepend_token(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mask_tokens(const Tensor<T>&, std::span<const T>);                           \
  template Tensor<T> masked_mean_tokens(const Tensor<T>&, std::span<const T>);                    \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int>, std::int64_t,       \
                                      std::int64_t);                                              \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                       \
  template bool all_finite(std::span<const T>);

OTF_INSTANTIATE_OPS(float)
OTF_INSTANTIATE_OPS(double)

}  // namespace otf
