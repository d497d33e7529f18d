#include "alignvar/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace avar::nd {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

// Per-axis strides of `in` when broadcast to `out` (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t ax_in = in.size() - 1 - i;
    const std::size_t ax_out = out.size() - 1 - i;
    strides[ax_out] = in[ax_in] == 1 ? 0 : stride;
    stride *= in[ax_in];
  }
  return strides;
}

// Calls fn(out_flat, a_flat, b_flat) for every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t n = numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T>
std::size_t last_axis(const Tensor<T>& x, const char* op) {
  if (x.rank() == 0) shape_fail(op, "needs rank >= 1, got scalar");
  return x.shape().back();
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value.assign(nd::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (nd::numel(shape) != values.size()) {
    shape_fail("from", "shape " + shape_str(shape) + " needs " + std::to_string(nd::numel(shape)) +
                           " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const auto& p) { return p->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

// ---- elementwise ------------------------------------------------------------

namespace {

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  Shape out = broadcast_shape(a.shape(), b.shape(), op);
  std::vector<T> value(numel(out));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_broadcast(out, a.shape(), b.shape(),
                     [&](std::size_t o, std::size_t i, std::size_t j) { value[o] = fwd(av[i], bv[j]); });
  auto pa = a.node();
  auto pb = b.node();
  return make_result<T>(op, out, std::move(value), {pa, pb}, [pa, pb, da, db](Node<T>& self) {
    const bool ga = pa->requires_grad, gb = pb->requires_grad;
    if (ga) pa->ensure_grad();
    if (gb) pb->ensure_grad();
    for_each_broadcast(self.shape, pa->shape, pb->shape,
                       [&](std::size_t o, std::size_t i, std::size_t j) {
                         const T g = self.grad[o];
                         if (ga) pa->grad[i] += g * da(pa->value[i], pb->value[j]);
                         if (gb) pb->grad[j] += g * db(pa->value[i], pb->value[j]);
                       });
  });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  std::vector<T> value(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) value[i] = fwd(xv[i]);
  auto px = x.node();
  return make_result<T>(op, x.shape(), std::move(value), {px}, [px, deriv](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      px->grad[i] += self.grad[i] * deriv(px->value[i], self.value[i]);
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary<T>(
      "add_scalar", x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // Exact erf form.
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(kInvSqrt2))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2)));
        const T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

// ---- linear algebra ---------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_fail("matmul", "cannot contract " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> value(m * n);
  MapM<T>(value.data(), m, n).noalias() = MapC<T>(a.data().data(), m, k) * MapC<T>(b.data().data(), k, n);
  auto pa = a.node();
  auto pb = b.node();
  return make_result<T>("matmul", {m, n}, std::move(value), {pa, pb}, [pa, pb, m, k, n](Node<T>& self) {
    MapC<T> g(self.grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      MapM<T>(pa->grad.data(), m, k).noalias() += g * MapC<T>(pb->value.data(), k, n).transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      MapM<T>(pb->grad.data(), k, n).noalias() += MapC<T>(pa->value.data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) shape_fail("transpose", "needs rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> value(r * c);
  MapM<T>(value.data(), c, r) = MapC<T>(x.data().data(), r, c).transpose();
  auto px = x.node();
  return make_result<T>("transpose", {c, r}, std::move(value), {px}, [px, r, c](Node<T>& self) {
    px->ensure_grad();
    MapM<T>(px->grad.data(), r, c) += MapC<T>(self.grad.data(), c, r).transpose();
  });
}

// ---- last-axis ops ----------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = last_axis(x, "softmax");
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  std::vector<T> value(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* out = value.data() + r * n;
    const T peak = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += (out[j] = std::exp(in[j] - peak));
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
  }
  auto px = x.node();
  return make_result<T>("softmax", x.shape(), std::move(value), {px}, [px, n, rows](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      T* dx = px->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::size_t n = last_axis(x, "log_softmax");
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  std::vector<T> value(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    const T peak = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - peak);
    const T lse = peak + std::log(total);
    for (std::size_t j = 0; j < n; ++j) value[r * n + j] = in[j] - lse;
  }
  auto px = x.node();
  return make_result<T>("log_softmax", x.shape(), std::move(value), {px}, [px, n, rows](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T gsum = 0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[j];
      T* dx = px->grad.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dx[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t n = last_axis(x, "layer_norm");
  if (gamma.numel() != n || beta.numel() != n) {
    shape_fail("layer_norm", "affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                                 " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> value(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (in[j] - mu) * inv_std[r];
      xhat[r * n + j] = h;
      value[r * n + j] = h * gv[j] + bv[j];
    }
  }
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return make_result<T>(
      "layer_norm", x.shape(), std::move(value), {px, pg, pb},
      [px, pg, pb, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (px->requires_grad) px->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * n;
          const T* h = xhat.data() + r * n;
          T sum_dh = 0, sum_dh_h = 0;
          for (std::size_t j = 0; j < n; ++j) {
            if (pg->requires_grad) pg->grad[j] += g[j] * h[j];
            if (pb->requires_grad) pb->grad[j] += g[j];
            const T dh = g[j] * pg->value[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
          }
          if (!px->requires_grad) continue;
          T* dx = px->grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) {
            const T dh = g[j] * pg->value[j];
            dx[j] += inv_std[r] * (dh - sum_dh / T(n) - h[j] * sum_dh_h / T(n));
          }
        }
      });
}

// ---- structural -------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto px = x.node();
  return make_result<T>("reshape", std::move(shape), px->value, {px}, [px](Node<T>& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_fail("concat", "axis out of range for " + shape_str(first));
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) shape_fail("concat", "mismatched part " + shape_str(s) + " vs " + shape_str(first));
    out[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out[axis] * inner;

  std::vector<T> value(numel(out));
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, value.data() + o * out_row + offset);
    }
    parents.push_back(p.node());
    offsets.push_back(offset);
    offset += chunk;
  }
  return make_result<T>("concat", out, std::move(value), parents,
                        [parents, offsets, outer, inner, out_row, axis](Node<T>& self) {
                          for (std::size_t i = 0; i < parents.size(); ++i) {
                            auto& p = parents[i];
                            if (!p->requires_grad) continue;
                            p->ensure_grad();
                            const std::size_t chunk = p->shape[axis] * inner;
                            for (std::size_t o = 0; o < outer; ++o) {
                              const T* g = self.grad.data() + o * out_row + offsets[i];
                              T* d = p->grad.data() + o * chunk;
                              for (std::size_t j = 0; j < chunk; ++j) d[j] += g[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    shape_fail("slice_rows", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                 ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t row = x.numel() / x.dim(0);
  Shape out = x.shape();
  out[0] = end - begin;
  std::vector<T> value(x.data().begin() + begin * row, x.data().begin() + end * row);
  auto px = x.node();
  return make_result<T>("slice_rows", out, std::move(value), {px}, [px, begin, row](Node<T>& self) {
    px->ensure_grad();
    T* d = px->grad.data() + begin * row;
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) shape_fail("gather_rows", "needs rank >= 1");
  const std::size_t n_rows = x.dim(0);
  const std::size_t row = x.numel() / n_rows;
  Shape out = x.shape();
  out[0] = rows.size();
  std::vector<T> value(rows.size() * row);
  const auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) {
      shape_fail("gather_rows", "row " + std::to_string(rows[i]) + " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(xv.data() + rows[i] * row, row, value.data() + i * row);
  }
  auto px = x.node();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>("gather_rows", out, std::move(value), {px},
                        [px, idx = std::move(idx), row](Node<T>& self) {
                          px->ensure_grad();
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            const T* g = self.grad.data() + i * row;
                            T* d = px->grad.data() + idx[i] * row;
                            for (std::size_t j = 0; j < row; ++j) d[j] += g[j];
                          }
                        });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto px = x.node();
  return make_result<T>("sum", {}, {total}, {px}, [px](Node<T>& self) {
    px->ensure_grad();
    for (T& d : px->grad) d += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) shape_fail("mean", "empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_fail("squared_error", "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  T total = 0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  auto pa = a.node();
  auto pb = b.node();
  return make_result<T>("squared_error", {}, {total}, {pa, pb}, [pa, pb](Node<T>& self) {
    const T g = self.grad[0];
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (std::size_t i = 0; i < pa->value.size(); ++i) {
      const T d = T(2) * (pa->value[i] - pb->value[i]) * g;
      if (pa->requires_grad) pa->grad[i] += d;
      if (pb->requires_grad) pb->grad[i] -= d;
    }
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() == 0) shape_fail("mse", "empty tensor");
  return scale(squared_error(a, b), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    shape_fail("cross_entropy", "logits " + shape_str(logits.shape()) + " vs " +
                                    std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  const auto xv = logits.data();
  std::vector<T> probs(xv.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= n) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0," +
                              std::to_string(n) + ")");
    }
    const T* in = xv.data() + r * n;
    T* p = probs.data() + r * n;
    const T peak = *std::max_element(in, in + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (p[j] = std::exp(in[j] - peak));
    for (std::size_t j = 0; j < n; ++j) p[j] /= z;
    total += -(in[t] - peak - std::log(z));
  }
  auto px = logits.node();
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result<T>("cross_entropy", {}, {total}, {px},
                        [px, probs = std::move(probs), tgt = std::move(tgt), n](Node<T>& self) {
                          px->ensure_grad();
                          const T g = self.grad[0];
                          for (std::size_t r = 0; r < tgt.size(); ++r) {
                            T* d = px->grad.data() + r * n;
                            const T* p = probs.data() + r * n;
                            for (std::size_t j = 0; j < n; ++j) d[j] += g * p[j];
                            d[tgt[r]] -= g;
                          }
                        });
}

// ---- instantiation ----------------------------------------------------------

#define AVAR_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                   \
  template Tensor<T> make_result<T>(const char*, Shape, std::vector<T>,                       \
                                    std::vector<std::shared_ptr<Node<T>>>,                    \
                                    std::function<void(Node<T>&)>);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> square(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose(const Tensor<T>&);                                             \
  template Tensor<T> softmax(const Tensor<T>&);                                               \
  template Tensor<T> log_softmax(const Tensor<T>&);                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                      \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> squared_error(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> cross_entropy_sum(const Tensor<T>&, std::span<const int>);

AVAR_INSTANTIATE(float)
AVAR_INSTANTIATE(double)

#undef AVAR_INSTANTIATE

}  // namespace avar::nd
