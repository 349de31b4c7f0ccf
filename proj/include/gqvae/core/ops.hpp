#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gqvae/core/graph.hpp"

// Differentiable primitives. Every op computes its value eagerly and records a
// closure that pushes the output gradient into whichever parents need one.

namespace gqvae::nn {

namespace detail {

inline Shape with_last(Shape s, std::size_t last) {
  if (s.empty()) s.push_back(last);
  else s.back() = last;
  return s;
}

inline Shape drop_last(Shape s) {
  if (!s.empty()) s.pop_back();
  return s;
}

template <typename T>
void check_col_vector(const Array<T>& x, const Array<T>& v, const char* op) {
  if (v.size() != x.rows()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(x.shape()) + " vs " + shape_string(v.shape()));
  }
}

/// out (n x m) = x (n x k) * w (k x m) [+ bias]. Every output element is
/// accumulated in the same k order whatever its row position or n, so a row's
/// result never depends on the other rows of the batch.
template <typename T>
void row_stable_gemm(const T* x, const T* w, const T* bias, T* out, std::size_t n,
                     std::size_t k, std::size_t m) {
  constexpr std::size_t kTile = 4;
  auto init = [&](T* __restrict o) {
    if (bias != nullptr) std::copy_n(bias, m, o);
    else std::fill_n(o, m, T(0));
  };
  std::size_t r = 0;
  for (; r + kTile <= n; r += kTile) {
    T* __restrict o0 = out + (r + 0) * m;
    T* __restrict o1 = out + (r + 1) * m;
    T* __restrict o2 = out + (r + 2) * m;
    T* __restrict o3 = out + (r + 3) * m;
    init(o0), init(o1), init(o2), init(o3);
    const T* x0 = x + (r + 0) * k;
    const T* x1 = x + (r + 1) * k;
    const T* x2 = x + (r + 2) * k;
    const T* x3 = x + (r + 3) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict wr = w + p * m;
      const T a0 = x0[p], a1 = x1[p], a2 = x2[p], a3 = x3[p];
      for (std::size_t j = 0; j < m; ++j) {
        const T wj = wr[j];
        o0[j] += a0 * wj;
        o1[j] += a1 * wj;
        o2[j] += a2 * wj;
        o3[j] += a3 * wj;
      }
    }
  }
  for (; r < n; ++r) {
    T* __restrict o = out + r * m;
    init(o);
    const T* xr = x + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict wr = w + p * m;
      const T a = xr[p];
      for (std::size_t j = 0; j < m; ++j) o[j] += a * wr[j];
    }
  }
}

}  // namespace detail

// ------------------------------------------------------------ linear algebra

/// (rows x k) * (k x m); leading extents of `a` are kept.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (bv.rank() != 2 || av.cols() != bv.shape()[0]) {
    throw ShapeError("matmul: shape mismatch " + shape_string(av.shape()) +
                     " vs " + shape_string(bv.shape()));
  }
  Array<T> out(detail::with_last(av.shape(), bv.shape()[1]));
  detail::row_stable_gemm(av.data(), bv.data(), static_cast<const T*>(nullptr), out.data(),
                          av.rows(), av.cols(), bv.shape()[1]);
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self).matrix();
    if (g.requires_grad(ai)) {
      g.grad(ai).matrix().noalias() += dy * g.value(bi).matrix().transpose();
    }
    if (g.requires_grad(bi)) {
      g.grad(bi).matrix().noalias() += g.value(ai).matrix().transpose() * dy;
    }
  });
}

/// x * weight + bias, with weight (in x out) and bias (out).
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  if (wv.rank() != 2 || xv.cols() != wv.shape()[0] || bv.size() != wv.shape()[1]) {
    throw ShapeError("linear: shape mismatch " + shape_string(xv.shape()) +
                     " vs " + shape_string(wv.shape()) + " + " +
                     shape_string(bv.shape()));
  }
  Array<T> out(detail::with_last(xv.shape(), wv.shape()[1]));
  detail::row_stable_gemm(xv.data(), wv.data(), bv.data(), out.data(), xv.rows(), xv.cols(),
                          wv.shape()[1]);
  const auto xi = x.id, wi = weight.id, bi = bias.id;
  return x.graph->record(std::move(out), {x, weight, bias},
                         [=](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self).matrix();
    if (g.requires_grad(xi)) {
      g.grad(xi).matrix().noalias() += dy * g.value(wi).matrix().transpose();
    }
    if (g.requires_grad(wi)) {
      g.grad(wi).matrix().noalias() += g.value(xi).matrix().transpose() * dy;
    }
    if (g.requires_grad(bi)) {
      g.grad(bi).matrix().row(0) += dy.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    for (auto id : {ai, bi}) {
      if (!g.requires_grad(id)) continue;
      auto& d = g.grad(id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.requires_grad(ai)) {
      auto& d = g.grad(ai);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (g.requires_grad(bi)) {
      auto& d = g.grad(bi);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Array<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ai = a.id, bi = b.id;
  return a.graph->record(std::move(out), {a, b}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.requires_grad(ai)) {
      auto& d = g.grad(ai);
      const auto& other = g.value(bi);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * other[i];
    }
    if (g.requires_grad(bi)) {
      auto& d = g.grad(bi);
      const auto& other = g.value(ai);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * other[i];
    }
  });
}

/// Adds a (cols) vector to every row.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  if (bias.value().size() != xv.cols()) {
    throw ShapeError("add_bias: shape mismatch " + shape_string(xv.shape()) +
                     " vs " + shape_string(bias.shape()));
  }
  Array<T> out = xv;
  out.matrix().rowwise() += bias.value().matrix().row(0);
  const auto xi = x.id, bi = bias.id;
  return x.graph->record(std::move(out), {x, bias}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.requires_grad(xi)) {
      auto& d = g.grad(xi);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (g.requires_grad(bi)) g.grad(bi).matrix().row(0) += dy.matrix().colwise().sum();
  });
}

/// Broadcasts `row` (cols) over a block of `rows` copies, e.g. positional
/// embeddings tiled across a batch: out[r][c] = x[r][c] + row[r % period][c].
template <typename T>
Var<T> add_periodic(Var<T> x, Var<T> table, std::size_t period) {
  const auto& xv = x.value();
  const auto& tv = table.value();
  if (tv.cols() != xv.cols() || tv.rows() < period || period == 0) {
    throw ShapeError("add_periodic: shape mismatch " + shape_string(xv.shape()) +
                     " vs " + shape_string(tv.shape()));
  }
  Array<T> out = xv;
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const std::size_t p = r % period;
    for (std::size_t k = 0; k < c; ++k) out[r * c + k] += tv[p * c + k];
  }
  const auto xi = x.id, ti = table.id;
  return x.graph->record(std::move(out), {x, table}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.requires_grad(xi)) {
      auto& d = g.grad(xi);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (g.requires_grad(ti)) {
      auto& d = g.grad(ti);
      const std::size_t rows = dy.size() / c;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t p = r % period;
        for (std::size_t k = 0; k < c; ++k) d[p * c + k] += dy[r * c + k];
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Array<T> out = x.value();
  for (auto& v : out.storage()) v *= factor;
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& d = g.grad(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * factor;
  });
}

/// Elementwise product with a constant array (no gradient to the constant).
template <typename T>
Var<T> mul_const(Var<T> x, const Array<T>& c) {
  if (c.size() != x.value().size()) {
    throw ShapeError("mul_const: shape mismatch " + shape_string(x.shape()) +
                     " vs " + shape_string(c.shape()));
  }
  Array<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& d = g.grad(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * c[i];
  });
}

namespace detail {

template <typename T, typename F, typename DF>
Var<T> unary(Var<T> x, F f, DF df) {
  const auto& xv = x.value();
  Array<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    const auto& xs = g.value(xi);
    const auto& ys = g.value(self);
    auto& d = g.grad(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * df(xs[i], ys[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// tanh approximation of GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return detail::unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [](T v, T) {
        const T u = k * (v + c * v * v * v);
        const T t = std::tanh(u);
        const T du = k * (T(1) + T(3) * c * v * v);
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
      });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary(
      x, [](T v) { return sigmoid_value(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return detail::unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// ------------------------------------------------------------------ reductions

template <typename T>
Var<T> sum(Var<T> x) {
  T s = T(0);
  for (T v : x.value().values()) s += v;
  const auto xi = x.id;
  return x.graph->record(Array<T>::scalar(s), {x}, [=](Graph<T>& g, std::size_t self) {
    const T dy = g.grad(self)[0];
    auto& d = g.grad(xi);
    for (auto& v : d.storage()) v += dy;
  });
}

/// Sum over the last axis.
template <typename T>
Var<T> sum_cols(Var<T> x) {
  const auto& xv = x.value();
  Array<T> out(detail::drop_last(xv.shape()));
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    T s = T(0);
    for (std::size_t k = 0; k < c; ++k) s += xv[r * c + k];
    out[r] = s;
  }
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& d = g.grad(xi);
    for (std::size_t r = 0; r < dy.size(); ++r) {
      for (std::size_t k = 0; k < c; ++k) d[r * c + k] += dy[r];
    }
  });
}

template <typename T>
Var<T> mean_cols(Var<T> x) {
  return scale(sum_cols(x), T(1) / static_cast<T>(x.value().cols()));
}

namespace detail {

template <typename T, typename Better>
Var<T> row_extreme(Var<T> x, Better better) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  Array<T> out(drop_last(xv.shape()));
  std::vector<std::size_t> arg(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (better(xv[r * c + k], xv[r * c + best])) best = k;
    }
    arg[r] = best;
    out[r] = xv[r * c + best];
  }
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x},
                         [=, arg = std::move(arg)](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& d = g.grad(xi);
    for (std::size_t r = 0; r < arg.size(); ++r) d[r * c + arg[r]] += dy[r];
  });
}

}  // namespace detail

/// Minimum over the last axis; the gradient goes to the first minimiser.
template <typename T>
Var<T> row_min(Var<T> x) {
  return detail::row_extreme(x, [](T a, T b) { return a < b; });
}

/// Maximum over the last axis; the gradient goes to the first maximiser.
template <typename T>
Var<T> row_max(Var<T> x) {
  return detail::row_extreme(x, [](T a, T b) { return a > b; });
}

/// out[r][c] = x[r][c] - v[r].
template <typename T>
Var<T> sub_col(Var<T> x, Var<T> v) {
  const auto& xv = x.value();
  const auto& vv = v.value();
  detail::check_col_vector(xv, vv, "sub_col");
  const std::size_t c = xv.cols();
  Array<T> out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t k = 0; k < c; ++k) out[r * c + k] -= vv[r];
  }
  const auto xi = x.id, vi = v.id;
  return x.graph->record(std::move(out), {x, v}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.requires_grad(xi)) {
      auto& d = g.grad(xi);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (g.requires_grad(vi)) {
      auto& d = g.grad(vi);
      for (std::size_t r = 0; r < d.size(); ++r) {
        for (std::size_t k = 0; k < c; ++k) d[r] -= dy[r * c + k];
      }
    }
  });
}

/// out[r][c] = x[r][c] / v[r].
template <typename T>
Var<T> div_col(Var<T> x, Var<T> v) {
  const auto& xv = x.value();
  const auto& vv = v.value();
  detail::check_col_vector(xv, vv, "div_col");
  const std::size_t c = xv.cols();
  Array<T> out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t k = 0; k < c; ++k) out[r * c + k] /= vv[r];
  }
  const auto xi = x.id, vi = v.id;
  return x.graph->record(std::move(out), {x, v}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    const auto& vs = g.value(vi);
    if (g.requires_grad(xi)) {
      auto& d = g.grad(xi);
      for (std::size_t r = 0; r < vs.size(); ++r) {
        for (std::size_t k = 0; k < c; ++k) d[r * c + k] += dy[r * c + k] / vs[r];
      }
    }
    if (g.requires_grad(vi)) {
      const auto& xs = g.value(xi);
      auto& d = g.grad(vi);
      for (std::size_t r = 0; r < vs.size(); ++r) {
        T acc = T(0);
        for (std::size_t k = 0; k < c; ++k) acc += dy[r * c + k] * xs[r * c + k];
        d[r] -= acc / (vs[r] * vs[r]);
      }
    }
  });
}

/// Cumulative sum along the last axis. With `reverse`, s[i] = sum_{j>=i} x[j].
template <typename T>
Var<T> cumsum_rows(Var<T> x, bool reverse = false) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  Array<T> out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    T acc = T(0);
    for (std::size_t n = 0; n < c; ++n) {
      const std::size_t k = reverse ? c - 1 - n : n;
      acc += xv[r * c + k];
      out[r * c + k] = acc;
    }
  }
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& d = g.grad(xi);
    const std::size_t rows = dy.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
      T acc = T(0);
      for (std::size_t n = 0; n < c; ++n) {
        const std::size_t k = reverse ? n : c - 1 - n;
        acc += dy[r * c + k];
        d[r * c + k] += acc;
      }
    }
  });
}

// -------------------------------------------------------------- gradient flow

/// Identity on values, blocks the gradient.
template <typename T>
Var<T> stop_gradient(Var<T> x) {
  return x.graph->constant(x.graph->detach(x.value()));
}

/// Straight-through estimator: the value is `quantized` exactly, the gradient
/// is copied unchanged to `continuous`. `quantized` receives no gradient.
template <typename T>
Var<T> straight_through(Var<T> continuous, Var<T> quantized) {
  require_same_shape(continuous.shape(), quantized.shape(), "straight_through");
  Graph<T>& graph = *continuous.graph;
  const auto& cv = continuous.value();
  Array<T> residual = quantized.value();
  for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= cv[i];
  residual = graph.detach(std::move(residual));
  Array<T> out = quantized.value();
  if (graph.replaying()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = cv[i] + residual[i];
  }
  const auto ci = continuous.id;
  return graph.record(std::move(out), {continuous},
                                  [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& d = g.grad(ci);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Array<T> out = x.value();
  out.reshape(std::move(shape));
  const auto xi = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& d = g.grad(xi);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
  });
}

// ------------------------------------------------------------------- layers

/// Row lookup into a (V x d) table. Out-of-range ids are rejected.
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids) {
  const auto& tv = table.value();
  const std::size_t d = tv.cols();
  const std::size_t n_rows = tv.rows();
  Array<T> out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= n_rows) {
      throw ShapeError("embedding: id " + std::to_string(ids[r]) +
                       " outside table of shape " + shape_string(tv.shape()));
    }
    std::copy_n(tv.data() + ids[r] * d, d, out.data() + r * d);
  }
  const auto ti = table.id;
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return table.graph->record(std::move(out), {table},
                             [=, idx = std::move(idx)](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& dt = g.grad(ti);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      T* dst = dt.data() + idx[r] * d;
      const T* src = dy.data() + r * d;
      for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
    }
  });
}

/// Normalises each row to zero mean and unit variance, then applies
/// gamma/beta. A constant row has centred value 0, so its output is beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("layer_norm: shape mismatch " + shape_string(xv.shape()) +
                     " vs " + shape_string(gamma.shape()));
  }
  const std::size_t rows = xv.rows();
  Array<T> out(xv.shape());
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(rows);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mean = T(0);
    for (std::size_t k = 0; k < c; ++k) mean += row[k];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t k = 0; k < c; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t k = 0; k < c; ++k) {
      const T centred = var > T(0) ? row[k] - mean : T(0);
      const T h = centred * is;
      xhat[r * c + k] = h;
      out[r * c + k] = h * gv[k] + bv[k];
    }
  }
  const auto xi = x.id, gi = gamma.id, bi = beta.id;
  return x.graph->record(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g,
                                                                std::size_t self) {
        const auto& dy = g.grad(self);
        const auto& gs = g.value(gi);
        if (g.requires_grad(gi)) {
          auto& d = g.grad(gi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < c; ++k) d[k] += dy[r * c + k] * xhat[r * c + k];
        }
        if (g.requires_grad(bi)) {
          auto& d = g.grad(bi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < c; ++k) d[k] += dy[r * c + k];
        }
        if (g.requires_grad(xi)) {
          auto& d = g.grad(xi);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t k = 0; k < c; ++k) {
              const T dh = dy[r * c + k] * gs[k];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * c + k];
            }
            mean_dh /= static_cast<T>(c);
            mean_dh_h /= static_cast<T>(c);
            for (std::size_t k = 0; k < c; ++k) {
              const T dh = dy[r * c + k] * gs[k];
              d[r * c + k] +=
                  inv_std[r] * (dh - mean_dh - xhat[r * c + k] * mean_dh_h);
            }
          }
        }
      });
}

/// Per-row softmax cross-entropy against integer targets. Rows whose target
/// is negative are ignored (loss 0, no gradient).
template <typename T>
Var<T> cross_entropy_rows(Var<T> logits, std::span<const std::int32_t> targets) {
  const auto& lv = logits.value();
  const std::size_t c = lv.cols();
  const std::size_t rows = lv.rows();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) +
                     " targets for logits of shape " + shape_string(lv.shape()));
  }
  Array<T> out(detail::drop_last(lv.shape()));
  std::vector<T> probs(lv.size(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= c) {
      throw ShapeError("cross_entropy_rows: target " + std::to_string(targets[r]) +
                       " outside " + std::to_string(c) + " classes");
    }
    const T* row = lv.data() + r * c;
    T mx = row[0];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, row[k]);
    T z = T(0);
    for (std::size_t k = 0; k < c; ++k) {
      const T e = std::exp(row[k] - mx);
      probs[r * c + k] = e;
      z += e;
    }
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] /= z;
    out[r] = mx + std::log(z) - row[targets[r]];
  }
  const auto li = logits.id;
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return logits.graph->record(
      std::move(out), {logits},
      [=, probs = std::move(probs), tg = std::move(tg)](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad(self);
        auto& d = g.grad(li);
        for (std::size_t r = 0; r < rows; ++r) {
          if (tg[r] < 0 || dy[r] == T(0)) continue;
          for (std::size_t k = 0; k < c; ++k) d[r * c + k] += dy[r] * probs[r * c + k];
          d[r * c + tg[r]] -= dy[r];
        }
      });
}

/// Multi-head bidirectional self-attention over `batch` sequences of length
/// `seq`. `qkv` packs queries, keys and values as (batch*seq x 3*d). Keys whose
/// `key_mask` entry is 0 receive zero weight. If `probs_out` is given it
/// receives the (batch, heads, seq, seq) attention weights.
template <typename T>
Var<T> self_attention(Var<T> qkv, std::size_t batch, std::size_t seq,
                      std::size_t heads, std::span<const std::uint8_t> key_mask,
                      std::vector<T>* probs_out = nullptr) {
  const auto& xv = qkv.value();
  if (xv.cols() % 3 != 0 || xv.rows() != batch * seq ||
      key_mask.size() != batch * seq || heads == 0 || (xv.cols() / 3) % heads != 0) {
    throw ShapeError("self_attention: shape mismatch " + shape_string(xv.shape()) +
                     " for batch " + std::to_string(batch) + ", seq " +
                     std::to_string(seq) + ", heads " + std::to_string(heads));
  }
  const std::size_t d = xv.cols() / 3;
  const std::size_t dh = d / heads;
  const std::size_t stride = 3 * d;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  Array<T> out(Shape{batch * seq, d});
  std::vector<T> probs(batch * heads * seq * seq, T(0));
  std::vector<T> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* q = xv.data() + (b * seq + i) * stride + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (!key_mask[b * seq + j]) continue;
          const T* k = xv.data() + (b * seq + j) * stride + d + h * dh;
          T s = T(0);
          for (std::size_t e = 0; e < dh; ++e) s += q[e] * k[e];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < seq; ++j) {
          if (!key_mask[b * seq + j]) continue;
          const T e = std::exp(scores[j] - mx);
          P[i * seq + j] = e;
          z += e;
        }
        T* o = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!key_mask[b * seq + j]) continue;
          P[i * seq + j] /= z;
          const T p = P[i * seq + j];
          const T* v = xv.data() + (b * seq + j) * stride + 2 * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) o[e] += p * v[e];
        }
      }
    }
  }
  if (probs_out != nullptr) *probs_out = probs;
  const auto xi = qkv.id;
  return qkv.graph->record(
      std::move(out), {qkv},
      [=, probs = std::move(probs)](Graph<T>& g, std::size_t self) {
        const auto& dy = g.grad(self);
        const auto& x = g.value(xi);
        auto& dx = g.grad(xi);
        std::vector<T> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const T* dout = dy.data() + (b * seq + i) * d + h * dh;
              T dot = T(0);
              for (std::size_t j = 0; j < seq; ++j) {
                const T p = P[i * seq + j];
                if (p == T(0)) {
                  dp[j] = T(0);
                  continue;
                }
                const T* v = x.data() + (b * seq + j) * stride + 2 * d + h * dh;
                T* dv = dx.data() + (b * seq + j) * stride + 2 * d + h * dh;
                T acc = T(0);
                for (std::size_t e = 0; e < dh; ++e) {
                  acc += dout[e] * v[e];
                  dv[e] += p * dout[e];
                }
                dp[j] = acc;
                dot += p * acc;
              }
              const T* q = x.data() + (b * seq + i) * stride + h * dh;
              T* dq = dx.data() + (b * seq + i) * stride + h * dh;
              for (std::size_t j = 0; j < seq; ++j) {
                const T p = P[i * seq + j];
                if (p == T(0)) continue;
                const T ds = p * (dp[j] - dot) * inv_sqrt;
                const T* k = x.data() + (b * seq + j) * stride + d + h * dh;
                T* dk = dx.data() + (b * seq + j) * stride + d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) {
                  dq[e] += ds * k[e];
                  dk[e] += ds * q[e];
                }
              }
            }
          }
        }
      });
}

}  // namespace gqvae::nn
