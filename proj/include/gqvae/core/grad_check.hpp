#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "gqvae/core/graph.hpp"

namespace gqvae::nn {

template <typename T>
struct GradCheckResult {
  T max_rel_error = T(0);
  T max_abs_error = T(0);
  std::size_t worst_index = 0;
  Array<T> analytic;
  Array<T> numeric;
};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences (f(x+eps e_i) - f(x-eps e_i)) / 2 eps, coordinate by
/// coordinate. The relative error of a coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
/// coordinates with (near-)zero gradient from dividing by roundoff.
///
/// Detached quantities (see Graph::detach) are taped on the analytic pass and
/// replayed on every probe, so they stay fixed at their values at x.
///
/// `f` builds the function on the given graph from the leaf holding x.
template <typename T>
GradCheckResult<T> grad_check_detailed(
    const std::function<Var<T>(Graph<T>&, Var<T>)>& f, const Array<T>& x, T eps,
    T floor = T(1)) {
  if (!(eps > T(0))) throw ConfigError("grad_check: eps must be positive");
  GradCheckResult<T> res;
  std::vector<Array<T>> tape;
  {
    Graph<T> g;
    g.record_detached(&tape);
    Var<T> leaf = g.leaf(x, true);
    Var<T> y = f(g, leaf);
    if (y.value().size() != 1) {
      throw ShapeError("grad_check: function must be scalar, got " +
                       shape_string(y.shape()));
    }
    if (!std::isfinite(y.value()[0])) {
      throw NumericError("grad_check: f(x) is not finite");
    }
    g.backward(y);
    res.analytic = g.has_grad(leaf.id) ? g.grad(leaf.id) : Array<T>(x.shape());
  }
  auto eval = [&](const Array<T>& point) {
    Graph<T> g;
    g.set_grad_enabled(false);
    g.replay_detached(&tape);
    Var<T> leaf = g.leaf(point, false);
    return f(g, leaf).value()[0];
  };
  res.numeric = Array<T>(x.shape());
  Array<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const T up = eval(probe);
    probe[i] = x[i] - eps;
    const T down = eval(probe);
    probe[i] = x[i];
    const T num = (up - down) / (T(2) * eps);
    res.numeric[i] = num;
    const T a = res.analytic[i];
    const T abs_err = std::abs(a - num);
    const T rel = abs_err / std::max({std::abs(a), std::abs(num), floor});
    res.max_abs_error = std::max(res.max_abs_error, abs_err);
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
    }
  }
  return res;
}

template <typename T>
T grad_check(const std::function<Var<T>(Graph<T>&, Var<T>)>& f, const Array<T>& x,
             T eps, T floor = T(1)) {
  return grad_check_detailed(f, x, eps, floor).max_rel_error;
}

}  // namespace gqvae::nn
