#pragma once

#include <vector>

#include "gqvae/core/error.hpp"

namespace gqvae::baselines {

/// Gates of the fixed-length baseline: 1 every k positions and at the last one.
template <typename T = float>
std::vector<T> fixed_gates(std::size_t length, std::size_t k) {
  if (k == 0) throw ConfigError("fixed gate period k must be >= 1");
  std::vector<T> g(length, T(0));
  for (std::size_t t = k - 1; t < length; t += k) g[t] = T(1);
  if (length > 0) g[length - 1] = T(1);
  return g;
}

}  // namespace gqvae::baselines
