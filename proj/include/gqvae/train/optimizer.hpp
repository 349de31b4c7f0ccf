#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "gqvae/core/graph.hpp"

namespace gqvae::train {

using nn::Array;
using nn::ParameterStore;

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm) {
  double sq = 0;
  for (const auto& p : store) {
    for (T g : p.grad.values()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : store) {
      for (auto& g : p.grad.storage()) g *= s;
    }
  }
  return norm;
}

struct AdamWOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay on parameters flagged `decay`.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParameterStore<T>& store, AdamWOptions opts) : opts_(opts) {
    for (const auto& p : store) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  void step(ParameterStore<T>& store) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, double(t_));
    const double lr = opts_.lr;
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[i];
      auto& m = m_[i];
      auto& v = v_[i];
      const double decay = p.decay ? 1.0 - lr * opts_.weight_decay : 1.0;
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k];
        const double mk = opts_.beta1 * m[k] + (1 - opts_.beta1) * g;
        const double vk = opts_.beta2 * v[k] + (1 - opts_.beta2) * g * g;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = (mk / c1) / (std::sqrt(vk / c2) + opts_.eps);
        p.value[k] = static_cast<T>(double(p.value[k]) * decay - lr * update);
      }
    }
  }

  /// Zeroes both moments of the given rows of parameter `param`.
  void reset_rows(std::size_t param, std::span<const std::size_t> rows) {
    auto& m = m_[param];
    auto& v = v_[param];
    const std::size_t c = m.cols();
    for (std::size_t r : rows) {
      std::fill_n(m.data() + r * c, c, T(0));
      std::fill_n(v.data() + r * c, c, T(0));
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  const AdamWOptions& options() const { return opts_; }
  std::vector<Array<T>>& first_moments() { return m_; }
  std::vector<Array<T>>& second_moments() { return v_; }
  const std::vector<Array<T>>& first_moments() const { return m_; }
  const std::vector<Array<T>>& second_moments() const { return v_; }

 private:
  AdamWOptions opts_;
  std::vector<Array<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace gqvae::train
