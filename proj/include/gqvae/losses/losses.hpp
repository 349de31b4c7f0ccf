#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/core/graph.hpp"
#include "gqvae/core/ops.hpp"

namespace gqvae::losses {

using nn::Array;
using nn::Graph;
using nn::Shape;
using nn::Var;
using nn::require_same_shape;

template <typename Mask>
std::size_t count_real(const Mask& mask, std::size_t expected, const char* op) {
  if (mask.size() != expected) {
    throw ShapeError(std::string(op) + ": mask covers " + std::to_string(mask.size()) +
                     " positions, expected " + std::to_string(expected));
  }
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  if (n == 0) throw ShapeError(std::string(op) + ": no real positions");
  return n;
}

/// Reconstruction masks from gates g (B x T): out (B x T x w) with
///   m[t][0] = 1,  m[t][i] = prod_{j=1..i} (1 - g[t-j]) for i <= t,  0 for i > t.
template <typename T>
Var<T> compute_masks(Var<T> g, std::size_t w) {
  const auto& gv = g.value();
  if (gv.rank() != 2 || w == 0) {
    throw ShapeError("compute_masks: gates must be (B x T), got " + shape_string(gv.shape()));
  }
  const std::size_t B = gv.shape()[0];
  const std::size_t L = gv.shape()[1];
  Array<T> out(Shape{B, L, w});
  for (std::size_t b = 0; b < B; ++b) {
    const T* gr = gv.data() + b * L;
    for (std::size_t t = 0; t < L; ++t) {
      T* m = out.data() + (b * L + t) * w;
      m[0] = T(1);
      for (std::size_t i = 1; i < w && i <= t; ++i) m[i] = m[i - 1] * (T(1) - gr[t - i]);
    }
  }
  const auto gi = g.id;
  return g.graph->record(std::move(out), {g}, [=](Graph<T>& graph, std::size_t self) {
    const auto& dm = graph.grad(self);
    const auto& gval = graph.value(gi);
    auto& dg = graph.grad(gi);
    for (std::size_t b = 0; b < B; ++b) {
      const T* gr = gval.data() + b * L;
      T* dgr = dg.data() + b * L;
      for (std::size_t t = 0; t < L; ++t) {
        const T* dmr = dm.data() + (b * L + t) * w;
        const std::size_t top = std::min(w - 1, t);
        // d m[i] / d g[t-j] = -prod_{k=1..i, k!=j} (1 - g[t-k]) for j <= i.
        T before = T(1);
        for (std::size_t j = 1; j <= top; ++j) {
          T after = T(1);
          T acc = T(0);
          for (std::size_t i = j; i <= top; ++i) {
            if (i > j) after *= T(1) - gr[t - i];
            acc += dmr[i] * before * after;
          }
          dgr[t - j] -= acc;
          before *= T(1) - gr[t - j];
        }
      }
    }
  });
}

/// Value-only form of compute_masks for a single gate row.
template <typename T>
std::vector<std::vector<T>> compute_masks(const std::vector<T>& g, std::size_t w) {
  Graph<T> graph;
  graph.set_grad_enabled(false);
  const auto m = compute_masks(graph.constant(Array<T>(Shape{1, g.size()}, g)), w).value();
  std::vector<std::vector<T>> rows(g.size(), std::vector<T>(w));
  for (std::size_t t = 0; t < g.size(); ++t) {
    for (std::size_t i = 0; i < w; ++i) rows[t][i] = m[t * w + i];
  }
  return rows;
}

/// Masked character cross-entropy. `char_logits` is (B*T x w x C); index i of
/// position t predicts ids[t-i]. Normalised by the number of real positions.
template <typename T>
Var<T> reconstruction_loss(Var<T> char_logits, std::span<const std::int32_t> ids,
                           std::span<const std::uint8_t> mask, Var<T> masks,
                           std::size_t batch, std::size_t seq) {
  const auto& lv = char_logits.value();
  if (lv.rank() != 3 || lv.shape()[0] != batch * seq || ids.size() != batch * seq ||
      mask.size() != batch * seq) {
    throw ShapeError("reconstruction_loss: logits " + shape_string(lv.shape()) +
                     " vs batch " + std::to_string(batch) + " x " + std::to_string(seq));
  }
  const std::size_t w = lv.shape()[1];
  const std::size_t C = lv.shape()[2];
  require_same_shape(masks.shape(), Shape{batch, seq, w}, "reconstruction_loss masks");
  std::vector<std::int32_t> targets(batch * seq * w, -1);
  std::size_t npos = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      if (!mask[b * seq + t]) continue;
      ++npos;
      for (std::size_t i = 0; i < w && i <= t; ++i) {
        targets[(b * seq + t) * w + i] = ids[b * seq + t - i];
      }
    }
  }
  if (npos == 0) throw ShapeError("reconstruction_loss: batch has no real positions");
  Var<T> ce = nn::cross_entropy_rows(nn::reshape(char_logits, Shape{batch * seq * w, C}),
                                     std::span<const std::int32_t>(targets));
  Var<T> weighted = nn::mul(ce, nn::reshape(masks, Shape{batch * seq * w}));
  return nn::scale(nn::sum(weighted), T(1) / T(npos));
}

/// Mean gate over real positions (pad gates are zero).
template <typename T>
Var<T> compression_loss(Var<T> g, std::span<const std::uint8_t> mask) {
  const std::size_t npos = count_real(mask, g.value().size(), "compression_loss");
  Array<T> m(g.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] ? T(1) : T(0);
  return nn::scale(nn::sum(nn::mul_const(g, m)), T(1) / T(npos));
}

/// Length proxy from length logits (N x w): e = exp(l - min l), reverse
/// cumulative sum, divided by the row maximum. Row entry 0 is exactly 1 and
/// rows are nonincreasing.
template <typename T>
Var<T> predicted_mask(Var<T> length_logits) {
  Var<T> e = nn::exp(nn::sub_col(length_logits, nn::row_min(length_logits)));
  Var<T> s = nn::cumsum_rows(e, true);
  return nn::div_col(s, nn::row_max(s));
}

/// Token length read from a predicted-mask row: entries above 0.5.
template <typename T>
std::size_t decoded_length(std::span<const T> m_hat_row) {
  std::size_t n = 0;
  for (T v : m_hat_row) n += v > T(0.5) ? 1 : 0;
  return n;
}

/// sum_t sg(g_t) * mean_i (m_hat[t][i] - sg(m[t][i]))^2 over real positions,
/// normalised by their count. Only `m_hat` receives gradient.
template <typename T>
Var<T> length_loss(Var<T> m_hat, Var<T> masks, Var<T> g, std::span<const std::uint8_t> mask) {
  const auto& mv = m_hat.value();
  const std::size_t n = mv.rows();
  const std::size_t w = mv.cols();
  if (masks.value().size() != n * w || g.value().size() != n) {
    throw ShapeError("length_loss: m_hat " + shape_string(mv.shape()) + " vs masks " +
                     shape_string(masks.shape()) + " and gates " + shape_string(g.shape()));
  }
  const std::size_t npos = count_real(mask, n, "length_loss");
  Var<T> target = nn::stop_gradient(nn::reshape(masks, Shape{n, w}));
  Var<T> mse = nn::mean_cols(nn::square(nn::sub(m_hat, target)));
  Array<T> weight(Shape{n});
  const auto& gv = g.value();
  for (std::size_t i = 0; i < n; ++i) weight[i] = mask[i] ? gv[i] : T(0);
  weight = g.graph->detach(std::move(weight));
  return nn::scale(nn::sum(nn::mul_const(mse, weight)), T(1) / T(npos));
}

template <typename T>
struct VqLosses {
  Var<T> codebook;
  Var<T> commitment;
};

/// Codebook and commitment terms over real rows of z and its quantisation zq.
/// Default placement: codebook = |sg(zq) - z|^2 (moves z),
/// commitment = |zq - sg(z)|^2 (moves zq). `swap` exchanges the placement.
template <typename T>
VqLosses<T> vq_losses(Var<T> z, Var<T> zq, std::span<const std::uint8_t> mask,
                      bool swap = false) {
  require_same_shape(z.shape(), zq.shape(), "vq_losses");
  const std::size_t n = z.value().rows();
  const std::size_t npos = count_real(mask, n, "vq_losses");
  Array<T> m(Shape{n});
  for (std::size_t i = 0; i < n; ++i) m[i] = mask[i] ? T(1) : T(0);
  auto sq = [&](Var<T> a, Var<T> b) {
    Var<T> per_row = nn::sum_cols(nn::square(nn::sub(a, b)));
    return nn::scale(nn::sum(nn::mul_const(per_row, m)), T(1) / T(npos));
  };
  Var<T> moves_z = sq(nn::stop_gradient(zq), z);
  Var<T> moves_zq = sq(zq, nn::stop_gradient(z));
  if (swap) return {moves_zq, moves_z};
  return {moves_z, moves_zq};
}

struct LossWeights {
  double alpha = 0.05;
  double beta = 0.25;
  double gamma = 1.0;
};

struct LossBreakdown {
  double recon = 0;
  double compression = 0;
  double length = 0;
  double codebook = 0;
  double commitment = 0;
  double total = 0;

  nlohmann::json to_json() const {
    return {{"recon", recon},       {"cmp", compression}, {"len", length},
            {"cde", codebook},      {"cmt", commitment},  {"total", total}};
  }
};

/// total = recon + gamma*length + alpha*compression + codebook + beta*commitment.
inline LossBreakdown total_loss(double recon, double compression, double length,
                                double codebook, double commitment, const LossWeights& w) {
  const std::pair<const char*, double> parts[] = {{"reconstruction", recon},
                                                  {"compression", compression},
                                                  {"length", length},
                                                  {"codebook", codebook},
                                                  {"commitment", commitment}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite ") + name + " loss (" + std::to_string(v) + ")");
    }
  }
  LossBreakdown b{recon, compression, length, codebook, commitment, 0};
  b.total = recon + w.gamma * length + w.alpha * compression + codebook + w.beta * commitment;
  return b;
}

template <typename T>
struct LossTerms {
  Var<T> recon, compression, length, codebook, commitment, total;
  LossBreakdown breakdown;
};

/// Weighted sum of already-built terms, with the matching value breakdown.
template <typename T>
LossTerms<T> combine(Var<T> recon, Var<T> compression, Var<T> length, VqLosses<T> vq,
                     const LossWeights& w) {
  LossTerms<T> out{recon, compression, length, vq.codebook, vq.commitment, {}, {}};
  out.breakdown = total_loss(recon.value().item(), compression.value().item(),
                             length.value().item(), vq.codebook.value().item(),
                             vq.commitment.value().item(), w);
  Var<T> total = nn::add(recon, nn::scale(length, T(w.gamma)));
  total = nn::add(total, nn::scale(compression, T(w.alpha)));
  total = nn::add(total, vq.codebook);
  out.total = nn::add(total, nn::scale(vq.commitment, T(w.beta)));
  return out;
}

}  // namespace gqvae::losses
