#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gqvae/core/grad_check.hpp"
#include "gqvae/core/rng.hpp"
#include "gqvae/losses/losses.hpp"

using namespace gqvae;
using namespace gqvae::losses;
using nn::Array;
using nn::Graph;
using nn::Shape;
using nn::Var;

namespace {

Array<double> random_array(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Array<double> a(std::move(s));
  for (auto& v : a.storage()) v = lo + (hi - lo) * rng.uniform();
  return a;
}

std::vector<std::uint8_t> all_real(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

}  // namespace

TEST(Masks, AllOneGatesZeroHistory) {
  const auto m = compute_masks(std::vector<double>{1, 1, 1}, 3);
  for (const auto& row : m) EXPECT_EQ(row, (std::vector<double>{1, 0, 0}));
}

TEST(Masks, ZeroGatesBoundaryConvention) {
  const auto m = compute_masks(std::vector<double>{0, 0, 0}, 3);
  EXPECT_EQ(m[0], (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(m[1], (std::vector<double>{1, 1, 0}));
  EXPECT_EQ(m[2], (std::vector<double>{1, 1, 1}));
}

TEST(Masks, HalfGatesMultiply) {
  const auto m = compute_masks(std::vector<double>{0.5, 0.5, 0.9}, 3);
  EXPECT_EQ(m[2], (std::vector<double>{1, 0.5, 0.25}));
}

TEST(Reconstruction, OnlyFirstMaskIsCharacterCrossEntropy) {
  Rng rng(1);
  Graph<double> g;
  const std::size_t T = 3, w = 2, C = 4;
  auto logits = g.leaf(random_array({T, w, C}, rng), true);
  Array<double> m(Shape{1, T, w});
  for (std::size_t t = 0; t < T; ++t) m[t * w] = 1;
  const std::vector<std::int32_t> ids = {2, 0, 3};
  const auto mask = all_real(T);
  auto loss = reconstruction_loss(logits, std::span<const std::int32_t>(ids),
                                  std::span<const std::uint8_t>(mask), g.constant(m), 1, T);
  double expect = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = logits.value().data() + t * w * C;
    double z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c]);
    expect += std::log(z) - row[ids[t]];
  }
  EXPECT_NEAR(loss.value().item(), expect / T, 1e-12);
}

TEST(Reconstruction, PerfectLogitsGiveZero) {
  Graph<double> g;
  const std::size_t T = 3, w = 3, C = 3;
  const std::vector<std::int32_t> ids = {0, 1, 2};
  Array<double> logits(Shape{T, w, C});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i <= t && i < w; ++i) logits[(t * w + i) * C + ids[t - i]] = 100;
  }
  const auto mask = all_real(T);
  auto masks = compute_masks(g.constant(Array<double>(Shape{1, T}, {0, 0, 0})), w);
  auto loss = reconstruction_loss(g.constant(logits), std::span<const std::int32_t>(ids),
                                  std::span<const std::uint8_t>(mask), masks, 1, T);
  EXPECT_LT(loss.value().item(), 1e-40);
}

TEST(Reconstruction, HalfGateWeightsOnThreeCharChunk) {
  Graph<double> g;
  const std::size_t T = 3, w = 3, C = 2;
  const std::vector<std::int32_t> ids = {0, 1, 0};
  // Uniform logits: every active term contributes log 2.
  auto logits = g.constant(Array<double>(Shape{T, w, C}));
  auto gates = g.constant(Array<double>(Shape{1, T}, {0.5, 0.5, 1.0}));
  const auto mask = all_real(T);
  auto loss = reconstruction_loss(logits, std::span<const std::int32_t>(ids),
                                  std::span<const std::uint8_t>(mask),
                                  compute_masks(gates, w), 1, T);
  // position weights: t0 [1], t1 [1, .5], t2 [1, .5, .25]
  EXPECT_NEAR(loss.value().item(), (1 + 1.5 + 1.75) * std::log(2.0) / 3, 1e-12);
}

TEST(Compression, MeanOverRealPositions) {
  Graph<double> g;
  auto make = [&](std::vector<double> v) {
    const std::size_t n = v.size();
    return g.constant(Array<double>(Shape{1, n}, std::move(v)));
  };
  const auto mask = all_real(3);
  const std::span<const std::uint8_t> ms(mask);
  EXPECT_NEAR(compression_loss(make({0.5, 1, 0.25}), ms).value().item(), 0.58333333333, 1e-9);
  EXPECT_EQ(compression_loss(make({0, 0, 0}), ms).value().item(), 0.0);
  EXPECT_EQ(compression_loss(make({1, 1, 1}), ms).value().item(), 1.0);
  const std::vector<std::uint8_t> padded = {1, 1, 0};
  EXPECT_NEAR(compression_loss(make({0.5, 1, 0}), std::span<const std::uint8_t>(padded))
                  .value()
                  .item(),
              0.75, 1e-12);
}

TEST(PredictedMask, ConstantLogits) {
  Graph<double> g;
  auto m = predicted_mask(g.constant(Array<double>(Shape{1, 4}, {0.3, 0.3, 0.3, 0.3})));
  EXPECT_EQ(m.value().to_vector(), (std::vector<double>{1.0, 0.75, 0.5, 0.25}));
}

TEST(PredictedMask, DominantFirstEntryDecodesLengthOne) {
  Graph<double> g;
  auto m = predicted_mask(g.constant(Array<double>(Shape{1, 4}, {20, 0, 0, 0})));
  EXPECT_EQ(m.value()[0], 1.0);
  for (int i = 1; i < 4; ++i) EXPECT_LT(m.value()[i], 1e-7);
  EXPECT_EQ(decoded_length(m.value().values()), 1u);
}

TEST(PredictedMask, FirstEntryIsExactlyOneAndRowsNonincreasing) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Graph<float> g;
    Array<float> l(Shape{3, 7});
    for (auto& v : l.storage()) v = static_cast<float>(rng.normal() * 5);
    const auto m = predicted_mask(g.constant(l)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      EXPECT_EQ(m.at(r, 0), 1.0f);
      for (std::size_t i = 1; i < 7; ++i) EXPECT_LE(m.at(r, i), m.at(r, i - 1));
      EXPECT_GE(decoded_length(std::span<const float>(m.data() + r * 7, 7)), 1u);
    }
  }
}

TEST(LengthLoss, ZeroGatesOrMatchingMaskGiveZero) {
  Graph<double> g;
  Rng rng(3);
  auto m_hat = g.leaf(random_array({2, 3}, rng, 0, 1), true);
  auto masks = g.constant(random_array({1, 2, 3}, rng, 0, 1));
  const auto mask = all_real(2);
  const std::span<const std::uint8_t> ms(mask);
  auto zero_g = g.constant(Array<double>(Shape{1, 2}));
  EXPECT_EQ(length_loss(m_hat, masks, zero_g, ms).value().item(), 0.0);
  auto some_g = g.constant(Array<double>(Shape{1, 2}, {0.3, 0.9}));
  auto same = g.constant(m_hat.value());
  auto same_masks = g.constant(Array<double>(Shape{1, 2, 3}, m_hat.value().to_vector()));
  EXPECT_EQ(length_loss(same, same_masks, some_g, ms).value().item(), 0.0);
}

TEST(VqLosses, EqualInputsGiveZero) {
  Graph<double> g;
  auto z = g.leaf(Array<double>(Shape{2, 2}, {1, 2, 3, 4}), true);
  const auto mask = all_real(2);
  auto vq = vq_losses(z, g.constant(z.value()), std::span<const std::uint8_t>(mask));
  EXPECT_EQ(vq.codebook.value().item(), 0.0);
  EXPECT_EQ(vq.commitment.value().item(), 0.0);
}

TEST(VqLosses, StopGradientAlgebra) {
  for (bool swap : {false, true}) {
    const auto mask = all_real(1);
    const std::span<const std::uint8_t> ms(mask);
    auto grads = [&](bool codebook_term) {
      Graph<double> g;
      auto z = g.leaf(Array<double>(Shape{1, 2}, {1, 0}), true);
      auto zq = g.leaf(Array<double>(Shape{1, 2}, {0, 0}), true);
      auto vq = vq_losses(z, zq, ms, swap);
      auto term = codebook_term ? vq.codebook : vq.commitment;
      EXPECT_EQ(term.value().item(), 1.0);
      g.backward(term);
      return std::make_pair(z.grad().to_vector(), zq.grad().to_vector());
    };
    const auto [cde_z, cde_zq] = grads(true);
    const auto [cmt_z, cmt_zq] = grads(false);
    const std::vector<double> zero = {0, 0};
    if (!swap) {
      EXPECT_EQ(cde_z, (std::vector<double>{2, 0}));
      EXPECT_EQ(cde_zq, zero);
      EXPECT_EQ(cmt_z, zero);
      EXPECT_EQ(cmt_zq, (std::vector<double>{-2, 0}));
    } else {
      EXPECT_EQ(cde_z, zero);
      EXPECT_EQ(cmt_zq, zero);
    }
  }
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_EQ(total_loss(1, 1, 1, 1, 1, {1, 1, 1}).total, 5.0);
  const auto b = total_loss(2, 3, 5, 7, 11, {0, 0, 0});
  EXPECT_EQ(b.total, 9.0);
  const LossWeights w{0.05, 0.25, 1.0};
  const auto c = total_loss(0.3, 0.7, 0.2, 0.1, 0.4, w);
  EXPECT_DOUBLE_EQ(c.total, c.recon + w.gamma * c.length + w.alpha * c.compression +
                                c.codebook + w.beta * c.commitment);
}

TEST(TotalLoss, NonFinitePartNamesComponent) {
  try {
    total_loss(1, 1, std::nan(""), 1, 1, {});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("length"), std::string::npos);
  }
}

TEST(LossGradients, EveryTermPassesFiniteDifferences) {
  Rng rng(11);
  const std::size_t B = 2, T = 3, w = 3, C = 4, d = 2;
  const std::vector<std::int32_t> ids = {0, 3, 1, 2, 2, 1};
  const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 0};
  const std::span<const std::uint8_t> ms(mask);
  const std::span<const std::int32_t> is(ids);
  const auto gates = random_array({B, T}, rng, 0.05, 0.95);
  const auto logits = random_array({B * T, w, C}, rng);
  using F = std::function<Var<double>(Graph<double>&, Var<double>)>;
  const F masks_fn = [&](Graph<double>&, Var<double> x) {
    return nn::sum(nn::square(compute_masks(x, w)));
  };
  EXPECT_LT(nn::grad_check(masks_fn, gates, 1e-5), 1e-6);
  const F recon_g = [&](Graph<double>& g, Var<double> x) {
    return reconstruction_loss(g.constant(logits), is, ms, compute_masks(x, w), B, T);
  };
  EXPECT_LT(nn::grad_check(recon_g, gates, 1e-5), 1e-6);
  const F recon_l = [&](Graph<double>& g, Var<double> x) {
    return reconstruction_loss(x, is, ms, compute_masks(g.constant(gates), w), B, T);
  };
  EXPECT_LT(nn::grad_check(recon_l, logits, 1e-5), 1e-6);
  const F pm = [&](Graph<double>&, Var<double> x) {
    return nn::sum(nn::square(predicted_mask(x)));
  };
  EXPECT_LT(nn::grad_check(pm, random_array({B * T, w}, rng), 1e-5), 1e-6);
}
