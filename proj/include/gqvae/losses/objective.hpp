#pragma once

#include "gqvae/losses/losses.hpp"
#include "gqvae/model/gqvae.hpp"

namespace gqvae::losses {

/// All loss terms of one forward pass.
template <typename T>
LossTerms<T> gqvae_loss(const model::ForwardPass<T>& fp, const TrainConfig& cfg) {
  const std::span<const std::uint8_t> mask(fp.mask);
  Var<T> masks = compute_masks(fp.gates, cfg.w);
  Var<T> recon = reconstruction_loss(fp.char_logits, std::span<const std::int32_t>(fp.ids),
                                     mask, masks, fp.batch, fp.seq);
  Var<T> cmp = compression_loss(fp.gates, mask);
  Var<T> len = length_loss(predicted_mask(fp.length_logits), masks, fp.gates, mask);
  VqLosses<T> vq = vq_losses(fp.z, fp.zq, mask, cfg.swap_vq_convention);
  // Fixed-gate runs carry zero compression weight.
  const LossWeights w{cfg.fixed_k > 0 ? 0.0 : cfg.alpha, cfg.beta, cfg.gamma};
  return combine(recon, cmp, len, vq, w);
}

}  // namespace gqvae::losses
