#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gqvae/baselines/fixed_gates.hpp"
#include "gqvae/core/error.hpp"
#include "gqvae/core/log.hpp"
#include "gqvae/corpus/chunk.hpp"
#include "gqvae/corpus/vocab.hpp"
#include "gqvae/model/config.hpp"
#include "gqvae/model/layers.hpp"

namespace gqvae::model {

using corpus::Batch;

/// Quantizer state beyond the vectors themselves (which live in the
/// parameter store so the optimizer updates them).
template <typename T>
struct Codebook {
  std::size_t vectors = 0;  // parameter index, |V| x d
  std::vector<double> usage;
  Array<T> cache;  // capacity x d ring buffer
  std::size_t cache_size = 0;
  std::size_t cache_head = 0;
  bool initialized = false;
};

template <typename T>
struct LatentSequence {
  Array<T> z;      // N x d
  Array<T> z_bar;  // N x d, rows of the codebook
  std::vector<std::int32_t> indices;
};

template <typename T>
struct DecoderOutput {
  Array<T> char_logits;    // N x w x |C|
  Array<T> length_logits;  // N x w
};

struct ForwardOptions {
  /// Decoder and gater read z instead of z_bar.
  bool bypass = false;
  /// Replaces nearest-neighbour search (one index per batch position).
  std::optional<std::vector<std::int32_t>> frozen_indices;
  /// Keeps all S_max positions instead of trimming to the longest row.
  bool full_length = false;
};

/// Graph nodes of one forward pass over a batch trimmed to `seq` positions.
template <typename T>
struct ForwardPass {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;  // batch*seq
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> lengths;
  std::vector<std::int32_t> indices;
  Var<T> z, zq, z_bar, gates, char_logits, length_logits;
  std::size_t num_real() const {
    return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  }
};

struct MaintenanceReport {
  bool initialized_from_cache = false;
  bool resample_skipped = false;
  std::vector<std::size_t> resampled;
};

template <typename T>
class GqVae {
 public:
  GqVae() = default;

  GqVae(TrainConfig config, corpus::CharVocab vocab, Rng& rng)
      : config_(std::move(config)), vocab_(std::move(vocab)) {
    config_.validate();
    const std::size_t d = config_.d;
    const std::size_t k = config_.decoder_width();
    const std::size_t w = config_.w;
    char_embedding_ = store_.add("encoder.char_embedding",
                                 normal_array<T>({vocab_.size(), d}, 1.0, rng), false);
    encoder_ = TransformerStack<T>::create(store_, "encoder", d, config_.s_max,
                                           config_.enc_layers, config_.enc_heads,
                                           config_.ffn_mult, rng);
    encoder_out_ = Linear<T>::create(store_, "encoder.out", d, d, rng);
    codebook_.vectors = store_.add(
        "quantizer.codebook",
        normal_array<T>({config_.codebook_size, d}, 1.0 / std::sqrt(double(d)), rng), false);
    codebook_.usage.assign(config_.codebook_size, 0.0);
    codebook_.cache = Array<T>(Shape{std::max<std::size_t>(config_.cache_capacity, 1), d});
    codebook_.initialized = config_.warmup_steps == 0;
    if (config_.fixed_k == 0) {
      gater_ = TransformerStack<T>::create(store_, "gater", d, config_.s_max,
                                           config_.gater_layers, config_.gater_heads,
                                           config_.ffn_mult, rng);
      gater_out_ = Linear<T>::create(store_, "gater.out", d, 1, rng);
    }
    decoder_in_ = Linear<T>::create(store_, "decoder.in", d, d, rng);
    decoder_expand_ = Linear<T>::create(store_, "decoder.expand", d, w * k, rng);
    decoder_chars_ = Linear<T>::create(store_, "decoder.chars", k, vocab_.size(), rng);
    decoder_length_ = Linear<T>::create(store_, "decoder.length", d, w, rng);
  }

  const TrainConfig& config() const { return config_; }
  const corpus::CharVocab& vocab() const { return vocab_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  Codebook<T>& codebook() { return codebook_; }
  const Codebook<T>& codebook() const { return codebook_; }
  const Array<T>& codebook_vectors() const { return store_[codebook_.vectors].value; }
  std::size_t codebook_param() const { return codebook_.vectors; }

  // ------------------------------------------------------------ graph API

  ForwardPass<T> forward(Graph<T>& g, const Batch& batch, const ForwardOptions& opts = {}) {
    return forward_impl(g, store_, batch, opts);
  }

  Var<T> encode(Graph<T>& g, ParameterStore<T>& store, std::span<const std::int32_t> ids,
                std::span<const std::uint8_t> mask, std::size_t batch, std::size_t seq) const {
    Var<T> x = nn::embedding(g.param(store, char_embedding_), ids);
    x = encoder_(g, store, x, batch, seq, mask);
    return encoder_out_(g, store, x);
  }

  /// Gate logits through a sigmoid, zeroed on pads. Shape (batch x seq).
  Var<T> gate(Graph<T>& g, ParameterStore<T>& store, Var<T> z_bar,
              std::span<const std::uint8_t> mask, std::size_t batch, std::size_t seq) const {
    if (config_.fixed_k > 0) return g.constant(fixed_gate_array(mask, batch, seq));
    Var<T> h = gater_(g, store, z_bar, batch, seq, mask);
    h = nn::sigmoid(nn::reshape(gater_out_(g, store, h), Shape{batch, seq}));
    Array<T> m(Shape{batch, seq});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] ? T(1) : T(0);
    if (!config_.force_final_gate) return nn::mul_const(h, m);
    Array<T> last(Shape{batch, seq});
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t len = 0;
      while (len < seq && mask[b * seq + len]) ++len;
      if (len > 0) {
        m[b * seq + len - 1] = T(0);
        last[b * seq + len - 1] = T(1);
      }
    }
    return nn::add(nn::mul_const(h, m), g.constant(std::move(last)));
  }

  /// Per-row decoder: each latent alone determines its outputs.
  std::pair<Var<T>, Var<T>> decode(Graph<T>& g, ParameterStore<T>& store, Var<T> z_bar) const {
    const std::size_t n = z_bar.value().rows();
    const std::size_t k = config_.decoder_width();
    const std::size_t w = config_.w;
    Var<T> h = nn::gelu(decoder_in_(g, store, z_bar));
    Var<T> blocks = nn::gelu(decoder_expand_(g, store, h));
    blocks = nn::reshape(blocks, Shape{n * w, k});
    Var<T> chars = nn::reshape(decoder_chars_(g, store, blocks), Shape{n, w, vocab_.size()});
    Var<T> length = decoder_length_(g, store, h);
    return {chars, length};
  }

  // ------------------------------------------------------------ value API

  /// Encoder outputs over all S_max positions, shape (B x S_max x d).
  Array<T> encode(const Batch& batch) const {
    check_batch(batch);
    Graph<T> g;
    g.set_grad_enabled(false);
    Var<T> z = encode(g, mut_store(), batch.ids, batch.pad_mask, batch.batch_size, batch.s_max);
    Array<T> out = z.value();
    out.reshape(Shape{batch.batch_size, batch.s_max, config_.d});
    return out;
  }

  /// Nearest codebook entry per row of `z` (N x d); ties go to the lowest index.
  std::vector<std::int32_t> nearest(const Array<T>& z) const {
    return nearest_indices(z, codebook_vectors());
  }

  LatentSequence<T> quantize(const Array<T>& z) const {
    LatentSequence<T> out;
    out.z = z;
    out.z.reshape(Shape{z.rows(), z.cols()});
    out.indices = nearest(out.z);
    out.z_bar = lookup(out.indices);
    return out;
  }

  Array<T> lookup(std::span<const std::int32_t> indices) const {
    const auto& cb = codebook_vectors();
    const std::size_t d = cb.cols();
    Array<T> out(Shape{indices.size(), d});
    for (std::size_t r = 0; r < indices.size(); ++r) {
      std::copy_n(cb.data() + static_cast<std::size_t>(indices[r]) * d, d, out.data() + r * d);
    }
    return out;
  }

  /// Gates for (batch*seq x d) latents; returns (batch x seq).
  Array<T> gate(const Array<T>& z_bar, std::span<const std::uint8_t> mask, std::size_t batch,
                std::size_t seq) const {
    Graph<T> g;
    g.set_grad_enabled(false);
    Array<T> zb = z_bar;
    zb.reshape(Shape{batch * seq, config_.d});
    return gate(g, mut_store(), g.constant(std::move(zb)), mask, batch, seq).value();
  }

  DecoderOutput<T> decode(const Array<T>& z_bar) const {
    Graph<T> g;
    g.set_grad_enabled(false);
    Array<T> zb = z_bar;
    zb.reshape(Shape{z_bar.size() / config_.d, config_.d});
    auto [chars, length] = decode(g, mut_store(), g.constant(std::move(zb)));
    return DecoderOutput<T>{chars.value(), length.value()};
  }

  /// Indices and gates for every position of a batch (inference path).
  struct Inference {
    std::vector<std::int32_t> indices;  // B*S_max
    Array<T> gates;                     // B x S_max
  };

  Inference infer(const Batch& batch) const {
    check_batch(batch);
    Graph<T> g;
    g.set_grad_enabled(false);
    Var<T> z = encode(g, mut_store(), batch.ids, batch.pad_mask, batch.batch_size, batch.s_max);
    Inference out;
    out.indices = nearest(z.value());
    Var<T> zq = g.constant(lookup(out.indices));
    out.gates = gate(g, mut_store(), zq, batch.pad_mask, batch.batch_size, batch.s_max).value();
    return out;
  }

  // ------------------------------------------------------- codebook upkeep

  /// Usage EMA, cache refresh, data-dependent initialisation and dead-entry
  /// resampling for the optimizer step `step` (0-based). The caller resets
  /// optimizer moments of the rows listed in the report.
  MaintenanceReport maintain_codebook(const ForwardPass<T>& fp, std::size_t step, Rng& rng) {
    MaintenanceReport report;
    const Array<T>& z = fp.z.value();
    const std::size_t d = config_.d;
    auto& cb = codebook_;
    auto& vectors = store_[cb.vectors].value;

    std::vector<double> counts(cb.usage.size(), 0.0);
    std::vector<std::size_t> real_rows;
    for (std::size_t r = 0; r < fp.mask.size(); ++r) {
      if (!fp.mask[r]) continue;
      counts[static_cast<std::size_t>(fp.indices[r])] += 1.0;
      real_rows.push_back(r);
    }
    const double decay = config_.usage_decay;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      cb.usage[k] = decay * cb.usage[k] + (1.0 - decay) * counts[k];
    }

    if (config_.cache_capacity > 0 && !real_rows.empty()) {
      const std::size_t take = std::min(config_.cache_per_step, real_rows.size());
      for (std::size_t i = 0; i < take; ++i) {
        std::swap(real_rows[i], real_rows[i + rng.below(real_rows.size() - i)]);
        std::copy_n(z.data() + real_rows[i] * d, d, cb.cache.data() + cb.cache_head * d);
        cb.cache_head = (cb.cache_head + 1) % config_.cache_capacity;
        cb.cache_size = std::min(cb.cache_size + 1, config_.cache_capacity);
      }
    }

    if (!cb.initialized && cb.cache_size > 0 &&
        (cb.cache_size == config_.cache_capacity || step + 1 >= config_.warmup_steps)) {
      for (std::size_t k = 0; k < config_.codebook_size; ++k) {
        copy_cache_row(rng.below(cb.cache_size), vectors.data() + k * d);
        report.resampled.push_back(k);
      }
      cb.initialized = true;
      report.initialized_from_cache = true;
    }

    if (step >= config_.warmup_steps && config_.resample_interval > 0 &&
        (step + 1) % config_.resample_interval == 0) {
      std::vector<std::size_t> dead;
      for (std::size_t k = 0; k < cb.usage.size(); ++k) {
        if (cb.usage[k] < config_.dead_code_threshold) dead.push_back(k);
      }
      if (!dead.empty() && cb.cache_size == 0) {
        log::warn("codebook resampling skipped: cache is empty");
        report.resample_skipped = true;
      } else if (!dead.empty()) {
        const double mean =
            std::accumulate(cb.usage.begin(), cb.usage.end(), 0.0) / double(cb.usage.size());
        const double reset = std::max(config_.dead_code_threshold, mean);
        for (std::size_t k : dead) {
          copy_cache_row(rng.below(cb.cache_size), vectors.data() + k * d);
          cb.usage[k] = reset;
          if (!report.initialized_from_cache) report.resampled.push_back(k);
        }
      }
    }
    return report;
  }

  /// exp(entropy) of the normalised usage; 1 when nothing has been used.
  double usage_perplexity() const {
    const double total = std::accumulate(codebook_.usage.begin(), codebook_.usage.end(), 0.0);
    if (total <= 0) return 1.0;
    double h = 0;
    for (double u : codebook_.usage) {
      if (u > 0) {
        const double p = u / total;
        h -= p * std::log(p);
      }
    }
    return std::exp(h);
  }

  std::size_t num_parameters() const { return store_.num_values(); }

 private:
  ParameterStore<T>& mut_store() const { return const_cast<ParameterStore<T>&>(store_); }

  void check_batch(const Batch& batch) const {
    if (batch.s_max > config_.s_max) {
      throw ShapeError("batch sequence length " + std::to_string(batch.s_max) +
                       " exceeds S_max " + std::to_string(config_.s_max));
    }
  }

  void copy_cache_row(std::size_t row, T* dst) const {
    std::copy_n(codebook_.cache.data() + row * config_.d, config_.d, dst);
  }

  Array<T> fixed_gate_array(std::span<const std::uint8_t> mask, std::size_t batch,
                            std::size_t seq) const {
    Array<T> out(Shape{batch, seq});
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t len = 0;
      while (len < seq && mask[b * seq + len]) ++len;
      const auto g = baselines::fixed_gates<T>(len, config_.fixed_k);
      std::copy(g.begin(), g.end(), out.data() + b * seq);
    }
    return out;
  }

  static std::vector<std::int32_t> detach_indices(Graph<T>& g, std::vector<std::int32_t> idx) {
    Array<T> a(Shape{idx.size()});
    for (std::size_t i = 0; i < idx.size(); ++i) a[i] = static_cast<T>(idx[i]);
    a = g.detach(std::move(a));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int32_t>(a[i]);
    return idx;
  }

  static std::vector<std::int32_t> nearest_indices(const Array<T>& z, const Array<T>& cb) {
    if (cb.rows() == 0) throw ConfigError("quantize: codebook is empty");
    if (z.cols() != cb.cols()) {
      throw ShapeError("quantize: latent shape " + shape_string(z.shape()) +
                       " vs codebook " + shape_string(cb.shape()));
    }
    const auto zm = z.matrix();
    const auto cm = cb.matrix();
    std::vector<std::int32_t> out(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const auto dist = (cm.rowwise() - zm.row(r)).rowwise().squaredNorm().eval();
      std::size_t best = 0;
      for (Eigen::Index k = 1; k < dist.size(); ++k) {
        if (dist[k] < dist[best]) best = static_cast<std::size_t>(k);
      }
      out[r] = static_cast<std::int32_t>(best);
    }
    return out;
  }

  ForwardPass<T> forward_impl(Graph<T>& g, ParameterStore<T>& store, const Batch& batch,
                              const ForwardOptions& opts) const {
    check_batch(batch);
    ForwardPass<T> fp;
    fp.batch = batch.batch_size;
    fp.seq = opts.full_length ? batch.s_max : batch.max_length();
    fp.lengths = batch.lengths;
    fp.ids.resize(fp.batch * fp.seq);
    fp.mask.resize(fp.batch * fp.seq);
    for (std::size_t b = 0; b < fp.batch; ++b) {
      for (std::size_t t = 0; t < fp.seq; ++t) {
        fp.ids[b * fp.seq + t] = batch.id(b, t);
        fp.mask[b * fp.seq + t] = batch.real(b, t) ? 1 : 0;
      }
    }
    fp.z = encode(g, store, fp.ids, fp.mask, fp.batch, fp.seq);
    if (opts.frozen_indices) {
      if (opts.frozen_indices->size() != fp.ids.size()) {
        throw ShapeError("frozen indices cover " + std::to_string(opts.frozen_indices->size()) +
                         " positions, forward pass has " + std::to_string(fp.ids.size()));
      }
      fp.indices = *opts.frozen_indices;
    } else {
      fp.indices = nearest_indices(fp.z.value(), store[codebook_.vectors].value);
    }
    fp.indices = detach_indices(g, std::move(fp.indices));
    fp.zq = nn::embedding(g.param(store, codebook_.vectors),
                          std::span<const std::int32_t>(fp.indices));
    fp.z_bar = opts.bypass ? fp.z : nn::straight_through(fp.z, fp.zq);
    fp.gates = gate(g, store, fp.z_bar, fp.mask, fp.batch, fp.seq);
    std::tie(fp.char_logits, fp.length_logits) = decode(g, store, fp.z_bar);
    return fp;
  }

  TrainConfig config_;
  corpus::CharVocab vocab_;
  ParameterStore<T> store_;
  std::size_t char_embedding_ = 0;
  TransformerStack<T> encoder_;
  Linear<T> encoder_out_;
  Codebook<T> codebook_;
  TransformerStack<T> gater_;
  Linear<T> gater_out_;
  Linear<T> decoder_in_;
  Linear<T> decoder_expand_;
  Linear<T> decoder_chars_;
  Linear<T> decoder_length_;
};

}  // namespace gqvae::model
