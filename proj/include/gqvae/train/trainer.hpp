#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/core/log.hpp"
#include "gqvae/corpus/chunk.hpp"
#include "gqvae/losses/objective.hpp"
#include "gqvae/model/gqvae.hpp"
#include "gqvae/train/optimizer.hpp"

namespace gqvae::train {

using losses::LossBreakdown;

/// Text pieces and encoded rows that a run trains on.
struct PreparedCorpus {
  corpus::CharVocab vocab;
  std::vector<std::string> chunks;
  std::vector<std::vector<std::int32_t>> rows;
};

/// Pre-split, chunk and encode documents under the settings of `cfg`. The
/// vocabulary is built from the documents unless one is given.
inline PreparedCorpus prepare_corpus(const std::vector<std::string>& docs,
                                     const TrainConfig& cfg,
                                     const corpus::CharVocab* vocab = nullptr) {
  PreparedCorpus out;
  const auto mode = corpus::unit_mode_from_string(cfg.unit_mode);
  out.vocab = vocab ? *vocab : corpus::build_char_vocab(docs, mode, cfg.reserve_unknown);
  const corpus::PreSplitter splitter(cfg.pre_split_pattern);
  corpus::SplitOptions opts{cfg.s_max, mode, cfg.drop_whitespace};
  const auto policy =
      out.vocab.unk_id() ? corpus::UnknownPolicy::kSubstitute : corpus::UnknownPolicy::kStrict;
  for (const auto& doc : docs) {
    for (auto& c : corpus::split_into_chunks(doc, splitter, opts)) {
      out.rows.push_back(out.vocab.encode(std::u32string_view(corpus::to_units(c, mode)), policy));
      out.chunks.push_back(std::move(c));
    }
  }
  if (out.rows.empty()) throw IngestError("corpus produced no chunks");
  return out;
}

struct StepResult {
  std::uint64_t step = 0;  // 1-based index of the completed step
  LossBreakdown loss;
  double gate_mean = 0;
  double codebook_perplexity = 1;
  double grad_norm = 0;
  model::MaintenanceReport maintenance;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step}};
    j.update(loss.to_json());
    j["gate_mean"] = gate_mean;
    j["codebook_perplexity"] = codebook_perplexity;
    return j;
  }
};

/// Model, optimizer, random stream and batch position of one run.
template <typename T = float>
class Trainer {
 public:
  Trainer(TrainConfig cfg, corpus::CharVocab vocab, std::vector<std::vector<std::int32_t>> rows)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng init(derive_seed(cfg_.seed, 1));
    model_ = model::GqVae<T>(cfg_, std::move(vocab), init);
    optimizer_ = AdamW<T>(model_.params(), AdamWOptions{cfg_.lr, 0.9, 0.999, 1e-8,
                                                        cfg_.weight_decay});
    rng_ = Rng(derive_seed(cfg_.seed, 2));
    batcher_ = corpus::Batcher(std::move(rows), cfg_.batch_size, cfg_.s_max,
                               model_.vocab().pad_id(), derive_seed(cfg_.seed, 3));
  }

  /// Forward, backward, clipped optimizer update, then codebook upkeep.
  StepResult train_step(const corpus::Batch& batch) {
    StepResult r;
    const std::size_t step = static_cast<std::size_t>(step_);
    nn::Graph<T> g;
    model::ForwardOptions opts;
    opts.bypass = step < cfg_.warmup_steps;
    auto fp = model_.forward(g, batch, opts);
    losses::LossTerms<T> terms;
    try {
      terms = losses::gqvae_loss(fp, cfg_);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step_ + 1));
    }
    auto& store = model_.params();
    store.zero_grad();
    g.backward(terms.total);
    r.grad_norm = clip_grad_norm(store, cfg_.clip_norm);
    if (!std::isfinite(r.grad_norm)) {
      throw NumericError("non-finite gradient norm at step " + std::to_string(step_ + 1));
    }
    optimizer_.step(store);
    r.maintenance = model_.maintain_codebook(fp, step, rng_);
    if (!r.maintenance.resampled.empty()) {
      optimizer_.reset_rows(model_.codebook_param(), r.maintenance.resampled);
    }
    const auto& gv = fp.gates.value();
    double gsum = 0;
    for (std::size_t i = 0; i < gv.size(); ++i) gsum += fp.mask[i] ? double(gv[i]) : 0.0;
    r.gate_mean = gsum / double(fp.num_real());
    r.codebook_perplexity = model_.usage_perplexity();
    r.loss = terms.breakdown;
    ++step_;
    r.step = step_;
    best_loss_ = std::min(best_loss_, r.loss.total);
    return r;
  }

  StepResult step() { return train_step(batcher_.next()); }

  const TrainConfig& config() const { return cfg_; }
  /// Only run-length fields may change after construction.
  void set_total_steps(std::size_t n) { cfg_.total_steps = n; }
  model::GqVae<T>& model() { return model_; }
  const model::GqVae<T>& model() const { return model_; }
  AdamW<T>& optimizer() { return optimizer_; }
  const AdamW<T>& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  corpus::Batcher& batcher() { return batcher_; }
  const corpus::Batcher& batcher() const { return batcher_; }
  std::uint64_t steps_done() const { return step_; }
  void set_steps_done(std::uint64_t s) { step_ = s; }
  double best_loss() const { return best_loss_; }
  void set_best_loss(double v) { best_loss_ = v; }

 private:
  TrainConfig cfg_;
  model::GqVae<T> model_;
  AdamW<T> optimizer_;
  Rng rng_;
  corpus::Batcher batcher_;
  std::uint64_t step_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

}  // namespace gqvae::train
