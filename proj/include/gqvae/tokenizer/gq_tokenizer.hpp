#pragma once

#include <algorithm>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gqvae/corpus/chunk.hpp"
#include "gqvae/model/gqvae.hpp"
#include "gqvae/tokenizer/dictionary.hpp"
#include "gqvae/tokenizer/interface.hpp"

namespace gqvae::tokenizer {

/// Selection rule for one chunk: positions with gate > 0.5 (the last position
/// always counts) end a token; the token ending at t covers (p, t] where p is
/// the previous selected position, and carries the canonical id of index t.
template <typename G>
TokenizedText select_tokens(std::span<const G> gates, std::span<const std::int32_t> indices,
                            const TokenDictionary& dict) {
  TokenizedText out;
  const std::size_t n = gates.size();
  std::size_t start = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (gates[t] > G(0.5) || t + 1 == n) {
      out.push(dict.canonical_id(static_cast<std::size_t>(indices[t])), start, t + 1, false);
      start = t + 1;
    }
  }
  return out;
}

/// Replaces every token whose string differs from its source span by one
/// fallback id per unit of the span.
inline TokenizedText apply_fallback(const TokenizedText& tokens, std::u32string_view source,
                                    const TokenDictionary& dict) {
  TokenizedText out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto [b, e] = tokens.spans[i];
    const auto span = source.substr(b, e - b);
    if (dict.known(tokens.ids[i]) && dict.units(tokens.ids[i]) == span) {
      out.push(tokens.ids[i], b, e, tokens.fallback_flags[i] != 0);
      continue;
    }
    for (std::size_t p = b; p < e; ++p) {
      const auto id = dict.fallback_id(source[p]);
      if (!id) {
        throw TokenizerError("no fallback id for character " +
                             corpus::describe_unit(source[p], dict.mode()) + " at offset " +
                             std::to_string(p));
      }
      out.push(*id, p, p + 1, true);
    }
  }
  return out;
}

inline std::string detokenize(std::span<const std::int32_t> ids, const TokenDictionary& dict) {
  std::u32string units;
  for (auto id : ids) units += dict.units(id);
  return corpus::from_units(units, dict.mode());
}

/// GQ-VAE tokenizer: a frozen model plus its extracted dictionary. Chunks
/// are tokenized independently, so results for a chunk are cached; the cache
/// is guarded so concurrent calls are safe.
template <typename T = float>
class GqTokenizer : public Tokenizer {
 public:
  GqTokenizer(std::shared_ptr<const model::GqVae<T>> m, TokenDictionary dict,
              corpus::UnknownPolicy policy = corpus::UnknownPolicy::kStrict)
      : model_(std::move(m)),
        dict_(std::move(dict)),
        splitter_(model_->config().pre_split_pattern),
        policy_(policy) {
    if (dict_.codebook_size() != model_->config().codebook_size) {
      throw TokenizerError("dictionary covers " + std::to_string(dict_.codebook_size()) +
                           " codebook entries, model has " +
                           std::to_string(model_->config().codebook_size));
    }
  }

  const TokenDictionary& dictionary() const { return dict_; }
  const model::GqVae<T>& model() const { return *model_; }
  std::size_t inference_batch = 256;

  TokenizedText tokenize(std::string_view text, bool fallback) const override {
    return tokenize_all({std::string(text)}, fallback).front();
  }

  std::vector<TokenizedText> tokenize_all(const std::vector<std::string>& docs,
                                          bool fallback) const override {
    const auto mode = dict_.mode();
    const std::size_t s_max = model_->config().s_max;
    // Chunk every document, recording unit offsets.
    struct Piece {
      std::size_t doc, offset;
      std::u32string units;
    };
    std::vector<Piece> pieces;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      std::size_t offset = 0;
      for (const auto& piece : splitter_.split(docs[d])) {
        for (const auto& c : corpus::chunk_text(piece, s_max, mode)) {
          auto u = corpus::to_units(c, mode);
          const std::size_t n = u.size();
          if (policy_ == corpus::UnknownPolicy::kStrict) {
            for (std::size_t i = 0; i < n; ++i) {
              if (!model_->vocab().find(u[i])) throw corpus::UnknownCharError(u[i], offset + i, mode);
            }
          }
          pieces.push_back({d, offset, std::move(u)});
          offset += n;
        }
      }
    }
    std::lock_guard<std::mutex> lock(mutex_);
    run_model(pieces);
    std::vector<TokenizedText> out(docs.size());
    for (const auto& p : pieces) {
      const auto& r = cache_.at(p.units);
      auto tokens = select_tokens(std::span<const T>(r.gates), std::span<const std::int32_t>(r.indices),
                                  dict_);
      if (fallback) tokens = apply_fallback(tokens, p.units, dict_);
      out[p.doc].append(tokens, p.offset);
    }
    return out;
  }

  std::string detokenize(std::span<const std::int32_t> ids) const override {
    return tokenizer::detokenize(ids, dict_);
  }
  std::string token_string(std::int32_t id) const override { return dict_.text(id); }
  std::size_t id_space() const override { return dict_.id_space(); }
  corpus::UnitMode unit_mode() const override { return dict_.mode(); }
  std::string kind() const override {
    return model_->config().fixed_k ? "fixed-" + std::to_string(model_->config().fixed_k)
                                    : "gqvae";
  }
  nlohmann::json describe() const override {
    return {{"kind", kind()}, {"config", model_->config().to_json()}};
  }

 private:
  struct ChunkResult {
    std::vector<T> gates;
    std::vector<std::int32_t> indices;
  };

  template <typename Pieces>
  void run_model(const Pieces& pieces) const {
    std::vector<const std::u32string*> todo;
    for (const auto& p : pieces) {
      if (!cache_.count(p.units)) {
        cache_.emplace(p.units, ChunkResult{});
        todo.push_back(&cache_.find(p.units)->first);
      }
    }
    // Rows are computed independently of their batch neighbours and padding,
    // so grouping by length only saves work.
    std::stable_sort(todo.begin(), todo.end(),
                     [](const auto* a, const auto* b) { return a->size() < b->size(); });
    const auto& vocab = model_->vocab();
    for (std::size_t b = 0; b < todo.size(); b += inference_batch) {
      const std::size_t n = std::min(inference_batch, todo.size() - b);
      std::vector<std::vector<std::int32_t>> rows;
      for (std::size_t i = 0; i < n; ++i) rows.push_back(vocab.encode(*todo[b + i], policy_));
      const std::size_t s_max = todo[b + n - 1]->size();
      const auto batch = corpus::make_batch(rows, s_max, vocab.pad_id());
      const auto inf = model_->infer(batch);
      for (std::size_t i = 0; i < n; ++i) {
        auto& r = cache_.at(*todo[b + i]);
        const std::size_t len = rows[i].size();
        r.gates.assign(inf.gates.data() + i * s_max, inf.gates.data() + i * s_max + len);
        r.indices.assign(inf.indices.begin() + i * s_max, inf.indices.begin() + i * s_max + len);
      }
    }
  }

  std::shared_ptr<const model::GqVae<T>> model_;
  TokenDictionary dict_;
  corpus::PreSplitter splitter_;
  corpus::UnknownPolicy policy_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::u32string, ChunkResult> cache_;
};

}  // namespace gqvae::tokenizer
