#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "gqvae/core/error.hpp"
#include "gqvae/core/rng.hpp"
#include "gqvae/corpus/pre_split.hpp"
#include "gqvae/corpus/vocab.hpp"

namespace gqvae::corpus {

struct Chunk {
  std::vector<std::int32_t> char_ids;
  std::string source_text;
};

/// Greedy left-to-right split of a piece into runs of at most `s_max` units.
inline std::vector<std::string> chunk_text(std::string_view piece, std::size_t s_max,
                                           UnitMode mode = UnitMode::kChar) {
  if (s_max == 0) throw ConfigError("chunk length must be at least 1");
  const std::u32string units = to_units(piece, mode);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < units.size(); i += s_max) {
    const std::size_t n = std::min(s_max, units.size() - i);
    out.push_back(from_units(std::u32string_view(units).substr(i, n), mode));
  }
  return out;
}

inline Chunk make_chunk(std::string text, const CharVocab& vocab,
                        UnknownPolicy policy = UnknownPolicy::kStrict) {
  Chunk c;
  c.char_ids = vocab.encode(std::u32string_view(to_units(text, vocab.mode())), policy);
  c.source_text = std::move(text);
  return c;
}

/// chunk_text followed by encoding through the vocabulary.
inline std::vector<Chunk> chunk(std::string_view piece, std::size_t s_max,
                                const CharVocab& vocab,
                                UnknownPolicy policy = UnknownPolicy::kStrict) {
  std::vector<Chunk> out;
  for (auto& t : chunk_text(piece, s_max, vocab.mode())) {
    out.push_back(make_chunk(std::move(t), vocab, policy));
  }
  return out;
}

struct SplitOptions {
  std::size_t s_max = 16;
  UnitMode mode = UnitMode::kChar;
  bool drop_whitespace = false;
};

/// Pre-split then chunk: the text pieces the model sees, in order.
inline std::vector<std::string> split_into_chunks(std::string_view text,
                                                  const PreSplitter& splitter,
                                                  const SplitOptions& opts) {
  std::vector<std::string> out;
  for (const auto& piece : splitter.split(text)) {
    if (opts.drop_whitespace && is_whitespace_only(piece)) continue;
    for (auto& c : chunk_text(piece, opts.s_max, opts.mode)) out.push_back(std::move(c));
  }
  return out;
}

/// B x S_max id matrix with right padding.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t s_max = 0;
  std::vector<std::int32_t> ids;      // batch_size * s_max
  std::vector<std::uint8_t> pad_mask;  // 1 = real character
  std::vector<std::size_t> lengths;

  std::size_t max_length() const {
    return lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
  }
  std::size_t num_real() const {
    return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  }
  std::int32_t id(std::size_t b, std::size_t t) const { return ids[b * s_max + t]; }
  bool real(std::size_t b, std::size_t t) const { return pad_mask[b * s_max + t] != 0; }
};

inline Batch make_batch(std::span<const std::vector<std::int32_t>> rows, std::size_t s_max,
                        std::int32_t pad_id) {
  Batch b;
  b.batch_size = rows.size();
  b.s_max = s_max;
  b.ids.assign(rows.size() * s_max, pad_id);
  b.pad_mask.assign(rows.size() * s_max, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.empty()) throw ShapeError("batch row " + std::to_string(r) + " is empty");
    if (row.size() > s_max) {
      throw ShapeError("sequence of length " + std::to_string(row.size()) +
                       " exceeds S_max " + std::to_string(s_max));
    }
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (row[t] == pad_id) throw ShapeError("pad id inside batch row " + std::to_string(r));
      b.ids[r * s_max + t] = row[t];
      b.pad_mask[r * s_max + t] = 1;
    }
    b.lengths.push_back(row.size());
  }
  return b;
}

/// Epoch-based batch iterator. Each epoch visits every chunk exactly once in
/// an order fixed by (seed, epoch), so the position (epoch, cursor) is the
/// whole iterator state.
class Batcher {
 public:
  Batcher() = default;
  Batcher(std::vector<std::vector<std::int32_t>> rows, std::size_t batch_size,
          std::size_t s_max, std::int32_t pad_id, std::uint64_t seed, bool shuffle = true)
      : rows_(std::move(rows)),
        batch_size_(batch_size),
        s_max_(s_max),
        pad_id_(pad_id),
        seed_(seed),
        shuffle_(shuffle) {
    if (batch_size_ == 0) throw ConfigError("batch_size must be at least 1");
    if (rows_.empty()) throw IngestError("no chunks to batch");
    reorder();
  }

  Batch next() {
    if (cursor_ >= order_.size()) {
      ++epoch_;
      cursor_ = 0;
      reorder();
    }
    const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
    std::vector<std::vector<std::int32_t>> picked;
    picked.reserve(n);
    for (std::size_t i = 0; i < n; ++i) picked.push_back(rows_[order_[cursor_ + i]]);
    cursor_ += n;
    return make_batch(picked, s_max_, pad_id_);
  }

  /// All batches of the current epoch from the current position.
  std::vector<Batch> rest_of_epoch() {
    std::vector<Batch> out;
    const std::uint64_t e = epoch_;
    while (cursor_ < order_.size() && epoch_ == e) out.push_back(next());
    return out;
  }

  std::uint64_t epoch() const { return epoch_; }
  std::size_t cursor() const { return cursor_; }
  void seek(std::uint64_t epoch, std::size_t cursor) {
    epoch_ = epoch;
    reorder();
    cursor_ = std::min(cursor, order_.size());
  }
  std::size_t num_rows() const { return rows_.size(); }

 private:
  void reorder() {
    order_.resize(rows_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!shuffle_) return;
    Rng rng(derive_seed(seed_, 1000 + epoch_));
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[rng.below(i)]);
    }
  }

  std::vector<std::vector<std::int32_t>> rows_;
  std::size_t batch_size_ = 1;
  std::size_t s_max_ = 16;
  std::int32_t pad_id_ = 0;
  std::uint64_t seed_ = 0;
  bool shuffle_ = true;
  std::vector<std::size_t> order_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
};

/// One pass over `chunks` in batches (shuffled by `seed` when given).
inline std::vector<Batch> batch(const std::vector<Chunk>& chunks, std::size_t batch_size,
                                const CharVocab& vocab, std::size_t s_max,
                                std::optional<std::uint64_t> seed = std::nullopt) {
  std::vector<std::vector<std::int32_t>> rows;
  rows.reserve(chunks.size());
  for (const auto& c : chunks) {
    for (auto id : c.char_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab.size() || id == vocab.pad_id()) {
        throw ShapeError("chunk '" + c.source_text + "' holds id " + std::to_string(id) +
                         " that is not a character of the vocabulary");
      }
    }
    rows.push_back(c.char_ids);
  }
  if (rows.empty()) return {};
  Batcher b(std::move(rows), batch_size, s_max, vocab.pad_id(), seed.value_or(0),
            seed.has_value());
  return b.rest_of_epoch();
}

}  // namespace gqvae::corpus
