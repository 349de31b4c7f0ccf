#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/corpus/unicode.hpp"

namespace gqvae::tokenizer {

/// Token ids with the source unit range each one covers.
struct TokenizedText {
  std::vector<std::int32_t> ids;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // [start, end) unit offsets
  std::vector<std::uint8_t> fallback_flags;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }

  void push(std::int32_t id, std::size_t start, std::size_t end, bool fallback) {
    ids.push_back(id);
    spans.emplace_back(start, end);
    fallback_flags.push_back(fallback ? 1 : 0);
  }

  /// Appends `other`, shifting its spans by `offset`.
  void append(const TokenizedText& other, std::size_t offset) {
    for (std::size_t i = 0; i < other.size(); ++i) {
      push(other.ids[i], other.spans[i].first + offset, other.spans[i].second + offset,
           other.fallback_flags[i] != 0);
    }
  }
};

/// Common surface of every tokenizer the evaluation harness compares.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  /// `fallback` requests the lossless variant; tokenizers that are always
  /// lossless ignore it.
  virtual TokenizedText tokenize(std::string_view text, bool fallback) const = 0;
  virtual std::string detokenize(std::span<const std::int32_t> ids) const = 0;
  /// Text of one token id; throws TokenizerError for unknown ids.
  virtual std::string token_string(std::int32_t id) const = 0;
  /// One past the largest id the tokenizer can emit.
  virtual std::size_t id_space() const = 0;
  virtual corpus::UnitMode unit_mode() const = 0;
  /// Number of units of `text` as the tokenizer counts them.
  std::size_t unit_count(std::string_view text) const { return corpus::unit_count(text, unit_mode()); }
  virtual std::string kind() const = 0;
  virtual nlohmann::json describe() const = 0;

  /// Tokenizes each document and concatenates the results.
  virtual std::vector<TokenizedText> tokenize_all(const std::vector<std::string>& docs,
                                                  bool fallback) const {
    std::vector<TokenizedText> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.push_back(tokenize(d, fallback));
    return out;
  }
};

}  // namespace gqvae::tokenizer
