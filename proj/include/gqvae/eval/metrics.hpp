#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gqvae/core/error.hpp"
#include "gqvae/corpus/vocab.hpp"
#include "gqvae/tokenizer/interface.hpp"

namespace gqvae::eval {

/// One token per unit, ids taken from a character vocabulary.
class CharTokenizer : public tokenizer::Tokenizer {
 public:
  explicit CharTokenizer(corpus::CharVocab vocab) : vocab_(std::move(vocab)) {}

  tokenizer::TokenizedText tokenize(std::string_view text, bool) const override {
    tokenizer::TokenizedText out;
    const auto ids = vocab_.encode(text);
    for (std::size_t i = 0; i < ids.size(); ++i) out.push(ids[i], i, i + 1, false);
    return out;
  }
  std::string detokenize(std::span<const std::int32_t> ids) const override {
    std::string out;
    for (auto id : ids) out += token_string(id);
    return out;
  }
  std::string token_string(std::int32_t id) const override {
    const auto u = vocab_.unit(id);
    if (!u) throw TokenizerError("unknown character token id " + std::to_string(id));
    std::string s;
    corpus::append_unit(s, *u, vocab_.mode());
    return s;
  }
  std::size_t id_space() const override { return vocab_.num_units(); }
  corpus::UnitMode unit_mode() const override { return vocab_.mode(); }
  std::string kind() const override { return "char"; }
  nlohmann::json describe() const override { return {{"kind", "char"}, {"units", vocab_.num_units()}}; }

 private:
  corpus::CharVocab vocab_;
};

/// Counts gathered from both tokenizations of a corpus.
struct CorpusStats {
  std::size_t units = 0;
  std::size_t tokens_no_fallback = 0;
  std::size_t tokens_with_fallback = 0;
  std::size_t fallback_tokens = 0;
  std::size_t correct_units = 0;  // units covered by exactly reconstructed tokens
  std::size_t used_no_fallback = 0;
  std::size_t used_with_fallback = 0;
};

namespace detail {

inline void require_units(std::size_t units) {
  if (units == 0) throw MetricError("metric undefined on an empty corpus");
}

/// Source units covered by tokens whose string equals their span.
inline std::size_t correct_units(const tokenizer::Tokenizer& tok, const std::u32string& source,
                                 const tokenizer::TokenizedText& t) {
  std::size_t n = 0;
  const auto mode = tok.unit_mode();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto [b, e] = t.spans[i];
    std::string token;
    try {
      token = tok.token_string(t.ids[i]);
    } catch (const TokenizerError&) {
      continue;
    }
    if (token == corpus::from_units(std::u32string_view(source).substr(b, e - b), mode)) n += e - b;
  }
  return n;
}

}  // namespace detail

inline CorpusStats corpus_stats(const std::vector<std::string>& docs, const tokenizer::Tokenizer& tok) {
  CorpusStats s;
  const auto plain = tok.tokenize_all(docs, false);
  const auto fb = tok.tokenize_all(docs, true);
  std::set<std::int32_t> used_plain, used_fb;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const auto source = corpus::to_units(docs[d], tok.unit_mode());
    s.units += source.size();
    s.tokens_no_fallback += plain[d].size();
    s.tokens_with_fallback += fb[d].size();
    s.correct_units += detail::correct_units(tok, source, plain[d]);
    used_plain.insert(plain[d].ids.begin(), plain[d].ids.end());
    used_fb.insert(fb[d].ids.begin(), fb[d].ids.end());
    for (auto f : fb[d].fallback_flags) s.fallback_tokens += f;
  }
  s.used_no_fallback = used_plain.size();
  s.used_with_fallback = used_fb.size();
  return s;
}

/// Source units per emitted token.
inline double bytes_per_token(const std::vector<std::string>& docs, const tokenizer::Tokenizer& tok,
                              bool fallback) {
  std::size_t units = 0, tokens = 0;
  const auto all = tok.tokenize_all(docs, fallback);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    units += tok.unit_count(docs[d]);
    tokens += all[d].size();
  }
  detail::require_units(units);
  return double(units) / double(tokens);
}

inline double bits_per_byte(double bytes_per_token, std::size_t used_vocab) {
  if (used_vocab < 2) {
    throw MetricError("bits/byte needs a used vocabulary of at least 2, got " + std::to_string(used_vocab));
  }
  if (!(bytes_per_token > 0)) throw MetricError("bits/byte needs positive bytes/token");
  return std::log2(double(used_vocab)) / bytes_per_token;
}

/// Fraction of source units covered by a no-fallback token whose string
/// equals its span.
inline double reconstruction_accuracy(const std::vector<std::string>& docs,
                                      const tokenizer::Tokenizer& tok) {
  std::size_t units = 0, correct = 0;
  const auto all = tok.tokenize_all(docs, false);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const auto source = corpus::to_units(docs[d], tok.unit_mode());
    units += source.size();
    correct += detail::correct_units(tok, source, all[d]);
  }
  detail::require_units(units);
  return double(correct) / double(units);
}

using Histogram = std::vector<std::pair<std::string, std::size_t>>;

/// Token string counts, descending, ties by byte-wise string order.
/// `top_n` = 0 keeps every row.
inline Histogram token_histogram(const std::vector<std::string>& docs, const tokenizer::Tokenizer& tok,
                                 std::size_t top_n, bool fallback = true) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tok.tokenize_all(docs, fallback)) {
    for (auto id : t.ids) ++counts[tok.token_string(id)];
  }
  Histogram rows(counts.begin(), counts.end());
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (top_n > 0 && rows.size() > top_n) rows.resize(top_n);
  return rows;
}

/// RFC 4180 field, always quoted.
inline std::string csv_field(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline void write_histogram_csv(std::ostream& out, const Histogram& rows) {
  out << "rank,token,count\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << i + 1 << ',' << csv_field(rows[i].first) << ',' << rows[i].second << '\n';
  }
}

}  // namespace gqvae::eval
