#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/core/log.hpp"
#include "gqvae/corpus/pre_split.hpp"
#include "gqvae/corpus/vocab.hpp"
#include "gqvae/losses/losses.hpp"
#include "gqvae/model/gqvae.hpp"

namespace gqvae::tokenizer {

using corpus::UnitMode;

/// Static mapping from codebook entries to strings plus per-character
/// fallback ids. The canonical id of a string is the lowest codebook index
/// decoding to it; characters that are not already a one-unit token string
/// get fallback ids from |V| upward.
class TokenDictionary {
 public:
  TokenDictionary() = default;

  /// `entries[k]` is the decoded units of codebook entry k (empty when the
  /// entry is unused); `vocab` supplies the fallback alphabet.
  TokenDictionary(const std::vector<std::u32string>& entries, const corpus::CharVocab& vocab,
                  std::size_t max_token_len, std::string pretokenizer_regex)
      : mode_(vocab.mode()),
        max_len_(max_token_len),
        regex_(std::move(pretokenizer_regex)),
        codebook_ids_(entries.size(), -1) {
    for (std::size_t k = 0; k < entries.size(); ++k) {
      if (entries[k].empty()) continue;
      auto [it, inserted] = by_string_.try_emplace(entries[k], static_cast<std::int32_t>(k));
      codebook_ids_[k] = it->second;
      if (inserted) set_string(static_cast<std::int32_t>(k), entries[k]);
    }
    std::int32_t next = static_cast<std::int32_t>(entries.size());
    for (char32_t u : vocab.units()) {
      const std::u32string s(1, u);
      auto it = by_string_.find(s);
      if (it != by_string_.end()) {
        fallback_[u] = it->second;
      } else {
        by_string_.emplace(s, next);
        set_string(next, s);
        fallback_[u] = next++;
      }
    }
  }

  /// Rebuilds from stored parts (canonical ids preserved).
  static TokenDictionary from_parts(std::map<std::u32string, std::int32_t> vocab,
                                    std::map<char32_t, std::int32_t> fallback,
                                    std::vector<std::int32_t> codebook_ids, UnitMode mode,
                                    std::size_t max_token_len, std::string regex) {
    TokenDictionary d;
    d.mode_ = mode;
    d.max_len_ = max_token_len;
    d.regex_ = std::move(regex);
    d.codebook_ids_ = std::move(codebook_ids);
    for (const auto& [s, id] : vocab) {
      if (id < 0) throw TokenizerError("negative token id " + std::to_string(id));
      if (d.id_space() > static_cast<std::size_t>(id) && !d.strings_[id].empty()) {
        throw TokenizerError("token id " + std::to_string(id) + " is assigned twice");
      }
      d.set_string(id, s);
    }
    d.by_string_ = std::move(vocab);
    for (const auto& [u, id] : fallback) {
      if (!d.known(id)) {
        throw TokenizerError("fallback id " + std::to_string(id) + " is not in the vocabulary");
      }
    }
    d.fallback_ = std::move(fallback);
    for (auto id : d.codebook_ids_) {
      if (id >= 0 && !d.known(id)) {
        throw TokenizerError("codebook id " + std::to_string(id) + " is not in the vocabulary");
      }
    }
    return d;
  }

  UnitMode mode() const { return mode_; }
  std::size_t max_token_len() const { return max_len_; }
  const std::string& pretokenizer_regex() const { return regex_; }
  /// Canonical id per codebook index (-1 when unused).
  const std::vector<std::int32_t>& codebook_ids() const { return codebook_ids_; }
  std::size_t codebook_size() const { return codebook_ids_.size(); }
  std::int32_t canonical_id(std::size_t codebook_index) const {
    if (codebook_index >= codebook_ids_.size() || codebook_ids_[codebook_index] < 0) {
      throw TokenizerError("codebook index " + std::to_string(codebook_index) +
                           " has no dictionary entry");
    }
    return codebook_ids_[codebook_index];
  }

  bool known(std::int32_t id) const {
    return id >= 0 && static_cast<std::size_t>(id) < strings_.size() && !strings_[id].empty();
  }
  const std::u32string& units(std::int32_t id) const {
    if (!known(id)) throw TokenizerError("unknown token id " + std::to_string(id));
    return strings_[id];
  }
  std::string text(std::int32_t id) const { return corpus::from_units(units(id), mode_); }
  std::size_t id_space() const { return strings_.size(); }
  /// Distinct token strings (including fallback-only characters).
  std::size_t num_strings() const { return by_string_.size(); }
  /// Distinct strings decoded from the codebook.
  std::size_t num_unique_codebook_strings() const {
    std::vector<std::int32_t> ids;
    for (auto id : codebook_ids_) {
      if (id >= 0) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    return static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  }
  const std::map<std::u32string, std::int32_t>& vocab() const { return by_string_; }
  const std::map<char32_t, std::int32_t>& fallback_ids() const { return fallback_; }
  std::optional<std::int32_t> fallback_id(char32_t unit) const {
    auto it = fallback_.find(unit);
    if (it == fallback_.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const TokenDictionary& a, const TokenDictionary& b) {
    return a.mode_ == b.mode_ && a.max_len_ == b.max_len_ && a.regex_ == b.regex_ &&
           a.codebook_ids_ == b.codebook_ids_ && a.by_string_ == b.by_string_ &&
           a.fallback_ == b.fallback_;
  }

 private:
  void set_string(std::int32_t id, const std::u32string& s) {
    if (strings_.size() <= static_cast<std::size_t>(id)) strings_.resize(id + 1);
    strings_[id] = s;
  }

  UnitMode mode_ = UnitMode::kChar;
  std::size_t max_len_ = 0;
  std::string regex_;
  std::vector<std::int32_t> codebook_ids_;
  std::vector<std::u32string> strings_;  // by id; empty = unassigned
  std::map<std::u32string, std::int32_t> by_string_;
  std::map<char32_t, std::int32_t> fallback_;
};

/// Token string from one decoder output: L counts predicted-mask entries
/// above 0.5 (clamped to [1, w]); row i of `char_logits` (w x |C|) predicts
/// the unit i places before the token end, so rows L-1 .. 0 read left to
/// right. A special id at row i > 0 truncates the string to rows i-1 .. 0;
/// row 0 always takes the best non-special unit. `truncated` counts cuts.
template <typename T>
std::u32string decode_token_string(std::span<const T> char_logits, std::span<const T> m_hat,
                                   const corpus::CharVocab& vocab, std::size_t* truncated = nullptr) {
  const std::size_t w = m_hat.size();
  const std::size_t C = vocab.size();
  if (w == 0 || char_logits.size() != w * C) {
    throw ShapeError("decode_token_string: " + std::to_string(char_logits.size()) +
                     " logits for w=" + std::to_string(w) + " and |C|=" + std::to_string(C));
  }
  const std::size_t L = std::clamp<std::size_t>(losses::decoded_length(m_hat), 1, w);
  std::u32string s;
  for (std::size_t i = L; i-- > 0;) {
    const T* row = char_logits.data() + i * C;
    std::size_t best = C;
    for (std::size_t c = 0; c < C; ++c) {
      if (i == 0 && vocab.is_special(static_cast<std::int32_t>(c))) continue;
      if (best == C || row[c] > row[best]) best = c;
    }
    if (vocab.is_special(static_cast<std::int32_t>(best))) {
      s.clear();
      if (truncated) ++*truncated;
      continue;
    }
    s.push_back(*vocab.unit(static_cast<std::int32_t>(best)));
  }
  return s;
}

/// Decodes every codebook vector into its token string.
template <typename T>
TokenDictionary extract_dictionary(const model::GqVae<T>& m) {
  const auto& cfg = m.config();
  const auto& vocab = m.vocab();
  const std::size_t V = cfg.codebook_size;
  const std::size_t w = cfg.w;
  const std::size_t C = vocab.size();
  const auto out = m.decode(m.codebook_vectors());
  nn::Graph<T> g;
  g.set_grad_enabled(false);
  const auto m_hat = losses::predicted_mask(g.constant(out.length_logits)).value();
  std::vector<std::u32string> entries(V);
  std::size_t truncated = 0;
  for (std::size_t k = 0; k < V; ++k) {
    entries[k] = decode_token_string(
        std::span<const T>(out.char_logits.data() + k * w * C, w * C),
        std::span<const T>(m_hat.data() + k * w, w), vocab, &truncated);
  }
  if (truncated > 0) {
    log::debug("dictionary: " + std::to_string(truncated) +
               " special-character predictions truncated token strings");
  }
  return TokenDictionary(entries, vocab, w, cfg.pre_split_pattern);
}

// ------------------------------------------------------------- file format

namespace detail {

inline std::string json_key(const std::u32string& units) { return corpus::utf8_encode(units); }

inline std::u32string from_key(const std::string& key, const std::string& path) {
  try {
    return corpus::utf8_decode(key);
  } catch (const std::exception& e) {
    throw TokenizerError(path + ": key is not valid UTF-8");
  }
}

inline const nlohmann::json& field(const nlohmann::json& j, const std::string& name,
                                   const std::string& path) {
  if (!j.contains(name)) throw TokenizerError("tokenizer file: missing " + path + "/" + name);
  return j.at(name);
}

}  // namespace detail

/// Word-level tokenizer document. Byte-mode units are stored as the code
/// points of the same value.
inline nlohmann::json tokenizer_json(const TokenDictionary& d,
                                     const std::optional<std::string>& checkpoint = std::nullopt) {
  nlohmann::json vocab = nlohmann::json::object();
  std::map<std::int32_t, std::u32string> seen;
  for (std::int32_t id = 0; static_cast<std::size_t>(id) < d.id_space(); ++id) {
    if (!d.known(id)) continue;
    const auto key = detail::json_key(d.units(id));
    if (vocab.contains(key)) {
      throw TokenizerError("duplicate vocabulary string '" + key + "' for ids " +
                           std::to_string(vocab[key].get<std::int32_t>()) + " and " +
                           std::to_string(id));
    }
    vocab[key] = id;
  }
  nlohmann::json fallback = nlohmann::json::object();
  for (const auto& [u, id] : d.fallback_ids()) {
    fallback[detail::json_key(std::u32string(1, u))] = id;
  }
  nlohmann::json j = {{"version", 1},
                      {"model_type", "wordlevel"},
                      {"vocab", vocab},
                      {"pretokenizer_regex", d.pretokenizer_regex()},
                      {"fallback_chars", fallback},
                      {"max_token_len", d.max_token_len()},
                      {"unit_mode", corpus::to_string(d.mode())},
                      {"codebook_ids", d.codebook_ids()}};
  if (checkpoint) j["checkpoint"] = *checkpoint;
  return j;
}

inline TokenDictionary tokenizer_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw TokenizerError("tokenizer file: / is not an object");
  const auto& version = detail::field(j, "version", "");
  if (!version.is_number_integer() || version.get<int>() != 1) {
    throw TokenizerError("tokenizer file: /version must be 1");
  }
  const auto& type = detail::field(j, "model_type", "");
  if (type != "wordlevel") {
    throw TokenizerError("tokenizer file: /model_type is " + type.dump() + ", expected \"wordlevel\"");
  }
  const auto mode = corpus::unit_mode_from_string(j.value("unit_mode", std::string("char")));
  std::map<std::u32string, std::int32_t> vocab;
  const auto& v = detail::field(j, "vocab", "");
  if (!v.is_object()) throw TokenizerError("tokenizer file: /vocab is not an object");
  for (const auto& [key, id] : v.items()) {
    if (!id.is_number_integer()) {
      throw TokenizerError("tokenizer file: /vocab/" + key + " is not an integer");
    }
    vocab.emplace(detail::from_key(key, "/vocab"), id.get<std::int32_t>());
  }
  std::map<char32_t, std::int32_t> fallback;
  const auto& f = detail::field(j, "fallback_chars", "");
  if (!f.is_object()) throw TokenizerError("tokenizer file: /fallback_chars is not an object");
  for (const auto& [key, id] : f.items()) {
    const auto u = detail::from_key(key, "/fallback_chars");
    if (u.size() != 1 || !id.is_number_integer()) {
      throw TokenizerError("tokenizer file: /fallback_chars/" + key + " is malformed");
    }
    fallback.emplace(u[0], id.get<std::int32_t>());
  }
  const auto& regex = detail::field(j, "pretokenizer_regex", "");
  const auto& max_len = detail::field(j, "max_token_len", "");
  if (!regex.is_string()) throw TokenizerError("tokenizer file: /pretokenizer_regex is not a string");
  if (!max_len.is_number_unsigned()) {
    throw TokenizerError("tokenizer file: /max_token_len is not a positive integer");
  }
  std::vector<std::int32_t> codebook_ids;
  if (j.contains("codebook_ids")) {
    try {
      codebook_ids = j.at("codebook_ids").get<std::vector<std::int32_t>>();
    } catch (const nlohmann::json::exception&) {
      throw TokenizerError("tokenizer file: /codebook_ids is not an integer array");
    }
  }
  return TokenDictionary::from_parts(std::move(vocab), std::move(fallback),
                                     std::move(codebook_ids), mode, max_len.get<std::size_t>(),
                                     regex.get<std::string>());
}

inline void export_tokenizer(const TokenDictionary& d, const std::filesystem::path& path,
                             const std::optional<std::string>& checkpoint = std::nullopt) {
  const auto j = tokenizer_json(d, checkpoint);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write tokenizer '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing tokenizer '" + path.string() + "'");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw TokenizerError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline TokenDictionary load_tokenizer(const std::filesystem::path& path) {
  return tokenizer_from_json(read_json_file(path));
}

}  // namespace gqvae::tokenizer
