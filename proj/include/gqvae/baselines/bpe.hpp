#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/corpus/pre_split.hpp"
#include "gqvae/corpus/unicode.hpp"
#include "gqvae/corpus/vocab.hpp"
#include "gqvae/tokenizer/dictionary.hpp"
#include "gqvae/tokenizer/interface.hpp"

namespace gqvae::baselines {

/// Trained BPE model. Ids 0 .. |base|-1 are the base units in code-point
/// order; each merge either introduces the next id or, when its result
/// string already exists, reuses that id.
struct BpeModel {
  struct Merge {
    std::int32_t left, right, result;
    std::int64_t count = 0;  // weighted pair count when learned; 0 after loading
  };

  corpus::UnitMode mode = corpus::UnitMode::kChar;
  std::string regex = std::string(corpus::kGpt2Pattern);
  std::vector<char32_t> base;
  std::vector<std::u32string> tokens;  // by id
  std::vector<Merge> merges;

  std::size_t vocab_size() const { return tokens.size(); }

  std::optional<std::int32_t> find(const std::u32string& s) const {
    auto it = std::find(tokens.begin(), tokens.end(), s);
    if (it == tokens.end()) return std::nullopt;
    return static_cast<std::int32_t>(it - tokens.begin());
  }

  friend bool operator==(const BpeModel& a, const BpeModel& b) {
    return a.mode == b.mode && a.regex == b.regex && a.base == b.base && a.tokens == b.tokens &&
           a.merges.size() == b.merges.size() &&
           std::equal(a.merges.begin(), a.merges.end(), b.merges.begin(), [](auto& x, auto& y) {
             return x.left == y.left && x.right == y.right && x.result == y.result;
           });
  }
};

namespace detail {

inline std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
  return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b);
}

/// Replaces every non-overlapping (a, b) in `syms`, left to right.
inline bool merge_pair(std::vector<std::int32_t>& syms, std::int32_t a, std::int32_t b,
                       std::int32_t result) {
  bool changed = false;
  std::size_t out = 0;
  for (std::size_t i = 0; i < syms.size();) {
    if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
      syms[out++] = result;
      i += 2;
      changed = true;
    } else {
      syms[out++] = syms[i++];
    }
  }
  syms.resize(out);
  return changed;
}

}  // namespace detail

/// Piece frequencies of a corpus under the pre-split regex.
inline std::map<std::u32string, std::int64_t> count_pieces(const std::vector<std::string>& docs,
                                                           const corpus::PreSplitter& splitter,
                                                           corpus::UnitMode mode) {
  std::map<std::u32string, std::int64_t> counts;
  for (const auto& d : docs) {
    for (const auto& p : splitter.split(d)) ++counts[corpus::to_units(p, mode)];
  }
  return counts;
}

/// Learns merges until the vocabulary holds `target_vocab_size` strings or
/// no pair occurs at least twice. Pair counts are weighted by piece
/// frequency; ties go to the lexicographically smallest (left, right).
inline BpeModel bpe_train(const std::vector<std::string>& docs, std::size_t target_vocab_size,
                          corpus::UnitMode mode = corpus::UnitMode::kChar,
                          std::string regex = std::string(corpus::kGpt2Pattern)) {
  BpeModel m;
  m.mode = mode;
  m.regex = regex;
  const corpus::PreSplitter splitter(regex);
  const auto pieces = count_pieces(docs, splitter, mode);
  std::set<char32_t> alphabet;
  for (const auto& [p, n] : pieces) alphabet.insert(p.begin(), p.end());
  m.base.assign(alphabet.begin(), alphabet.end());
  if (target_vocab_size < m.base.size()) {
    throw ConfigError("BPE target vocabulary " + std::to_string(target_vocab_size) +
                      " is smaller than the base alphabet (" + std::to_string(m.base.size()) + ")");
  }
  std::unordered_map<std::u32string, std::int32_t> ids;
  for (char32_t u : m.base) {
    ids.emplace(std::u32string(1, u), static_cast<std::int32_t>(m.tokens.size()));
    m.tokens.emplace_back(1, u);
  }

  std::vector<std::vector<std::int32_t>> words;
  std::vector<std::int64_t> freq;
  for (const auto& [p, n] : pieces) {
    std::vector<std::int32_t> syms;
    for (char32_t u : p) syms.push_back(ids.at(std::u32string(1, u)));
    words.push_back(std::move(syms));
    freq.push_back(n);
  }

  const auto& tok = m.tokens;
  struct ByRank {
    const std::vector<std::u32string>* tokens;
    bool operator()(const std::tuple<std::int64_t, std::int32_t, std::int32_t>& x,
                    const std::tuple<std::int64_t, std::int32_t, std::int32_t>& y) const {
      if (std::get<0>(x) != std::get<0>(y)) return std::get<0>(x) > std::get<0>(y);
      const auto& t = *tokens;
      if (std::get<1>(x) != std::get<1>(y)) return t[std::get<1>(x)] < t[std::get<1>(y)];
      return t[std::get<2>(x)] < t[std::get<2>(y)];
    }
  };
  std::set<std::tuple<std::int64_t, std::int32_t, std::int32_t>, ByRank> queue(ByRank{&tok});
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::unordered_set<std::uint32_t>> where;

  auto adjust = [&](std::int32_t a, std::int32_t b, std::int64_t delta, std::uint32_t word) {
    const auto key = detail::pair_key(a, b);
    auto& c = counts[key];
    if (c > 0) queue.erase({c, a, b});
    c += delta;
    if (c > 0) queue.insert({c, a, b});
    if (delta > 0) where[key].insert(word);
  };
  for (std::uint32_t w = 0; w < words.size(); ++w) {
    for (std::size_t i = 0; i + 1 < words[w].size(); ++i) adjust(words[w][i], words[w][i + 1], freq[w], w);
  }

  while (m.tokens.size() < target_vocab_size && !queue.empty()) {
    const auto [count, a, b] = *queue.begin();
    if (count < 2) break;
    const auto merged = tok[a] + tok[b];
    std::int32_t result;
    if (auto it = ids.find(merged); it != ids.end()) {
      result = it->second;
    } else {
      result = static_cast<std::int32_t>(m.tokens.size());
      ids.emplace(merged, result);
      m.tokens.push_back(merged);
    }
    m.merges.push_back({a, b, result, count});
    const auto key = detail::pair_key(a, b);
    auto targets = std::move(where[key]);
    where.erase(key);
    std::vector<std::uint32_t> order(targets.begin(), targets.end());
    std::sort(order.begin(), order.end());
    for (std::uint32_t w : order) {
      auto& syms = words[w];
      auto next = syms;
      if (!detail::merge_pair(next, a, b, result)) continue;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) adjust(syms[i], syms[i + 1], -freq[w], w);
      for (std::size_t i = 0; i + 1 < next.size(); ++i) adjust(next[i], next[i + 1], freq[w], w);
      syms = std::move(next);
    }
  }
  return m;
}

/// Ranks of every merge, grouped by pair in increasing order. A pair can be
/// merged more than once when id reuse recreates it.
using MergeRanks = std::unordered_map<std::uint64_t, std::vector<std::size_t>>;

inline MergeRanks merge_ranks(const BpeModel& m) {
  MergeRanks ranks;
  for (std::size_t r = 0; r < m.merges.size(); ++r) {
    ranks[detail::pair_key(m.merges[r].left, m.merges[r].right)].push_back(r);
  }
  return ranks;
}

/// Applies the merges of `m` to one piece in learned order.
inline std::vector<std::int32_t> bpe_encode_piece(const BpeModel& m, const MergeRanks& ranks,
                                                  std::vector<std::int32_t> syms) {
  std::size_t done = 0;  // merges [0, done) are already applied
  while (syms.size() > 1) {
    std::size_t best = m.merges.size();
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = ranks.find(detail::pair_key(syms[i], syms[i + 1]));
      if (it == ranks.end()) continue;
      auto r = std::lower_bound(it->second.begin(), it->second.end(), done);
      if (r != it->second.end()) best = std::min(best, *r);
    }
    if (best == m.merges.size()) break;
    const auto& mg = m.merges[best];
    detail::merge_pair(syms, mg.left, mg.right, mg.result);
    done = best + 1;
  }
  return syms;
}

/// BPE tokenizer over the same pre-split pieces as the learned tokenizer.
/// Always lossless except for substituted unknown units.
class BpeTokenizer : public tokenizer::Tokenizer {
 public:
  explicit BpeTokenizer(BpeModel model,
                        corpus::UnknownPolicy policy = corpus::UnknownPolicy::kStrict)
      : model_(std::move(model)), splitter_(model_.regex), policy_(policy) {
    for (std::size_t i = 0; i < model_.base.size(); ++i) {
      base_id_.emplace(model_.base[i], static_cast<std::int32_t>(i));
    }
    rank_ = merge_ranks(model_);
  }

  const BpeModel& model() const { return model_; }
  /// Emitted for unknown units under substitution.
  std::int32_t unk_id() const { return static_cast<std::int32_t>(model_.vocab_size()); }

  tokenizer::TokenizedText tokenize(std::string_view text, bool /*fallback*/) const override {
    tokenizer::TokenizedText out;
    std::size_t offset = 0;
    for (const auto& piece : splitter_.split(text)) {
      const auto units = corpus::to_units(piece, model_.mode);
      std::vector<std::int32_t> syms;
      bool unknown = false;
      for (std::size_t i = 0; i < units.size(); ++i) {
        auto it = base_id_.find(units[i]);
        if (it == base_id_.end()) {
          if (policy_ == corpus::UnknownPolicy::kStrict) {
            throw corpus::UnknownCharError(units[i], offset + i, model_.mode);
          }
          unknown = true;
          syms.push_back(unk_id());
        } else {
          syms.push_back(it->second);
        }
      }
      const auto ids = unknown ? encode_with_unknowns(syms) : encode_cached(units, syms);
      for (auto id : ids) {
        const std::size_t len = id == unk_id() ? 1 : model_.tokens[id].size();
        out.push(id, offset, offset + len, false);
        offset += len;
      }
    }
    return out;
  }

  std::string detokenize(std::span<const std::int32_t> ids) const override {
    std::string out;
    for (auto id : ids) out += token_string(id);
    return out;
  }

  std::string token_string(std::int32_t id) const override {
    if (id == unk_id() && policy_ == corpus::UnknownPolicy::kSubstitute) return "\xEF\xBF\xBD";
    if (id < 0 || static_cast<std::size_t>(id) >= model_.vocab_size()) {
      throw TokenizerError("unknown BPE token id " + std::to_string(id));
    }
    return corpus::from_units(model_.tokens[id], model_.mode);
  }

  std::size_t id_space() const override {
    return model_.vocab_size() + (policy_ == corpus::UnknownPolicy::kSubstitute ? 1 : 0);
  }
  corpus::UnitMode unit_mode() const override { return model_.mode; }
  std::string kind() const override { return "bpe"; }
  nlohmann::json describe() const override {
    return {{"kind", "bpe"}, {"vocab_size", model_.vocab_size()}, {"merges", model_.merges.size()}};
  }

 private:
  std::vector<std::int32_t> encode_cached(const std::u32string& units,
                                          std::vector<std::int32_t> syms) const {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (auto it = cache_.find(units); it != cache_.end()) return it->second;
    }
    auto ids = bpe_encode_piece(model_, rank_, std::move(syms));
    std::lock_guard<std::mutex> lock(mutex_);
    cache_.emplace(units, ids);
    return ids;
  }

  /// Unknown units split the piece; merges never cross them.
  std::vector<std::int32_t> encode_with_unknowns(const std::vector<std::int32_t>& syms) const {
    std::vector<std::int32_t> out, run;
    auto flush = [&] {
      if (run.empty()) return;
      const auto ids = bpe_encode_piece(model_, rank_, run);
      out.insert(out.end(), ids.begin(), ids.end());
      run.clear();
    };
    for (auto s : syms) {
      if (s == unk_id()) {
        flush();
        out.push_back(s);
      } else {
        run.push_back(s);
      }
    }
    flush();
    return out;
  }

  BpeModel model_;
  corpus::PreSplitter splitter_;
  corpus::UnknownPolicy policy_;
  std::unordered_map<char32_t, std::int32_t> base_id_;
  MergeRanks rank_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::u32string, std::vector<std::int32_t>> cache_;
};

// ------------------------------------------------------------- file format

inline nlohmann::json bpe_json(const BpeModel& m) {
  nlohmann::json vocab = nlohmann::json::object();
  for (std::size_t id = 0; id < m.tokens.size(); ++id) {
    vocab[tokenizer::detail::json_key(m.tokens[id])] = id;
  }
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& mg : m.merges) {
    merges.push_back({tokenizer::detail::json_key(m.tokens[mg.left]),
                      tokenizer::detail::json_key(m.tokens[mg.right])});
  }
  std::u32string base(m.base.begin(), m.base.end());
  return {{"version", 1},
          {"model_type", "bpe"},
          {"unit_mode", corpus::to_string(m.mode)},
          {"pretokenizer_regex", m.regex},
          {"base_alphabet", tokenizer::detail::json_key(base)},
          {"vocab", vocab},
          {"merges", merges}};
}

/// Rebuilds a model, checking that every merge's parts exist before it.
inline BpeModel bpe_from_json(const nlohmann::json& j) {
  using tokenizer::detail::field;
  using tokenizer::detail::from_key;
  if (!j.is_object()) throw TokenizerError("tokenizer file: / is not an object");
  const auto& version = field(j, "version", "");
  if (!version.is_number_integer() || version.get<int>() != 1) {
    throw TokenizerError("tokenizer file: /version must be 1");
  }
  if (field(j, "model_type", "") != "bpe") {
    throw TokenizerError("tokenizer file: /model_type is " + j["model_type"].dump() +
                         ", expected \"bpe\"");
  }
  BpeModel m;
  m.mode = corpus::unit_mode_from_string(j.value("unit_mode", std::string("char")));
  const auto& regex = field(j, "pretokenizer_regex", "");
  if (!regex.is_string()) throw TokenizerError("tokenizer file: /pretokenizer_regex is not a string");
  m.regex = regex.get<std::string>();
  const auto& base = field(j, "base_alphabet", "");
  if (!base.is_string()) throw TokenizerError("tokenizer file: /base_alphabet is not a string");
  const auto alphabet = from_key(base.get<std::string>(), "/base_alphabet");
  m.base.assign(alphabet.begin(), alphabet.end());

  const auto& v = field(j, "vocab", "");
  if (!v.is_object()) throw TokenizerError("tokenizer file: /vocab is not an object");
  std::map<std::int32_t, std::u32string> by_id;
  for (const auto& [key, id] : v.items()) {
    if (!id.is_number_unsigned()) throw TokenizerError("tokenizer file: /vocab/" + key + " is not an id");
    if (!by_id.emplace(id.get<std::int32_t>(), from_key(key, "/vocab")).second) {
      throw TokenizerError("tokenizer file: /vocab id " + id.dump() + " is used twice");
    }
  }
  for (std::size_t i = 0; i < by_id.size(); ++i) {
    auto it = by_id.find(static_cast<std::int32_t>(i));
    if (it == by_id.end()) throw TokenizerError("tokenizer file: /vocab ids are not contiguous from 0");
    m.tokens.push_back(it->second);
  }
  if (m.tokens.size() < m.base.size()) {
    throw TokenizerError("tokenizer file: /vocab is smaller than /base_alphabet");
  }
  for (std::size_t i = 0; i < m.base.size(); ++i) {
    if (m.tokens[i] != std::u32string(1, m.base[i])) {
      throw TokenizerError("tokenizer file: /vocab id " + std::to_string(i) +
                           " is not base unit " + std::to_string(i));
    }
  }
  std::unordered_map<std::u32string, std::int32_t> ids;
  for (std::size_t i = 0; i < m.tokens.size(); ++i) ids.emplace(m.tokens[i], static_cast<std::int32_t>(i));
  std::unordered_set<std::int32_t> available;
  for (std::size_t i = 0; i < m.base.size(); ++i) available.insert(static_cast<std::int32_t>(i));
  const auto& merges = field(j, "merges", "");
  if (!merges.is_array()) throw TokenizerError("tokenizer file: /merges is not an array");
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto& mg = merges[r];
    const std::string where = "tokenizer file: /merges/" + std::to_string(r);
    if (!mg.is_array() || mg.size() != 2 || !mg[0].is_string() || !mg[1].is_string()) {
      throw TokenizerError(where + " is not a pair of strings");
    }
    const auto l = from_key(mg[0].get<std::string>(), where);
    const auto rr = from_key(mg[1].get<std::string>(), where);
    auto li = ids.find(l), ri = ids.find(rr), res = ids.find(l + rr);
    if (li == ids.end() || ri == ids.end() || !available.count(li->second) ||
        !available.count(ri->second)) {
      throw TokenizerError(where + " uses a part that no earlier merge produced");
    }
    if (res == ids.end()) throw TokenizerError(where + " result is missing from /vocab");
    m.merges.push_back({li->second, ri->second, res->second, 0});
    available.insert(res->second);
  }
  if (available.size() != m.tokens.size()) {
    throw TokenizerError("tokenizer file: /vocab holds strings no merge produces");
  }
  return m;
}

inline void export_bpe(const BpeModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write tokenizer '" + path.string() + "'");
  out << bpe_json(m).dump(2) << '\n';
  if (!out) throw IoError("failed writing tokenizer '" + path.string() + "'");
}

}  // namespace gqvae::baselines
