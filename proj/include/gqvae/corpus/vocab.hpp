#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/corpus/unicode.hpp"

namespace gqvae::corpus {

/// What to do with a unit the vocabulary has never seen.
enum class UnknownPolicy { kStrict, kSubstitute };

class UnknownCharError : public Error {
 public:
  UnknownCharError(char32_t unit, std::size_t offset, UnitMode mode)
      : Error("unknown character " + describe_unit(unit, mode) + " at offset " +
              std::to_string(offset)),
        unit_(unit),
        offset_(offset) {}
  char32_t unit() const { return unit_; }
  std::size_t offset() const { return offset_; }

 private:
  char32_t unit_;
  std::size_t offset_;
};

/// Bijection between observed units and contiguous ids. Units are numbered in
/// code-point order; the pad id follows them, then the optional unknown id.
class CharVocab {
 public:
  CharVocab() = default;

  CharVocab(std::vector<char32_t> units, UnitMode mode, bool reserve_unknown = false)
      : mode_(mode) {
    std::sort(units.begin(), units.end());
    units.erase(std::unique(units.begin(), units.end()), units.end());
    id_to_unit_ = std::move(units);
    for (std::size_t i = 0; i < id_to_unit_.size(); ++i) {
      unit_to_id_[id_to_unit_[i]] = static_cast<std::int32_t>(i);
    }
    pad_id_ = static_cast<std::int32_t>(id_to_unit_.size());
    if (reserve_unknown) unk_id_ = pad_id_ + 1;
  }

  UnitMode mode() const { return mode_; }
  std::int32_t pad_id() const { return pad_id_; }
  std::optional<std::int32_t> unk_id() const { return unk_id_; }
  /// |C|, counting the pad (and unknown, if reserved) ids.
  std::size_t size() const { return id_to_unit_.size() + 1 + (unk_id_ ? 1 : 0); }
  std::size_t num_units() const { return id_to_unit_.size(); }
  const std::vector<char32_t>& units() const { return id_to_unit_; }

  std::optional<std::int32_t> find(char32_t unit) const {
    auto it = unit_to_id_.find(unit);
    if (it == unit_to_id_.end()) return std::nullopt;
    return it->second;
  }

  /// Unit for an id; nullopt for pad/unknown/out of range.
  std::optional<char32_t> unit(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_unit_.size()) return std::nullopt;
    return id_to_unit_[id];
  }

  bool is_special(std::int32_t id) const {
    return id == pad_id_ || (unk_id_ && id == *unk_id_);
  }

  std::int32_t encode_unit(char32_t u, std::size_t offset, UnknownPolicy policy) const {
    if (auto id = find(u)) return *id;
    if (policy == UnknownPolicy::kSubstitute && unk_id_) return *unk_id_;
    throw UnknownCharError(u, offset, mode_);
  }

  std::vector<std::int32_t> encode(std::u32string_view units,
                                   UnknownPolicy policy = UnknownPolicy::kStrict,
                                   std::size_t base_offset = 0) const {
    std::vector<std::int32_t> ids;
    ids.reserve(units.size());
    for (std::size_t i = 0; i < units.size(); ++i) {
      ids.push_back(encode_unit(units[i], base_offset + i, policy));
    }
    return ids;
  }

  std::vector<std::int32_t> encode(std::string_view text,
                                   UnknownPolicy policy = UnknownPolicy::kStrict) const {
    return encode(std::u32string_view(to_units(text, mode_)), policy);
  }

  /// Inverse of encode. Pad ids are skipped; unknown ids become U+FFFD.
  std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (auto id : ids) {
      if (id == pad_id_) continue;
      if (auto u = unit(id)) append_unit(out, *u, mode_);
      else if (mode_ == UnitMode::kChar) utf8_append(out, U'\uFFFD');
      else throw TokenizerError("id " + std::to_string(id) + " has no character");
    }
    return out;
  }

  /// JSON key for a unit: the character itself, or <0xNN> in byte mode.
  std::string unit_key(char32_t u) const {
    if (mode_ == UnitMode::kByte) return describe_unit(u, mode_);
    std::string s;
    utf8_append(s, u);
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json chars = nlohmann::json::object();
    for (std::size_t i = 0; i < id_to_unit_.size(); ++i) {
      chars[unit_key(id_to_unit_[i])] = i;
    }
    nlohmann::json j{{"chars", chars}, {"pad_id", pad_id_}, {"mode", to_string(mode_)}};
    if (unk_id_) j["unk_id"] = *unk_id_;
    return j;
  }

  static CharVocab from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("chars") || !j.contains("pad_id")) {
      throw IngestError("vocabulary JSON needs 'chars' and 'pad_id'");
    }
    const UnitMode mode = unit_mode_from_string(j.value("mode", std::string("char")));
    std::map<std::int32_t, char32_t> by_id;
    for (const auto& [key, id] : j.at("chars").items()) {
      char32_t u = 0;
      if (mode == UnitMode::kByte) {
        unsigned v = 0;
        if (std::sscanf(key.c_str(), "<0x%02X>", &v) != 1) {
          throw IngestError("bad byte key '" + key + "' in vocabulary JSON");
        }
        u = v;
      } else {
        const auto cps = utf8_decode(key);
        if (cps.size() != 1) throw IngestError("vocabulary key '" + key + "' is not one character");
        u = cps[0];
      }
      by_id[id.get<std::int32_t>()] = u;
    }
    std::vector<char32_t> units;
    for (const auto& [id, u] : by_id) units.push_back(u);
    CharVocab v(units, mode, j.contains("unk_id"));
    for (const auto& [id, u] : by_id) {
      if (v.find(u) != id) {
        throw IngestError("vocabulary JSON ids are not in code-point order");
      }
    }
    if (v.pad_id() != j.at("pad_id").get<std::int32_t>()) {
      throw IngestError("vocabulary JSON pad_id does not follow the characters");
    }
    return v;
  }

  friend bool operator==(const CharVocab& a, const CharVocab& b) {
    return a.mode_ == b.mode_ && a.id_to_unit_ == b.id_to_unit_ && a.unk_id_ == b.unk_id_;
  }

 private:
  UnitMode mode_ = UnitMode::kChar;
  std::vector<char32_t> id_to_unit_;
  std::unordered_map<char32_t, std::int32_t> unit_to_id_;
  std::int32_t pad_id_ = 0;
  std::optional<std::int32_t> unk_id_;
};

/// Builds the vocabulary over every unit in the stream.
template <typename Range>
CharVocab build_char_vocab(const Range& texts, UnitMode mode = UnitMode::kChar,
                           bool reserve_unknown = false) {
  std::set<char32_t> seen;
  for (const auto& t : texts) {
    for (char32_t u : to_units(t, mode)) seen.insert(u);
  }
  if (seen.empty()) throw IngestError("corpus contains no characters");
  return CharVocab(std::vector<char32_t>(seen.begin(), seen.end()), mode, reserve_unknown);
}

inline void save_vocab(const CharVocab& v, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary file " + path);
  out << v.to_json().dump(2) << '\n';
}

inline CharVocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocabulary file " + path);
  try {
    return CharVocab::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw IngestError("malformed vocabulary file " + path + ": " + e.what());
  }
}

}  // namespace gqvae::corpus
