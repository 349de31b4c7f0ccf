#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <unicode/regex.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "gqvae/core/error.hpp"
#include "gqvae/corpus/unicode.hpp"

namespace gqvae::corpus {

/// The GPT-2 pre-tokenisation pattern.
inline constexpr std::string_view kGpt2Pattern =
    R"('s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+)";

/// Compiled regex pre-splitter. Text between matches (possible with custom
/// patterns) is emitted as its own piece so that the pieces always
/// concatenate back to the input.
class PreSplitter {
 public:
  explicit PreSplitter(std::string pattern = std::string(kGpt2Pattern))
      : pattern_(std::move(pattern)) {
    UErrorCode status = U_ZERO_ERROR;
    UParseError perr;
    compiled_.reset(icu::RegexPattern::compile(icu::UnicodeString::fromUTF8(pattern_),
                                               0, perr, status));
    if (U_FAILURE(status)) {
      throw ConfigError("invalid pre-split pattern '" + pattern_ + "': " +
                        u_errorName(status) + " at offset " +
                        std::to_string(perr.offset));
    }
  }

  PreSplitter(const PreSplitter& other) : PreSplitter(other.pattern_) {}
  PreSplitter& operator=(const PreSplitter& other) {
    if (this != &other) *this = PreSplitter(other.pattern_);
    return *this;
  }
  PreSplitter(PreSplitter&&) noexcept = default;
  PreSplitter& operator=(PreSplitter&&) noexcept = default;

  const std::string& pattern() const { return pattern_; }

  std::vector<std::string> split(std::string_view text) const {
    std::vector<std::string> pieces;
    if (text.empty()) return pieces;
    utf8_decode(text);  // validates
    const icu::UnicodeString input = icu::UnicodeString::fromUTF8(
        icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
    UErrorCode status = U_ZERO_ERROR;
    std::unique_ptr<icu::RegexMatcher> m(compiled_->matcher(input, status));
    if (U_FAILURE(status)) {
      throw ConfigError("cannot run pre-split pattern '" + pattern_ + "'");
    }
    auto piece = [&](int32_t begin, int32_t end) {
      std::string s;
      input.tempSubStringBetween(begin, end).toUTF8String(s);
      pieces.push_back(std::move(s));
    };
    int32_t last = 0;
    while (m->find(status) && U_SUCCESS(status)) {
      const int32_t b = m->start(status);
      const int32_t e = m->end(status);
      if (e == b) continue;
      if (b > last) piece(last, b);
      piece(b, e);
      last = e;
    }
    if (last < input.length()) piece(last, input.length());
    return pieces;
  }

 private:
  std::string pattern_;
  std::unique_ptr<icu::RegexPattern> compiled_;
};

inline std::vector<std::string> pre_split(std::string_view text, const std::string& pattern) {
  return PreSplitter(pattern).split(text);
}

inline bool is_whitespace_only(std::string_view piece) {
  const icu::UnicodeString s = icu::UnicodeString::fromUTF8(
      icu::StringPiece(piece.data(), static_cast<int32_t>(piece.size())));
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    if (!u_isUWhiteSpace(c)) return false;
    i += U16_LENGTH(c);
  }
  return true;
}

}  // namespace gqvae::corpus
