#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "gqvae/core/error.hpp"

namespace gqvae::corpus {

/// The atomic unit text is split into: Unicode scalar values or raw bytes.
enum class UnitMode { kChar, kByte };

inline const char* to_string(UnitMode m) { return m == UnitMode::kByte ? "byte" : "char"; }

inline UnitMode unit_mode_from_string(std::string_view s) {
  if (s == "char") return UnitMode::kChar;
  if (s == "byte") return UnitMode::kByte;
  throw ConfigError("unknown unit mode '" + std::string(s) + "' (expected char or byte)");
}

/// Decodes UTF-8 into scalar values; throws IngestError on malformed input.
inline std::u32string utf8_decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      throw IngestError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > s.size()) {
      throw IngestError("truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) {
        throw IngestError("invalid UTF-8 continuation byte at offset " +
                          std::to_string(i + k));
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
                          (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      throw IngestError("invalid UTF-8 scalar at offset " + std::to_string(i));
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string utf8_encode(std::u32string_view units) {
  std::string out;
  out.reserve(units.size());
  for (char32_t cp : units) utf8_append(out, cp);
  return out;
}

/// Splits text into units under the given mode.
inline std::u32string to_units(std::string_view text, UnitMode mode) {
  if (mode == UnitMode::kChar) return utf8_decode(text);
  std::u32string out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

inline void append_unit(std::string& out, char32_t unit, UnitMode mode) {
  if (mode == UnitMode::kChar) utf8_append(out, unit);
  else out.push_back(static_cast<char>(static_cast<unsigned char>(unit)));
}

inline std::string from_units(std::u32string_view units, UnitMode mode) {
  std::string out;
  for (char32_t u : units) append_unit(out, u, mode);
  return out;
}

inline std::size_t unit_count(std::string_view text, UnitMode mode) {
  if (mode == UnitMode::kByte) return text.size();
  std::size_t n = 0;
  for (char c : text) n += (static_cast<unsigned char>(c) & 0xC0) != 0x80;
  return n;
}

/// Printable form of a unit for diagnostics.
inline std::string describe_unit(char32_t unit, UnitMode mode) {
  char buf[16];
  if (mode == UnitMode::kByte) {
    std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned>(unit));
    return buf;
  }
  std::snprintf(buf, sizeof buf, "U+%04X", static_cast<unsigned>(unit));
  std::string s = "'";
  utf8_append(s, unit);
  return s + "' (" + buf + ")";
}

}  // namespace gqvae::corpus
