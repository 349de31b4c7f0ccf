#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace gqvae::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline Level parse_level(std::string_view s, Level fallback = Level::kInfo) {
  if (s == "error") return Level::kError;
  if (s == "warn") return Level::kWarn;
  if (s == "info") return Level::kInfo;
  if (s == "debug") return Level::kDebug;
  return fallback;
}

/// Threshold read once from GQVAE_LOG_LEVEL; overridable at runtime.
inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("GQVAE_LOG_LEVEL");
    return env ? parse_level(env) : Level::kInfo;
  }();
  return level;
}

inline void write(Level level, std::string_view tag, std::string_view msg) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  std::cerr << "[" << tag << "] " << msg << '\n';
}

inline void error(std::string_view msg) { write(Level::kError, "error", msg); }
inline void warn(std::string_view msg) { write(Level::kWarn, "warn", msg); }
inline void info(std::string_view msg) { write(Level::kInfo, "info", msg); }
inline void debug(std::string_view msg) { write(Level::kDebug, "debug", msg); }

}  // namespace gqvae::log
