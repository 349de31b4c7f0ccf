#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/hash.hpp"
#include "gqvae/core/log.hpp"
#include "gqvae/corpus/reader.hpp"
#include "gqvae/eval/metrics.hpp"

namespace gqvae::eval {

enum class FallbackMode { kOff, kOn, kBoth };

inline FallbackMode fallback_mode_from_string(std::string_view s) {
  if (s == "off") return FallbackMode::kOff;
  if (s == "on") return FallbackMode::kOn;
  if (s == "both") return FallbackMode::kBoth;
  throw ConfigError("fallback mode must be on, off or both, got '" + std::string(s) + "'");
}

struct CompressionReport {
  std::string name;
  std::string kind;
  std::optional<double> bytes_per_token_no_fallback;
  std::optional<double> bytes_per_token_with_fallback;
  std::optional<double> bits_per_byte;  // from the lossless stream
  double reconstruction_char_accuracy = 0;
  std::size_t used_vocab_size = 0;  // distinct ids in the lossless stream
  std::size_t used_vocab_size_no_fallback = 0;
  double fallback_token_fraction = 0;
  CorpusStats stats;
  std::string tokenizer_hash;  // of the tokenizer file, when there is one
  nlohmann::json config;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"name", name},
            {"kind", kind},
            {"bytes_per_token_no_fallback", opt(bytes_per_token_no_fallback)},
            {"bytes_per_token_with_fallback", opt(bytes_per_token_with_fallback)},
            {"bits_per_byte", opt(bits_per_byte)},
            {"reconstruction_char_accuracy", reconstruction_char_accuracy},
            {"used_vocab_size", used_vocab_size},
            {"used_vocab_size_no_fallback", used_vocab_size_no_fallback},
            {"fallback_token_fraction", fallback_token_fraction},
            {"units", stats.units},
            {"tokens_no_fallback", stats.tokens_no_fallback},
            {"tokens_with_fallback", stats.tokens_with_fallback},
            {"tokenizer_hash", tokenizer_hash},
            {"config", config}};
  }
};

/// A tokenizer under comparison; `file` feeds the provenance hash.
struct NamedTokenizer {
  std::string name;
  const tokenizer::Tokenizer* tokenizer = nullptr;
  std::optional<std::filesystem::path> file;
};

inline std::string file_hash(const std::filesystem::path& path) {
  return "fnv1a64:" + hex64(fnv1a(corpus::read_file(path)));
}

inline CompressionReport compression_report(const std::vector<std::string>& docs,
                                            const NamedTokenizer& t, FallbackMode mode) {
  const auto& tok = *t.tokenizer;
  const auto s = corpus_stats(docs, tok);
  detail::require_units(s.units);
  CompressionReport r;
  r.name = t.name;
  r.kind = tok.kind();
  r.stats = s;
  const double plain = double(s.units) / double(s.tokens_no_fallback);
  const double fb = double(s.units) / double(s.tokens_with_fallback);
  if (mode != FallbackMode::kOn) r.bytes_per_token_no_fallback = plain;
  if (mode != FallbackMode::kOff) r.bytes_per_token_with_fallback = fb;
  r.used_vocab_size = s.used_with_fallback;
  r.used_vocab_size_no_fallback = s.used_no_fallback;
  if (s.used_with_fallback >= 2) {
    r.bits_per_byte = bits_per_byte(fb, s.used_with_fallback);
  } else {
    log::warn(t.name + ": bits/byte undefined for a used vocabulary of " +
              std::to_string(s.used_with_fallback));
  }
  r.reconstruction_char_accuracy = double(s.correct_units) / double(s.units);
  r.fallback_token_fraction = double(s.fallback_tokens) / double(s.tokens_with_fallback);
  if (t.file) r.tokenizer_hash = file_hash(*t.file);
  r.config = tok.describe();
  return r;
}

/// One report per tokenizer over the same corpus.
inline nlohmann::json compare_report(const std::vector<std::string>& docs,
                                     const std::vector<NamedTokenizer>& tokenizers, FallbackMode mode) {
  if (tokenizers.empty()) throw ConfigError("compare_report needs at least one tokenizer");
  nlohmann::json reports = nlohmann::json::array();
  std::size_t units = 0;
  for (const auto& t : tokenizers) {
    const auto r = compression_report(docs, t, mode);
    units = r.stats.units;
    reports.push_back(r.to_json());
  }
  return {{"documents", docs.size()}, {"units", units}, {"tokenizers", reports}};
}

inline const std::vector<std::string>& report_csv_columns() {
  static const std::vector<std::string> cols = {
      "name", "kind", "bytes_per_token_no_fallback", "bytes_per_token_with_fallback", "bits_per_byte",
      "reconstruction_char_accuracy", "used_vocab_size", "used_vocab_size_no_fallback",
      "fallback_token_fraction", "units", "tokens_no_fallback", "tokens_with_fallback", "tokenizer_hash"};
  return cols;
}

inline std::string report_csv(const nlohmann::json& report) {
  std::ostringstream out;
  const auto& cols = report_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : report.at("tokenizers")) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      const auto& v = r.at(cols[i]);
      out << (i ? "," : "");
      if (v.is_string()) {
        out << csv_field(v.get<std::string>());
      } else if (!v.is_null()) {
        out << v.dump();
      }
    }
    out << '\n';
  }
  return out.str();
}

/// Writes `<stem>.json` and `<stem>.csv`.
inline void write_report(const nlohmann::json& report, const std::filesystem::path& stem) {
  const auto write = [](const std::filesystem::path& p, const std::string& body) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw IoError("cannot write '" + p.string() + "'");
    out << body;
    if (!out) throw IoError("failed writing '" + p.string() + "'");
  };
  write(stem.string() + ".json", report.dump(2) + "\n");
  write(stem.string() + ".csv", report_csv(report));
}

}  // namespace gqvae::eval
