#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/tokenizer/interface.hpp"

namespace gqvae::tokenizer {

struct IdStreamInfo {
  std::size_t vocab_size = 0;
  std::size_t num_tokens = 0;
  std::size_t num_units = 0;
  double bytes_per_token = 0;  // 0 when no tokens were written

  nlohmann::json to_json() const {
    nlohmann::json j = {{"vocab_size", vocab_size}, {"num_tokens", num_tokens}};
    j["bytes_per_token"] = num_tokens ? nlohmann::json(bytes_per_token) : nlohmann::json(nullptr);
    return j;
  }
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return path.string() + ".json";
}

/// Writes the lossless token ids of every document as little-endian int32
/// to `path`, and the stream summary to `<path>.json`.
inline IdStreamInfo export_ids(const std::vector<std::string>& docs, const Tokenizer& tok,
                               const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "id streams are little-endian");
  IdStreamInfo info;
  info.vocab_size = tok.id_space();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write id stream '" + path.string() + "'");
  const auto all = tok.tokenize_all(docs, true);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const auto& ids = all[d].ids;
    out.write(reinterpret_cast<const char*>(ids.data()),
              static_cast<std::streamsize>(ids.size() * sizeof(std::int32_t)));
    info.num_tokens += ids.size();
    info.num_units += tok.unit_count(docs[d]);
  }
  if (!out) throw IoError("failed writing id stream '" + path.string() + "'");
  if (info.num_tokens) info.bytes_per_token = double(info.num_units) / double(info.num_tokens);
  std::ofstream side(sidecar_path(path));
  if (!side) throw IoError("cannot write '" + sidecar_path(path).string() + "'");
  side << info.to_json().dump(2) << '\n';
  if (!side) throw IoError("failed writing '" + sidecar_path(path).string() + "'");
  return info;
}

/// Reads an id stream written by export_ids.
inline std::vector<std::int32_t> read_ids(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open id stream '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  if (bytes.size() % sizeof(std::int32_t)) {
    throw IoError("id stream '" + path.string() + "' has a partial trailing id");
  }
  std::vector<std::int32_t> ids(bytes.size() / sizeof(std::int32_t));
  std::memcpy(ids.data(), bytes.data(), bytes.size());
  return ids;
}

}  // namespace gqvae::tokenizer
