#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "gqvae/baselines/bpe.hpp"
#include "gqvae/tokenizer/dictionary.hpp"
#include "gqvae/tokenizer/gq_tokenizer.hpp"
#include "gqvae/train/checkpoint.hpp"

namespace gqvae::tokenizer {

/// Checkpoint path as stored in a word-level tokenizer file: relative to the
/// file's directory when possible.
inline std::string checkpoint_reference(const std::filesystem::path& checkpoint,
                                        const std::filesystem::path& tokenizer_file) {
  const auto dir = std::filesystem::absolute(tokenizer_file).parent_path();
  return std::filesystem::absolute(checkpoint).lexically_proximate(dir).generic_string();
}

inline std::filesystem::path resolve_checkpoint(const std::string& reference,
                                                const std::filesystem::path& tokenizer_file) {
  const std::filesystem::path p(reference);
  if (p.is_absolute()) return p;
  return std::filesystem::absolute(tokenizer_file).parent_path() / p;
}

/// A tokenizer file opened for use: BPE, or a learned dictionary with its
/// model when the file names a checkpoint.
struct LoadedTokenizer {
  std::string model_type;
  std::filesystem::path file;
  std::unique_ptr<Tokenizer> tokenizer;   // null for a dictionary without a model
  std::optional<TokenDictionary> dictionary;

  std::string detokenize(std::span<const std::int32_t> ids) const {
    if (tokenizer) return tokenizer->detokenize(ids);
    return tokenizer::detokenize(ids, *dictionary);
  }

  const Tokenizer& require_model() const {
    if (!tokenizer) {
      throw TokenizerError("tokenizer '" + file.string() +
                           "' has no \"checkpoint\" field; only detokenization is possible");
    }
    return *tokenizer;
  }
};

inline LoadedTokenizer load_any_tokenizer(const std::filesystem::path& path,
                                          corpus::UnknownPolicy policy = corpus::UnknownPolicy::kStrict) {
  const auto j = read_json_file(path);
  if (!j.is_object() || !j.contains("model_type")) {
    throw TokenizerError("tokenizer file: missing /model_type in '" + path.string() + "'");
  }
  LoadedTokenizer out;
  out.file = path;
  out.model_type = j["model_type"].is_string() ? j["model_type"].get<std::string>() : "";
  if (out.model_type == "bpe") {
    out.tokenizer = std::make_unique<baselines::BpeTokenizer>(baselines::bpe_from_json(j), policy);
    return out;
  }
  out.dictionary = tokenizer_from_json(j);
  if (j.contains("checkpoint")) {
    if (!j["checkpoint"].is_string()) throw TokenizerError("tokenizer file: /checkpoint is not a string");
    const auto ckpt = resolve_checkpoint(j["checkpoint"].get<std::string>(), path);
    auto m = std::make_shared<const model::GqVae<float>>(train::load_model<float>(ckpt));
    out.tokenizer = std::make_unique<GqTokenizer<float>>(m, *out.dictionary, policy);
  }
  return out;
}

}  // namespace gqvae::tokenizer
