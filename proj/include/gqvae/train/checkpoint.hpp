#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/core/hash.hpp"
#include "gqvae/train/trainer.hpp"

namespace gqvae::train {

// Layout (little-endian):
//   "GQVAECKP" u32 version
//   str config_json, u64 config_hash, str vocab_json, u32 scalar_bytes
//   u64 step, f64 best_loss, u64 adam_steps, str rng_state, u64 epoch, u64 cursor
//   u64 n_params, per param: str name, u64 rank, u64 dims..., values, m, v
//   u64 |usage|, f64 usage..., u64 cache_size, u64 cache_head, u8 initialized,
//   u64 cache_rows, u64 cache_cols, cache values
//   u64 FNV-1a of everything before it
inline constexpr std::string_view kCheckpointMagic = "GQVAECKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

using gqvae::fnv1a;

class Writer {
 public:
  template <typename U>
  void pod(U v) {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    buf_.append(b, sizeof(U));
  }
  void str(std::string_view s) {
    pod<std::uint64_t>(s.size());
    buf_.append(s);
  }
  template <typename Vec>
  void values(const Vec& v) {
    using T = typename Vec::value_type;
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
  }
  void raw(std::string_view s) { buf_.append(s); }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}

  template <typename U>
  U pod(const char* field) {
    need(sizeof(U), field);
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(const char* field) {
    const auto n = pod<std::uint64_t>(field);
    need(n, field);
    std::string s(buf_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  template <typename Vec>
  void values(Vec& out, const char* field) {
    using T = typename Vec::value_type;
    need(out.size() * sizeof(T), field);
    std::memcpy(out.data(), buf_.data() + pos_, out.size() * sizeof(T));
    pos_ += out.size() * sizeof(T);
  }
  std::string_view raw(std::size_t n, const char* field) {
    need(n, field);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::uint64_t n, const char* field) {
    if (n > buf_.size() - pos_) {
      throw CorruptionError(std::string("checkpoint truncated in field '") + field + "'");
    }
  }

  std::string_view buf_;
  std::size_t pos_ = 0;
};

template <typename T>
void read_array(Reader& r, nn::Array<T>& a, const char* field) {
  r.values(a.storage(), field);
}

}  // namespace detail

/// Serialises the complete state of `tr` into `path`, writing to a sibling
/// temporary file first so an existing checkpoint is replaced atomically.
template <typename T>
void save_checkpoint(const Trainer<T>& tr, const std::filesystem::path& path) {
  detail::Writer w;
  const auto& m = tr.model();
  const auto& cfg = tr.config();
  w.raw(kCheckpointMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.str(cfg.to_json().dump());
  w.pod<std::uint64_t>(cfg.hash());
  w.str(m.vocab().to_json().dump());
  w.pod<std::uint32_t>(sizeof(T));
  w.pod<std::uint64_t>(tr.steps_done());
  w.pod<double>(tr.best_loss());
  w.pod<std::uint64_t>(tr.optimizer().steps());
  w.str(tr.rng().state());
  w.pod<std::uint64_t>(tr.batcher().epoch());
  w.pod<std::uint64_t>(tr.batcher().cursor());
  const auto& store = m.params();
  w.pod<std::uint64_t>(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    w.str(p.name);
    w.pod<std::uint64_t>(p.value.shape().size());
    for (auto d : p.value.shape()) w.pod<std::uint64_t>(d);
    w.values(p.value.storage());
    w.values(tr.optimizer().first_moments()[i].storage());
    w.values(tr.optimizer().second_moments()[i].storage());
  }
  const auto& cb = m.codebook();
  w.pod<std::uint64_t>(cb.usage.size());
  w.values(cb.usage);
  w.pod<std::uint64_t>(cb.cache_size);
  w.pod<std::uint64_t>(cb.cache_head);
  w.pod<std::uint8_t>(cb.initialized ? 1 : 0);
  w.pod<std::uint64_t>(cb.cache.rows());
  w.pod<std::uint64_t>(cb.cache.cols());
  w.values(cb.cache.storage());
  w.pod<std::uint64_t>(detail::fnv1a(w.bytes()));

  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint '" + tmp.string() + "' for writing");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("failed writing checkpoint '" + path.string() + "' (disk full?)");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

/// Header fields readable without knowing the scalar type.
struct CheckpointInfo {
  TrainConfig config;
  corpus::CharVocab vocab;
  std::uint32_t scalar_bytes = 4;
  std::uint64_t step = 0;
};

namespace detail {

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Verifies magic, version and checksum; returns a reader positioned after the version.
inline Reader open_checked(std::string_view bytes) {
  Reader head(bytes);
  if (head.raw(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw CorruptionError("checkpoint field 'magic' does not match");
  }
  const auto version = head.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint field 'version' is " + std::to_string(version) +
                       ", expected " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < kCheckpointMagic.size() + 4 + 8) {
    throw CorruptionError("checkpoint truncated in field 'checksum'");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (stored != fnv1a(body)) {
    throw CorruptionError("checkpoint field 'checksum' does not match contents (truncated or corrupt)");
  }
  Reader r(body);
  r.raw(kCheckpointMagic.size(), "magic");
  r.pod<std::uint32_t>("version");
  return r;
}

inline CheckpointInfo read_header(Reader& r) {
  CheckpointInfo info;
  const auto cfg_text = r.str("config");
  const auto hash = r.pod<std::uint64_t>("config_hash");
  const auto vocab_text = r.str("vocab");
  try {
    info.config = TrainConfig::from_json(nlohmann::json::parse(cfg_text));
    info.vocab = corpus::CharVocab::from_json(nlohmann::json::parse(vocab_text));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint field 'config' or 'vocab' is malformed: ") +
                          e.what());
  }
  if (info.config.hash() != hash) {
    throw VersionError("checkpoint field 'config_hash' does not match its stored config");
  }
  info.scalar_bytes = r.pod<std::uint32_t>("scalar_bytes");
  info.step = r.pod<std::uint64_t>("step");
  return info;
}

}  // namespace detail

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  auto r = detail::open_checked(bytes);
  return detail::read_header(r);
}

namespace detail {

/// Parameters (with Adam moments when `opt` is set) and codebook state.
template <typename T>
void read_model_state(Reader& r, model::GqVae<T>& m, AdamW<T>* opt) {
  auto& store = m.params();
  const auto n = r.pod<std::uint64_t>("param_count");
  if (n != store.size()) {
    throw CorruptionError("checkpoint field 'param_count' is " + std::to_string(n) + ", expected " +
                          std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    const auto name = r.str("param_name");
    if (name != p.name) {
      throw CorruptionError("checkpoint parameter " + std::to_string(i) + " is '" + name +
                            "', expected '" + p.name + "'");
    }
    const auto rank = r.pod<std::uint64_t>("param_rank");
    nn::Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint64_t>("param_shape");
    if (shape != p.value.shape()) {
      throw CorruptionError("checkpoint parameter '" + name + "' has shape " +
                            shape_string(shape) + ", expected " + shape_string(p.value.shape()));
    }
    read_array(r, p.value, "param_values");
    Array<T> scratch(p.value.shape());
    read_array(r, opt ? opt->first_moments()[i] : scratch, "adam_m");
    read_array(r, opt ? opt->second_moments()[i] : scratch, "adam_v");
  }
  auto& cb = m.codebook();
  if (r.pod<std::uint64_t>("usage_size") != cb.usage.size()) {
    throw CorruptionError("checkpoint field 'usage_size' does not match the codebook");
  }
  r.values(cb.usage, "usage");
  cb.cache_size = r.pod<std::uint64_t>("cache_size");
  cb.cache_head = r.pod<std::uint64_t>("cache_head");
  cb.initialized = r.pod<std::uint8_t>("initialized") != 0;
  const auto rows_n = r.pod<std::uint64_t>("cache_rows");
  const auto cols_n = r.pod<std::uint64_t>("cache_cols");
  if (rows_n != cb.cache.rows() || cols_n != cb.cache.cols() || cb.cache_size > rows_n ||
      cb.cache_head >= std::max<std::uint64_t>(rows_n, 1)) {
    throw CorruptionError("checkpoint field 'cache' has inconsistent dimensions");
  }
  read_array(r, cb.cache, "cache");
}

/// Header checks shared by every loader.
template <typename T>
CheckpointInfo read_typed_header(Reader& r) {
  auto info = read_header(r);
  if (info.scalar_bytes != sizeof(T)) {
    throw VersionError("checkpoint field 'scalar_bytes' is " + std::to_string(info.scalar_bytes) +
                       ", expected " + std::to_string(sizeof(T)));
  }
  return info;
}

}  // namespace detail

/// Restores a trainer from `path`. When `expected` is given, its hash must
/// equal the stored one; its run-length fields replace the stored ones.
template <typename T>
Trainer<T> load_checkpoint(const std::filesystem::path& path,
                           std::vector<std::vector<std::int32_t>> rows,
                           const std::optional<TrainConfig>& expected = std::nullopt) {
  const auto bytes = detail::read_file_bytes(path);
  auto r = detail::open_checked(bytes);
  auto info = detail::read_typed_header<T>(r);
  if (expected && expected->hash() != info.config.hash()) {
    throw VersionError("checkpoint field 'config_hash' differs from the requested config");
  }
  TrainConfig cfg = info.config;
  if (expected) {
    cfg.total_steps = expected->total_steps;
    cfg.log_interval = expected->log_interval;
    cfg.checkpoint_interval = expected->checkpoint_interval;
  }
  Trainer<T> tr(cfg, info.vocab, std::move(rows));
  tr.set_steps_done(info.step);
  tr.set_best_loss(r.pod<double>("best_loss"));
  tr.optimizer().set_steps(r.pod<std::uint64_t>("adam_steps"));
  tr.rng().set_state(r.str("rng_state"));
  const auto epoch = r.pod<std::uint64_t>("batcher_epoch");
  const auto cursor = r.pod<std::uint64_t>("batcher_cursor");
  tr.batcher().seek(epoch, cursor);
  detail::read_model_state(r, tr.model(), &tr.optimizer());
  if (r.remaining() != 0) throw CorruptionError("checkpoint has trailing bytes after 'cache'");
  return tr;
}

/// Restores only the model of a checkpoint, for inference.
template <typename T>
model::GqVae<T> load_model(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  auto r = detail::open_checked(bytes);
  const auto info = detail::read_typed_header<T>(r);
  r.pod<double>("best_loss");
  r.pod<std::uint64_t>("adam_steps");
  r.str("rng_state");
  r.pod<std::uint64_t>("batcher_epoch");
  r.pod<std::uint64_t>("batcher_cursor");
  Rng rng(0);
  model::GqVae<T> m(info.config, info.vocab, rng);
  detail::read_model_state(r, m, static_cast<AdamW<T>*>(nullptr));
  if (r.remaining() != 0) throw CorruptionError("checkpoint has trailing bytes after 'cache'");
  return m;
}

}  // namespace gqvae::train
