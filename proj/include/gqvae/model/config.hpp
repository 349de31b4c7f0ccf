#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "gqvae/core/error.hpp"
#include "gqvae/core/hash.hpp"
#include "gqvae/corpus/pre_split.hpp"

namespace gqvae {

/// Every architecture, loss, maintenance and optimisation knob of a run.
/// Field names are the keys of config files and checkpoints.
struct TrainConfig {
  // architecture
  std::size_t d = 128;
  std::size_t codebook_size = 2048;
  std::size_t w = 10;
  std::size_t s_max = 16;
  std::size_t enc_layers = 2;
  std::size_t enc_heads = 4;
  std::size_t gater_layers = 2;
  std::size_t gater_heads = 4;
  std::size_t ffn_mult = 4;
  /// Channels per decoded position; 0 means d.
  std::size_t decoder_channels = 0;
  /// >0 replaces the gater with fixed gates every k positions (VQ-VAE baseline).
  std::size_t fixed_k = 0;
  /// Pins the gate at each row's last real position to 1 during training,
  /// as inference does.
  bool force_final_gate = false;

  // loss weights
  double alpha = 0.05;
  double beta = 0.25;
  double gamma = 1.0;
  bool swap_vq_convention = false;

  // codebook maintenance
  std::size_t warmup_steps = 200;
  std::size_t cache_capacity = 4096;
  std::size_t cache_per_step = 64;
  std::size_t resample_interval = 100;
  double dead_code_threshold = 0.03;
  double usage_decay = 0.99;

  // optimisation
  double lr = 3e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t batch_size = 64;
  std::size_t total_steps = 5000;
  std::uint64_t seed = 0;
  std::size_t log_interval = 50;
  std::size_t checkpoint_interval = 1000;

  // data
  std::string unit_mode = "char";
  std::string pre_split_pattern = std::string(corpus::kGpt2Pattern);
  bool drop_whitespace = false;
  bool reserve_unknown = false;

  std::size_t decoder_width() const { return decoder_channels == 0 ? d : decoder_channels; }

  template <typename Self, typename F>
  static void visit(Self& c, F&& f) {
    f("d", c.d);
    f("codebook_size", c.codebook_size);
    f("w", c.w);
    f("s_max", c.s_max);
    f("enc_layers", c.enc_layers);
    f("enc_heads", c.enc_heads);
    f("gater_layers", c.gater_layers);
    f("gater_heads", c.gater_heads);
    f("ffn_mult", c.ffn_mult);
    f("decoder_channels", c.decoder_channels);
    f("fixed_k", c.fixed_k);
    f("force_final_gate", c.force_final_gate);
    f("alpha", c.alpha);
    f("beta", c.beta);
    f("gamma", c.gamma);
    f("swap_vq_convention", c.swap_vq_convention);
    f("warmup_steps", c.warmup_steps);
    f("cache_capacity", c.cache_capacity);
    f("cache_per_step", c.cache_per_step);
    f("resample_interval", c.resample_interval);
    f("dead_code_threshold", c.dead_code_threshold);
    f("usage_decay", c.usage_decay);
    f("lr", c.lr);
    f("weight_decay", c.weight_decay);
    f("clip_norm", c.clip_norm);
    f("batch_size", c.batch_size);
    f("total_steps", c.total_steps);
    f("seed", c.seed);
    f("log_interval", c.log_interval);
    f("checkpoint_interval", c.checkpoint_interval);
    f("unit_mode", c.unit_mode);
    f("pre_split_pattern", c.pre_split_pattern);
    f("drop_whitespace", c.drop_whitespace);
    f("reserve_unknown", c.reserve_unknown);
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
    if (d < 1) fail("d must be >= 1");
    if (codebook_size < 2) fail("codebook_size must be >= 2");
    if (w < 1) fail("w must be >= 1");
    if (s_max < 1) fail("s_max must be >= 1");
    if (w > s_max) fail("w (" + std::to_string(w) + ") must not exceed s_max (" +
                        std::to_string(s_max) + ")");
    if (enc_layers < 1 || gater_layers < 1) fail("layer counts must be >= 1");
    if (enc_heads < 1 || gater_heads < 1) fail("head counts must be >= 1");
    if (d % enc_heads != 0 || d % gater_heads != 0) fail("d must be divisible by the head counts");
    if (ffn_mult < 1) fail("ffn_mult must be >= 1");
    if (alpha < 0 || beta < 0 || gamma < 0) fail("loss weights must be >= 0");
    if (usage_decay < 0 || usage_decay >= 1) fail("usage_decay must be in [0, 1)");
    if (dead_code_threshold < 0) fail("dead_code_threshold must be >= 0");
    if (lr < 0) fail("lr must be >= 0");
    if (clip_norm <= 0) fail("clip_norm must be > 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (log_interval < 1) fail("log_interval must be >= 1");
    corpus::unit_mode_from_string(unit_mode);
    corpus::PreSplitter check(pre_split_pattern);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    visit(*this, [&](const char* name, const auto& v) { j[name] = v; });
    return j;
  }

  /// Applies the keys present in `j` on top of this config. Unknown keys are
  /// errors so that typos never pass silently.
  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config JSON must be an object");
    for (const auto& [key, value] : j.items()) {
      bool found = false;
      visit(*this, [&](const char* name, auto& field) {
        if (key != name) return;
        found = true;
        using F = std::decay_t<decltype(field)>;
        try {
          field = value.get<F>();
        } catch (const nlohmann::json::exception&) {
          throw ConfigError("config key '" + key + "' has the wrong type");
        }
      });
      if (!found) throw ConfigError("unknown config key '" + key + "'");
    }
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.merge_json(j);
    return c;
  }

  /// Sets one field from its textual form (key=value files, CLI overrides).
  void set(const std::string& key, const std::string& text) {
    bool found = false;
    visit(*this, [&](const char* name, auto& field) {
      if (key != name) return;
      found = true;
      using F = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<F, std::string>) {
        field = text;
      } else if constexpr (std::is_same_v<F, bool>) {
        if (text == "true" || text == "1") field = true;
        else if (text == "false" || text == "0") field = false;
        else throw ConfigError("config key '" + key + "' expects true/false, got '" + text + "'");
      } else {
        std::istringstream is(text);
        F v{};
        is >> v;
        if (is.fail() || !is.eof()) {
          throw ConfigError("config key '" + key + "' cannot parse '" + text + "'");
        }
        if constexpr (std::is_unsigned_v<F>) {
          if (text.find('-') != std::string::npos) {
            throw ConfigError("config key '" + key + "' must be non-negative");
          }
        }
        field = v;
      }
    });
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }

  /// Parses either a JSON object or `key = value` lines (# starts a comment).
  static TrainConfig parse(const std::string& text) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
      try {
        return from_json(nlohmann::json::parse(text));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config JSON: ") + e.what());
      }
    }
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + " is not key=value");
      }
      c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  /// FNV-1a over the canonical JSON of every field that shapes the model or
  /// its training trajectory. Run-length and logging cadence are excluded so
  /// a run can be resumed with a longer budget.
  std::uint64_t hash() const {
    nlohmann::json j = to_json();
    j.erase("total_steps");
    j.erase("log_interval");
    j.erase("checkpoint_interval");
    return fnv1a(j.dump());
  }

  friend bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.to_json() == b.to_json();
  }
};

}  // namespace gqvae
