#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gqvae/core/log.hpp"
#include "gqvae/train/checkpoint.hpp"
#include "gqvae/train/trainer.hpp"

namespace gqvae::train {

namespace fs = std::filesystem;

/// `<root>/seed-<seed>-<UTC timestamp>`, suffixed if it already exists.
inline fs::path make_run_dir(const fs::path& root, std::uint64_t seed) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const std::string base = "seed-" + std::to_string(seed) + "-" + stamp;
  fs::path dir = root / base;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

inline fs::path checkpoint_path(const fs::path& run_dir, std::uint64_t step) {
  char name[40];
  std::snprintf(name, sizeof name, "step-%08llu.ckpt", static_cast<unsigned long long>(step));
  return run_dir / "checkpoints" / name;
}

inline fs::path final_checkpoint_path(const fs::path& run_dir) {
  return run_dir / "checkpoints" / "final.ckpt";
}

/// Keeps only metric lines whose step is at most `step`.
inline void truncate_metrics(const fs::path& path, std::uint64_t step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) continue;
    if (j["step"].get<std::uint64_t>() <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

struct RunOptions {
  /// Directory for metrics.jsonl, config and checkpoints; empty keeps everything in memory.
  fs::path run_dir;
};

/// Runs `tr` until it has completed `config().total_steps` steps, logging
/// every `log_interval` steps and at the last step, checkpointing every
/// `checkpoint_interval` steps, then saving the final checkpoint. On error
/// `tr` keeps the state reached so far.
template <typename T>
std::vector<StepResult> run(Trainer<T>& tr, const RunOptions& opts = {}) {
  const auto& cfg = tr.config();
  std::vector<StepResult> logged;
  std::ofstream metrics;
  if (!opts.run_dir.empty()) {
    fs::create_directories(opts.run_dir);
    const auto mpath = opts.run_dir / "metrics.jsonl";
    truncate_metrics(mpath, tr.steps_done());
    metrics.open(mpath, std::ios::app);
    if (!metrics) throw IoError("cannot open metrics log '" + mpath.string() + "'");
  }
  while (tr.steps_done() < cfg.total_steps) {
    auto r = tr.step();
    const bool last = r.step == cfg.total_steps;
    if ((cfg.log_interval > 0 && r.step % cfg.log_interval == 0) || last) {
      const auto line = r.to_json().dump();
      if (metrics.is_open()) {
        metrics << line << '\n';
        metrics.flush();
        if (!metrics) throw IoError("failed writing metrics log in '" + opts.run_dir.string() + "'");
      }
      log::info(line);
      logged.push_back(std::move(r));
    }
    if (!opts.run_dir.empty() && cfg.checkpoint_interval > 0 &&
        tr.steps_done() % cfg.checkpoint_interval == 0 && !last) {
      save_checkpoint(tr, checkpoint_path(opts.run_dir, tr.steps_done()));
    }
  }
  if (!opts.run_dir.empty()) save_checkpoint(tr, final_checkpoint_path(opts.run_dir));
  return logged;
}

/// Writes config.json and vocab.json describing a run.
inline void write_run_header(const fs::path& run_dir, const TrainConfig& cfg,
                             const corpus::CharVocab& vocab) {
  fs::create_directories(run_dir);
  std::ofstream(run_dir / "config.json") << cfg.to_json().dump(2) << '\n';
  std::ofstream(run_dir / "vocab.json") << vocab.to_json().dump(2) << '\n';
}

/// Trains `num_seeds` seeds (cfg.seed, cfg.seed + 1, ...) for `budget` steps
/// each and returns the one with the lowest mean total loss over its last
/// steps, ready to continue.
template <typename T>
Trainer<T> select_seed(const TrainConfig& cfg, const PreparedCorpus& data, std::size_t num_seeds,
                       std::size_t budget) {
  if (num_seeds == 0) throw ConfigError("multi-seed mode needs at least one seed");
  std::optional<Trainer<T>> best;
  double best_score = std::numeric_limits<double>::infinity();
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(budget, 20));
  for (std::size_t i = 0; i < num_seeds; ++i) {
    TrainConfig c = cfg;
    c.seed = cfg.seed + i;
    Trainer<T> tr(c, data.vocab, data.rows);
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < budget; ++s) {
      const auto r = tr.step();
      if (s + window >= budget) {
        sum += r.loss.total;
        ++n;
      }
    }
    const double score = n ? sum / double(n) : 0.0;
    log::info("multi-seed: seed " + std::to_string(c.seed) + " mean total " +
              std::to_string(score));
    if (!best || score < best_score) {
      best_score = score;
      best.emplace(std::move(tr));
    }
  }
  return std::move(*best);
}

template <typename T>
struct FitResult {
  Trainer<T> trainer;
  std::vector<StepResult> log;
  fs::path run_dir;
};

struct FitOptions {
  /// Parent of the `seed-<seed>-<timestamp>` run directory; empty writes nothing.
  fs::path out_root;
  /// Resume from this checkpoint, appending to the metrics log of its run directory.
  std::optional<fs::path> resume;
  std::size_t num_seeds = 1;
  std::size_t seed_budget = 200;
};

/// Trains on `docs` from scratch (or from `opts.resume`) per `cfg`.
template <typename T = float>
FitResult<T> fit(const TrainConfig& cfg, const std::vector<std::string>& docs,
                 const FitOptions& opts = {}) {
  cfg.validate();
  if (opts.resume) {
    const auto info = read_checkpoint_info(*opts.resume);
    const auto data = prepare_corpus(docs, info.config, &info.vocab);
    auto tr = load_checkpoint<T>(*opts.resume, data.rows, cfg);
    const fs::path run_dir = opts.resume->parent_path().parent_path();
    auto log = run(tr, {run_dir});
    return {std::move(tr), std::move(log), run_dir};
  }
  const auto data = prepare_corpus(docs, cfg);
  fs::path run_dir;
  std::optional<Trainer<T>> tr;
  if (opts.num_seeds > 1) {
    tr.emplace(select_seed<T>(cfg, data, opts.num_seeds, std::min(opts.seed_budget,
                                                                   cfg.total_steps)));
  } else {
    tr.emplace(cfg, data.vocab, data.rows);
  }
  if (!opts.out_root.empty()) {
    run_dir = make_run_dir(opts.out_root, tr->config().seed);
    write_run_header(run_dir, tr->config(), data.vocab);
  }
  auto log = run(*tr, {run_dir});
  return {std::move(*tr), std::move(log), run_dir};
}

}  // namespace gqvae::train
