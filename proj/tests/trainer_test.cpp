#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "gqvae/train/fit.hpp"
#include "support/stories.hpp"

using namespace gqvae;
using namespace gqvae::train;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.d = 16;
  c.codebook_size = 32;
  c.w = 4;
  c.s_max = 8;
  c.enc_layers = 1;
  c.enc_heads = 2;
  c.gater_layers = 1;
  c.gater_heads = 2;
  c.ffn_mult = 2;
  c.batch_size = 8;
  c.warmup_steps = 3;
  c.cache_capacity = 32;
  c.cache_per_step = 8;
  c.resample_interval = 2;
  c.total_steps = 6;
  c.log_interval = 2;
  c.checkpoint_interval = 3;
  c.seed = 11;
  return c;
}

std::vector<std::string> small_corpus() {
  return test_support::StoryGenerator(3).documents(4, 600);
}

Trainer<float> make_trainer(const TrainConfig& c) {
  const auto data = prepare_corpus(small_corpus(), c);
  return Trainer<float>(c, data.vocab, data.rows);
}

bool same_params(const Trainer<float>& a, const Trainer<float>& b) {
  for (std::size_t i = 0; i < a.model().params().size(); ++i) {
    if (a.model().params()[i].value.storage() != b.model().params()[i].value.storage()) {
      return false;
    }
  }
  return true;
}

bool same_loss(const LossBreakdown& a, const LossBreakdown& b) {
  return a.recon == b.recon && a.compression == b.compression && a.length == b.length &&
         a.codebook == b.codebook && a.commitment == b.commitment && a.total == b.total;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("gqvae-trainer-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
            "-" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(TrainStep, ZeroLearningRateLeavesParametersBitwiseUnchanged) {
  auto c = small_config();
  c.lr = 0;
  c.warmup_steps = 0;
  c.resample_interval = 1000;
  auto tr = make_trainer(c);
  std::vector<std::vector<float>> all;
  for (const auto& p : tr.model().params()) all.push_back(p.value.to_vector());
  const auto r = tr.step();
  EXPECT_TRUE(std::isfinite(r.loss.total));
  EXPECT_GT(r.loss.total, 0);
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(tr.model().params()[i].value.to_vector(), all[i]) << tr.model().params()[i].name;
  }
}

TEST(TrainStep, IdenticalStateAndBatchGiveIdenticalBreakdown) {
  const auto c = small_config();
  auto a = make_trainer(c);
  auto b = make_trainer(c);
  for (int i = 0; i < 5; ++i) {
    const auto ra = a.step();
    const auto rb = b.step();
    EXPECT_TRUE(same_loss(ra.loss, rb.loss)) << "step " << i;
    EXPECT_EQ(ra.gate_mean, rb.gate_mean);
  }
  EXPECT_TRUE(same_params(a, b));
}

TEST(TrainStep, LossBreakdownMatchesWeights) {
  auto tr = make_trainer(small_config());
  const auto r = tr.step();
  const auto& l = r.loss;
  const auto& c = tr.config();
  EXPECT_NEAR(l.total,
              l.recon + c.gamma * l.length + c.alpha * l.compression + l.codebook +
                  c.beta * l.commitment,
              1e-9 * std::abs(l.total));
  EXPECT_GE(r.gate_mean, 0.0);
  EXPECT_LE(r.gate_mean, 1.0);
  EXPECT_EQ(r.step, 1u);
}

TEST(TrainStep, MetricsRecordHasAllFields) {
  auto tr = make_trainer(small_config());
  const auto j = tr.step().to_json();
  for (const char* k : {"step", "recon", "cmp", "len", "cde", "cmt", "total", "gate_mean",
                        "codebook_perplexity"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
}

TEST(TrainStep, ResampledRowsHaveFreshMoments) {
  auto c = small_config();
  c.warmup_steps = 0;
  c.resample_interval = 1;
  c.dead_code_threshold = 1e9;  // every entry counts as dead
  auto tr = make_trainer(c);
  tr.step();
  const auto r = tr.step();
  ASSERT_FALSE(r.maintenance.resampled.empty());
  const auto& m = tr.optimizer().first_moments()[tr.model().codebook_param()];
  const std::size_t d = c.d;
  for (auto row : r.maintenance.resampled) {
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(m[row * d + j], 0.0f);
  }
}

TEST(Clipping, NeverIncreasesNormAndLeavesSmallGradients) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    nn::ParameterStore<double> store;
    store.add("a", nn::Array<double>(nn::Shape{3, 2}), true);
    store.add("b", nn::Array<double>(nn::Shape{4}), false);
    const double scale = trial % 2 ? 0.01 : 10.0;
    for (auto& p : store) {
      for (auto& g : p.grad.storage()) g = rng.normal() * scale;
    }
    std::vector<std::vector<double>> before;
    for (const auto& p : store) before.push_back(p.grad.to_vector());
    const double pre = clip_grad_norm(store, 1.0);
    double post = 0;
    for (const auto& p : store) {
      for (double g : p.grad.storage()) post += g * g;
    }
    post = std::sqrt(post);
    EXPECT_LE(post, pre * (1 + 1e-12));
    EXPECT_LE(post, 1.0 + 1e-12);
    if (pre <= 1.0) {
      for (std::size_t i = 0; i < store.size(); ++i) EXPECT_EQ(store[i].grad.to_vector(), before[i]);
    }
  }
}

TEST(Checkpoint, RoundTripReproducesNextSteps) {
  TempDir dir;
  const auto c = small_config();
  const auto data = prepare_corpus(small_corpus(), c);
  Trainer<float> a(c, data.vocab, data.rows);
  for (int i = 0; i < 4; ++i) a.step();
  const auto path = dir.path / "x.ckpt";
  save_checkpoint(a, path);
  auto b = load_checkpoint<float>(path, data.rows);
  EXPECT_EQ(b.steps_done(), 4u);
  EXPECT_EQ(b.best_loss(), a.best_loss());
  EXPECT_TRUE(b.rng() == a.rng());
  EXPECT_TRUE(same_params(a, b));
  for (int i = 0; i < 3; ++i) {
    const auto ra = a.step();
    const auto rb = b.step();
    EXPECT_TRUE(same_loss(ra.loss, rb.loss)) << "step " << ra.step;
  }
  EXPECT_TRUE(same_params(a, b));
  EXPECT_EQ(a.model().codebook().usage, b.model().codebook().usage);
}

TEST(Checkpoint, InferenceModelMatchesTrainer) {
  TempDir dir;
  const auto c = small_config();
  const auto data = prepare_corpus(small_corpus(), c);
  Trainer<float> a(c, data.vocab, data.rows);
  for (int i = 0; i < 5; ++i) a.step();
  const auto path = dir.path / "m.ckpt";
  save_checkpoint(a, path);
  const auto m = load_model<float>(path);
  ASSERT_EQ(m.params().size(), a.model().params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_EQ(m.params()[i].value.to_vector(), a.model().params()[i].value.to_vector());
  }
  EXPECT_EQ(m.codebook().usage, a.model().codebook().usage);
  const auto batch = corpus::make_batch(std::span(data.rows).first(3), c.s_max, data.vocab.pad_id());
  EXPECT_EQ(m.infer(batch).indices, a.model().infer(batch).indices);
  EXPECT_THROW(load_model<double>(path), VersionError);
}

TEST(Checkpoint, TruncatedFileIsCorruption) {
  TempDir dir;
  auto tr = make_trainer(small_config());
  tr.step();
  const auto path = dir.path / "t.ckpt";
  save_checkpoint(tr, path);
  const auto size = fs::file_size(path);
  for (auto keep : {size - 1, size / 2, std::uintmax_t{20}, std::uintmax_t{3}}) {
    const auto cut = dir.path / "cut.ckpt";
    fs::copy_file(path, cut, fs::copy_options::overwrite_existing);
    fs::resize_file(cut, keep);
    EXPECT_THROW(load_checkpoint<float>(cut, {{0, 1}}), CorruptionError) << keep;
  }
}

TEST(Checkpoint, FlippedByteIsCorruption) {
  TempDir dir;
  auto tr = make_trainer(small_config());
  const auto path = dir.path / "f.ckpt";
  save_checkpoint(tr, path);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  const auto mid = static_cast<std::streamoff>(fs::file_size(path) / 2);
  f.seekg(mid);
  const char byte = static_cast<char>(f.get());
  f.seekp(mid);
  f.put(static_cast<char>(~byte));
  f.close();
  try {
    load_checkpoint<float>(path, {{0, 1}});
    FAIL();
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, MismatchedConfigHashIsVersionError) {
  TempDir dir;
  const auto c = small_config();
  const auto data = prepare_corpus(small_corpus(), c);
  Trainer<float> tr(c, data.vocab, data.rows);
  const auto path = dir.path / "h.ckpt";
  save_checkpoint(tr, path);
  auto other = c;
  other.alpha = 0.5;
  try {
    load_checkpoint<float>(path, data.rows, other);
    FAIL();
  } catch (const VersionError& e) {
    EXPECT_NE(std::string(e.what()).find("config_hash"), std::string::npos);
  }
  auto longer = c;
  longer.total_steps = 100;
  EXPECT_NO_THROW(load_checkpoint<float>(path, data.rows, longer));
  EXPECT_THROW(load_checkpoint<double>(path, data.rows), VersionError);
}

TEST(Fit, ZeroStepsReturnsInitialModelAndEmptyLog) {
  auto c = small_config();
  c.total_steps = 0;
  const auto res = fit<float>(c, small_corpus());
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(res.trainer.steps_done(), 0u);
  const auto fresh = make_trainer(c);
  EXPECT_TRUE(same_params(res.trainer, fresh));
}

TEST(Fit, WritesRunDirectoryMetricsAndCheckpoints) {
  TempDir dir;
  const auto c = small_config();
  const auto res = fit<float>(c, small_corpus(), {dir.path});
  EXPECT_EQ(res.run_dir.parent_path(), dir.path);
  EXPECT_EQ(res.run_dir.filename().string().rfind("seed-11-", 0), 0u);
  const auto lines = read_lines(res.run_dir / "metrics.jsonl");
  ASSERT_EQ(lines.size(), 3u);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    EXPECT_EQ(nlohmann::json::parse(lines[i])["step"], 2 * (i + 1));
  }
  EXPECT_TRUE(fs::exists(checkpoint_path(res.run_dir, 3)));
  EXPECT_TRUE(fs::exists(final_checkpoint_path(res.run_dir)));
  EXPECT_TRUE(fs::exists(res.run_dir / "config.json"));
  EXPECT_EQ(read_checkpoint_info(final_checkpoint_path(res.run_dir)).step, 6u);
}

TEST(Fit, ResumedRunContinuesMetricsFromSavedStep) {
  TempDir dir;
  const auto c = small_config();
  const auto full = fit<float>(c, small_corpus(), {dir.path / "full"});
  const auto full_lines = read_lines(full.run_dir / "metrics.jsonl");

  // Interrupted after step 3: the metric line for step 4 was written past the checkpoint.
  auto partial_cfg = c;
  partial_cfg.total_steps = 4;
  const auto partial = fit<float>(partial_cfg, small_corpus(), {dir.path / "part"});
  ASSERT_EQ(read_lines(partial.run_dir / "metrics.jsonl").size(), 2u);
  FitOptions resume;
  resume.resume = checkpoint_path(partial.run_dir, 3);
  const auto resumed = fit<float>(c, small_corpus(), resume);
  EXPECT_EQ(resumed.run_dir, partial.run_dir);
  EXPECT_EQ(read_lines(partial.run_dir / "metrics.jsonl"), full_lines);
  EXPECT_TRUE(same_params(resumed.trainer, full.trainer));
}

TEST(Fit, RepeatedRunsAreIdentical) {
  const auto c = small_config();
  const auto a = fit<float>(c, small_corpus());
  const auto b = fit<float>(c, small_corpus());
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].to_json().dump(), b.log[i].to_json().dump());
  }
  EXPECT_TRUE(same_params(a.trainer, b.trainer));
}

TEST(Fit, MultiSeedPicksOneOfTheCandidates) {
  auto c = small_config();
  FitOptions o;
  o.num_seeds = 3;
  o.seed_budget = 2;
  const auto res = fit<float>(c, small_corpus(), o);
  EXPECT_GE(res.trainer.config().seed, 11u);
  EXPECT_LE(res.trainer.config().seed, 13u);
  EXPECT_EQ(res.trainer.steps_done(), c.total_steps);
}

TEST(Fit, NonFiniteLossNamesComponentAndStep) {
  auto c = small_config();
  c.lr = 1e30;
  c.clip_norm = 1e30;
  c.weight_decay = 0;
  auto tr = make_trainer(c);
  try {
    for (int i = 0; i < 20; ++i) tr.step();
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("at step"), std::string::npos) << msg;
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
  }
}
