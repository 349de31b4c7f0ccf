#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "support/stories.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

/// Runs the binary with `args` and shell `redirect`, capturing standard output.
Result cli(const std::string& args, const std::string& redirect = "2>/dev/null") {
  const std::string cmd = std::string(GQVAE_CLI_PATH) + " " + args + " " + redirect;
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

Result cli_stderr(const std::string& args) {
  return cli(args, "2>&1 1>/dev/null");
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("gqvae-cli-test-" + std::to_string(getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_ / "data");
    gqvae::test_support::StoryGenerator gen(5);
    int i = 0;
    for (const auto& d : gen.documents(3, 4000)) std::ofstream(dir_ / "data" / ("d" + std::to_string(i++) + ".txt")) << d;
    std::ofstream(dir_ / "run.cfg") << "d=16\ncodebook_size=32\nw=4\nenc_layers=1\ngater_layers=1\n"
                                       "enc_heads=2\ngater_heads=2\ntotal_steps=20\nbatch_size=4\n";
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string p(const std::string& rel) { return (dir_ / rel).string(); }

  /// Trains into `out` and exports a tokenizer to `tok`.
  static void train_and_export(const std::string& out, const std::string& tok, const std::string& extra = "") {
    const auto t = cli("train --config " + p("run.cfg") + " --corpus " + p("data") + " --out " + p(out) +
                       " --seed 4 " + extra);
    ASSERT_EQ(t.code, 0);
    const std::string run = t.out.substr(0, t.out.find('\n'));
    ASSERT_TRUE(fs::exists(fs::path(run) / "metrics.jsonl"));
    ASSERT_EQ(cli("export --checkpoint " + run + "/checkpoints/final.ckpt --out " + p(tok)).code, 0);
  }

  static inline fs::path dir_;
};

std::string slurp(const fs::path& f) {
  std::ifstream in(f, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  const auto bogus = cli_stderr("bogus");
  EXPECT_EQ(bogus.code, 2);
  EXPECT_NE(bogus.out.find("Subcommands"), std::string::npos);
  EXPECT_EQ(cli("train --corpus " + p("data") + " --alpha abc").code, 2);
  EXPECT_EQ(cli("train --corpus " + p("data") + " --set nosuch=1").code, 2);
  EXPECT_EQ(cli("eval --corpus " + p("data") + " --fallback maybe").code, 2);
}

TEST_F(Cli, HelpOnEverySubcommandExitsZeroAndListsFlags) {
  EXPECT_EQ(cli("--help").code, 0);
  for (const char* sub : {"train", "tokenize", "detokenize", "export", "dict", "bpe-train", "eval", "export-ids"}) {
    const auto r = cli(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--help"), std::string::npos) << sub;
  }
  const auto train = cli("train --help").out;
  for (const char* flag : {"--config", "--corpus", "--out", "--seed", "--fixed-k", "--alpha", "--beta", "--gamma"}) {
    EXPECT_NE(train.find(flag), std::string::npos) << flag;
  }
  const auto eval = cli("eval --help").out;
  for (const char* flag : {"--tokenizer", "--fallback", "--top-n"}) EXPECT_NE(eval.find(flag), std::string::npos);
  EXPECT_NE(cli("bpe-train --help").out.find("--vocab-size"), std::string::npos);
}

TEST_F(Cli, PipelineTrainExportTokenizeEval) {
  train_and_export("runs", "tok.json");
  const auto ids = cli("tokenize --tokenizer " + p("tok.json") + " --text \"Once upon a time\"");
  ASSERT_EQ(ids.code, 0);
  EXPECT_NE(ids.out.find(' '), std::string::npos);
  for (char c : ids.out) EXPECT_TRUE(std::isdigit(static_cast<unsigned char>(c)) || c == ' ' || c == '\n');
  std::string id_line = ids.out.substr(0, ids.out.find('\n'));
  const auto text = cli("detokenize --tokenizer " + p("tok.json") + " --ids \"" + id_line + "\"");
  EXPECT_EQ(text.code, 0);
  EXPECT_EQ(text.out, "Once upon a time");

  const auto dict = cli("dict --tokenizer " + p("tok.json"));
  EXPECT_EQ(dict.code, 0);
  EXPECT_EQ(std::count(dict.out.begin(), dict.out.end(), '\n'), 33);

  ASSERT_EQ(cli("bpe-train --corpus " + p("data") + " --vocab-size 90 --out " + p("bpe.json")).code, 0);
  const auto ev = cli("eval --tokenizer " + p("tok.json") + " --tokenizer " + p("bpe.json") + " --corpus " +
                      p("data") + " --fallback both --top-n 5 --out " + p("rep/report"));
  ASSERT_EQ(ev.code, 0);
  EXPECT_EQ(std::count(ev.out.begin(), ev.out.end(), '\n'), 2);
  const auto report = nlohmann::json::parse(slurp(dir_ / "rep" / "report.json"));
  ASSERT_EQ(report["tokenizers"].size(), 2u);
  for (const auto& r : report["tokenizers"]) {
    EXPECT_FALSE(r["bytes_per_token_no_fallback"].is_null());
    EXPECT_FALSE(r["bytes_per_token_with_fallback"].is_null());
  }
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "report.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "report.hist.bpe.csv"));

  ASSERT_EQ(cli("export-ids --tokenizer " + p("bpe.json") + " --corpus " + p("data") + " --out " + p("ids.bin")).code, 0);
  EXPECT_GT(fs::file_size(dir_ / "ids.bin"), 0u);
  EXPECT_EQ(fs::file_size(dir_ / "ids.bin") % 4, 0u);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  EXPECT_EQ(cli("eval --tokenizer " + p("run.cfg") + " --corpus " + p("nope")).code, 1);
  EXPECT_EQ(cli("bpe-train --corpus " + p("nope") + " --vocab-size 50").code, 1);
  const auto missing = cli_stderr("bpe-train --corpus " + p("nope") + " --vocab-size 50");
  EXPECT_NE(missing.out.find("nope"), std::string::npos);
  ASSERT_EQ(cli("bpe-train --corpus " + p("data") + " --vocab-size 60 --out " + p("b2.json")).code, 0);
  EXPECT_EQ(cli("tokenize --tokenizer " + p("b2.json") + " --text \"\xe2\x82\xac\"").code, 1);
  EXPECT_EQ(cli("tokenize --tokenizer " + p("b2.json") + " --substitute-unknown --text \"\xe2\x82\xac\"").code, 0);
}

TEST_F(Cli, ExplicitFlagsOverrideConfigAndRunsAreDeterministic) {
  train_and_export("det-a", "a.json", "--alpha 0.3");
  train_and_export("det-b", "b.json", "--alpha 0.3");
  EXPECT_EQ(slurp(dir_ / "a.json").substr(slurp(dir_ / "a.json").find("\"codebook_ids\"")),
            slurp(dir_ / "b.json").substr(slurp(dir_ / "b.json").find("\"codebook_ids\"")));
  const auto only_run = [](const fs::path& root) { return fs::directory_iterator(root)->path(); };
  EXPECT_EQ(slurp(only_run(dir_ / "det-a") / "metrics.jsonl"), slurp(only_run(dir_ / "det-b") / "metrics.jsonl"));
  for (const auto& run : fs::directory_iterator(dir_ / "det-a")) {
    const auto cfg = nlohmann::json::parse(slurp(run.path() / "config.json"));
    EXPECT_DOUBLE_EQ(cfg["alpha"].get<double>(), 0.3);
    EXPECT_EQ(cfg["d"], 16);
    EXPECT_EQ(cfg["seed"], 4);
  }
}
