// gqvae: train, inspect and evaluate learned tokenizers.
//
// Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gqvae/baselines/bpe.hpp"
#include "gqvae/core/log.hpp"
#include "gqvae/corpus/reader.hpp"
#include "gqvae/eval/report.hpp"
#include "gqvae/tokenizer/export_ids.hpp"
#include "gqvae/tokenizer/registry.hpp"
#include "gqvae/train/fit.hpp"

namespace fs = std::filesystem;
using namespace gqvae;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct TrainArgs {
  std::string config;
  std::string corpus;
  std::string out = "runs";
  std::string resume;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  std::size_t fixed_k = 0, steps = 0, num_seeds = 1;
  double alpha = 0, beta = 0, gamma = 0;
  bool lines = false;
};

struct TokenizerArgs {
  std::string tokenizer, text, input, ids, out, fallback = "on";
  bool substitute = false;
};

struct EvalArgs {
  std::vector<std::string> tokenizers;
  std::string corpus, out = "report", fallback = "both";
  std::size_t top_n = 0;
  bool lines = false, include_char = false;
};

std::string read_input(const std::string& text, const std::string& input) {
  if (!input.empty()) return input == "-" ? std::string(std::istreambuf_iterator<char>(std::cin), {})
                                          : corpus::read_file(input);
  return text;
}

void write_output(const std::string& out, const std::string& body) {
  if (out.empty() || out == "-") {
    std::cout << body;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw IoError("cannot write '" + out + "'");
  f << body;
  if (!f) throw IoError("failed writing '" + out + "'");
}

corpus::UnknownPolicy policy(bool substitute) {
  return substitute ? corpus::UnknownPolicy::kSubstitute : corpus::UnknownPolicy::kStrict;
}

int run_train(const TrainArgs& a, const CLI::App& cmd) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (cmd.count("--seed")) cfg.seed = a.seed;
  if (cmd.count("--fixed-k")) cfg.fixed_k = a.fixed_k;
  if (cmd.count("--alpha")) cfg.alpha = a.alpha;
  if (cmd.count("--beta")) cfg.beta = a.beta;
  if (cmd.count("--gamma")) cfg.gamma = a.gamma;
  if (cmd.count("--steps")) cfg.total_steps = a.steps;
  cfg.validate();
  const auto docs = corpus::read_corpus(a.corpus, a.lines);
  train::FitOptions opts;
  opts.out_root = a.out;
  opts.num_seeds = a.num_seeds;
  if (!a.resume.empty()) opts.resume = fs::path(a.resume);
  const auto result = train::fit<float>(cfg, docs, opts);
  std::cout << result.run_dir.string() << '\n';
  return kOk;
}

int run_export(const std::string& checkpoint, const std::string& out) {
  const auto m = train::load_model<float>(checkpoint);
  const auto dict = tokenizer::extract_dictionary(m);
  const fs::path path = out.empty() ? fs::path(checkpoint).replace_extension(".tokenizer.json") : fs::path(out);
  tokenizer::export_tokenizer(dict, path, tokenizer::checkpoint_reference(checkpoint, path));
  log::info("dictionary: " + std::to_string(dict.num_unique_codebook_strings()) + " distinct strings over " +
            std::to_string(dict.codebook_size()) + " codebook entries");
  std::cout << path.string() << '\n';
  return kOk;
}

int run_dict(const std::string& source, const std::string& out) {
  // Accepts a checkpoint or an exported tokenizer file.
  std::optional<tokenizer::TokenDictionary> dict;
  if (source.size() > 5 && source.substr(source.size() - 5) == ".json") {
    dict = tokenizer::load_tokenizer(source);
  } else {
    dict = tokenizer::extract_dictionary(train::load_model<float>(source));
  }
  std::ostringstream s;
  s << "codebook_index\tid\ttoken\n";
  for (std::size_t k = 0; k < dict->codebook_size(); ++k) {
    const auto id = dict->canonical_id(k);
    s << k << '\t' << id << '\t' << nlohmann::json(dict->text(id)).dump() << '\n';
  }
  write_output(out, s.str());
  return kOk;
}

int run_tokenize(const TokenizerArgs& a) {
  const auto loaded = tokenizer::load_any_tokenizer(a.tokenizer, policy(a.substitute));
  const auto mode = eval::fallback_mode_from_string(a.fallback);
  if (mode == eval::FallbackMode::kBoth) throw ConfigError("tokenize takes --fallback on or off");
  const auto text = read_input(a.text, a.input);
  const auto t = loaded.require_model().tokenize(text, mode == eval::FallbackMode::kOn);
  std::ostringstream s;
  for (std::size_t i = 0; i < t.ids.size(); ++i) s << (i ? " " : "") << t.ids[i];
  s << '\n';
  write_output(a.out, s.str());
  return kOk;
}

int run_detokenize(const TokenizerArgs& a) {
  const auto loaded = tokenizer::load_any_tokenizer(a.tokenizer);
  std::istringstream in(read_input(a.ids, a.input));
  std::vector<std::int32_t> ids;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      ids.push_back(static_cast<std::int32_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("token id '" + tok + "' is not an integer");
    }
  }
  write_output(a.out, loaded.detokenize(ids));
  return kOk;
}

int run_bpe_train(const std::string& corpus_path, std::size_t vocab_size, const std::string& out, bool lines,
                  const std::string& unit_mode) {
  const auto docs = corpus::read_corpus(corpus_path, lines);
  const auto m = baselines::bpe_train(docs, vocab_size, corpus::unit_mode_from_string(unit_mode));
  baselines::export_bpe(m, out);
  log::info("bpe: " + std::to_string(m.merges.size()) + " merges, vocabulary " + std::to_string(m.vocab_size()));
  std::cout << out << '\n';
  return kOk;
}

int run_eval(const EvalArgs& a) {
  const auto mode = eval::fallback_mode_from_string(a.fallback);
  const auto docs = corpus::read_corpus(a.corpus, a.lines);
  std::vector<tokenizer::LoadedTokenizer> loaded;
  for (const auto& p : a.tokenizers) loaded.push_back(tokenizer::load_any_tokenizer(p));
  std::optional<eval::CharTokenizer> chars;
  std::vector<eval::NamedTokenizer> named;
  for (const auto& l : loaded) {
    named.push_back({fs::path(l.file).stem().string(), &l.require_model(), l.file});
  }
  if (a.include_char) {
    chars.emplace(corpus::build_char_vocab(docs));
    named.push_back({"char", &*chars, std::nullopt});
  }
  if (named.empty()) throw ConfigError("eval needs at least one --tokenizer or --include-char");
  const auto report = eval::compare_report(docs, named, mode);
  eval::write_report(report, a.out);
  for (const auto& r : report["tokenizers"]) {
    auto num = [&](const char* k) {
      return r[k].is_null() ? std::string("-") : std::to_string(r[k].get<double>());
    };
    std::cout << r["name"].get<std::string>() << ": bytes/token " << num("bytes_per_token_no_fallback")
              << " (no fallback) " << num("bytes_per_token_with_fallback") << " (fallback), bits/byte "
              << num("bits_per_byte") << ", accuracy " << num("reconstruction_char_accuracy")
              << ", used vocab " << r["used_vocab_size"].get<std::size_t>() << '\n';
  }
  if (a.top_n > 0) {
    for (const auto& t : named) {
      const auto path = a.out + ".hist." + t.name + ".csv";
      std::ofstream f(path);
      if (!f) throw IoError("cannot write '" + path + "'");
      eval::write_histogram_csv(f, eval::token_histogram(docs, *t.tokenizer, a.top_n));
    }
  }
  return kOk;
}

int run_export_ids(const std::string& tok_path, const std::string& corpus_path, const std::string& out,
                   bool lines) {
  const auto loaded = tokenizer::load_any_tokenizer(tok_path);
  const auto docs = corpus::read_corpus(corpus_path, lines);
  const auto info = tokenizer::export_ids(docs, loaded.require_model(), out);
  std::cout << info.to_json().dump() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gqvae: learned variable-length tokenizers"};
  app.require_subcommand(1);
  app.fallthrough(false);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  train->add_option("--config", ta.config, "Config file (key=value lines or JSON)")->check(CLI::ExistingFile);
  train->add_option("--corpus", ta.corpus, "Corpus file or directory")->required();
  train->add_option("--out", ta.out, "Parent directory of the run directory")->capture_default_str();
  train->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--set", ta.sets, "Override any config field, key=value (repeatable)");
  train->add_option("--seed", ta.seed, "Random seed");
  train->add_option("--fixed-k", ta.fixed_k, "Train the fixed-length baseline with period k");
  train->add_option("--alpha", ta.alpha, "Compression loss weight");
  train->add_option("--beta", ta.beta, "Commitment loss weight");
  train->add_option("--gamma", ta.gamma, "Length loss weight");
  train->add_option("--steps", ta.steps, "Total optimizer steps");
  train->add_option("--num-seeds", ta.num_seeds, "Train this many seeds briefly and keep the best")
      ->capture_default_str();
  train->add_flag("--lines", ta.lines, "Treat every non-empty line as a document");

  std::string ckpt, export_out;
  auto* exp = app.add_subcommand("export", "Extract the dictionary of a checkpoint into a tokenizer file");
  exp->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", export_out, "Tokenizer file (default: next to the checkpoint)");

  std::string dict_source, dict_out;
  auto* dict = app.add_subcommand("dict", "List codebook entries and their token strings");
  dict->add_option("--tokenizer,--checkpoint", dict_source, "Tokenizer file or checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  dict->add_option("--out", dict_out, "Output file (default: standard output)");

  TokenizerArgs tk;
  auto* tok = app.add_subcommand("tokenize", "Print token ids of a text");
  tok->add_option("--tokenizer", tk.tokenizer, "Tokenizer file")->required()->check(CLI::ExistingFile);
  auto* text_opt = tok->add_option("--text", tk.text, "Text to tokenize");
  tok->add_option("--input", tk.input, "File to tokenize ('-' for standard input)")->excludes(text_opt);
  tok->add_option("--fallback", tk.fallback, "Lossless character fallback: on or off")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  tok->add_flag("--substitute-unknown", tk.substitute, "Replace unknown characters instead of failing");
  tok->add_option("--out", tk.out, "Output file (default: standard output)");

  TokenizerArgs dt;
  auto* detok = app.add_subcommand("detokenize", "Print the text of space-separated token ids");
  detok->add_option("--tokenizer", dt.tokenizer, "Tokenizer file")->required()->check(CLI::ExistingFile);
  auto* ids_opt = detok->add_option("--ids", dt.ids, "Space-separated token ids");
  detok->add_option("--input", dt.input, "File of ids ('-' for standard input)")->excludes(ids_opt);
  detok->add_option("--out", dt.out, "Output file (default: standard output)");

  std::string bpe_corpus, bpe_out = "bpe.json", bpe_mode = "char";
  std::size_t bpe_vocab = 0;
  bool bpe_lines = false;
  auto* bpe = app.add_subcommand("bpe-train", "Train a BPE baseline");
  bpe->add_option("--corpus", bpe_corpus, "Corpus file or directory")->required();
  bpe->add_option("--vocab-size", bpe_vocab, "Target vocabulary size")->required();
  bpe->add_option("--out", bpe_out, "Tokenizer file")->capture_default_str();
  bpe->add_option("--unit-mode", bpe_mode, "char or byte")->check(CLI::IsMember({"char", "byte"}))->capture_default_str();
  bpe->add_flag("--lines", bpe_lines, "Treat every non-empty line as a document");

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "Compare tokenizers on a corpus");
  evc->add_option("--tokenizer", ev.tokenizers, "Tokenizer file (repeatable)")->check(CLI::ExistingFile);
  evc->add_option("--corpus", ev.corpus, "Corpus file or directory")->required();
  evc->add_option("--out", ev.out, "Report path stem; writes <stem>.json and <stem>.csv")->capture_default_str();
  evc->add_option("--fallback", ev.fallback, "Bytes/token columns: on, off or both")
      ->check(CLI::IsMember({"on", "off", "both"}))
      ->capture_default_str();
  evc->add_option("--top-n", ev.top_n, "Also write token histograms of the top N strings");
  evc->add_flag("--include-char", ev.include_char, "Add a character-level tokenizer");
  evc->add_flag("--lines", ev.lines, "Treat every non-empty line as a document");

  std::string ids_tok, ids_corpus, ids_out = "ids.bin";
  bool ids_lines = false;
  auto* eids = app.add_subcommand("export-ids", "Write lossless token ids of a corpus as int32");
  eids->add_option("--tokenizer", ids_tok, "Tokenizer file")->required()->check(CLI::ExistingFile);
  eids->add_option("--corpus", ids_corpus, "Corpus file or directory")->required();
  eids->add_option("--out", ids_out, "Id stream; a .json summary is written beside it")->capture_default_str();
  eids->add_flag("--lines", ids_lines, "Treat every non-empty line as a document");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (app.get_subcommands().empty()) std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*train) return run_train(ta, *train);
    if (*exp) return run_export(ckpt, export_out);
    if (*dict) return run_dict(dict_source, dict_out);
    if (*tok) return run_tokenize(tk);
    if (*detok) return run_detokenize(dt);
    if (*bpe) return run_bpe_train(bpe_corpus, bpe_vocab, bpe_out, bpe_lines, bpe_mode);
    if (*evc) return run_eval(ev);
    if (*eids) return run_export_ids(ids_tok, ids_corpus, ids_out, ids_lines);
  } catch (const ConfigError& e) {
    log::error(e.what());
    return kUsage;
  } catch (const std::exception& e) {
    log::error(e.what());
    return kRuntime;
  }
  return kUsage;
}
