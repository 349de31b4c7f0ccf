#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "gqvae/tokenizer/export_ids.hpp"
#include "gqvae/tokenizer/gq_tokenizer.hpp"
#include "support/stories.hpp"

using namespace gqvae;
using namespace gqvae::tokenizer;
namespace fs = std::filesystem;

namespace {

corpus::CharVocab hello_vocab() {
  return corpus::build_char_vocab(std::vector<std::string>{"helo abc"});
}

/// Codebook of 8 entries where index 7 decodes to `seven` and index 3 to "lo".
TokenDictionary stub_dict(const std::u32string& seven = U"hel") {
  std::vector<std::u32string> entries(8);
  entries[7] = seven;
  entries[3] = U"lo";
  return TokenDictionary(entries, hello_vocab(), 4, std::string(corpus::kGpt2Pattern));
}

/// Tokenizer replaying fixed gates/indices for the word "hello".
class StubTokenizer : public Tokenizer {
 public:
  TokenizedText tokenize(std::string_view text, bool fallback) const override {
    if (text.empty()) return {};
    const std::vector<float> gates = {0, 0, 1, 0, 1};
    const std::vector<std::int32_t> idx = {0, 0, 7, 0, 3};
    auto t = select_tokens(std::span<const float>(gates), std::span<const std::int32_t>(idx), dict);
    return fallback ? apply_fallback(t, corpus::utf8_decode(text), dict) : t;
  }
  std::string detokenize(std::span<const std::int32_t> ids) const override {
    return tokenizer::detokenize(ids, dict);
  }
  std::string token_string(std::int32_t id) const override { return dict.text(id); }
  std::size_t id_space() const override { return dict.id_space(); }
  corpus::UnitMode unit_mode() const override { return corpus::UnitMode::kChar; }
  std::string kind() const override { return "stub"; }
  nlohmann::json describe() const override { return {{"kind", "stub"}}; }

  TokenDictionary dict = stub_dict();
};

TrainConfig tiny_config() {
  TrainConfig c;
  c.d = 8;
  c.codebook_size = 16;
  c.w = 4;
  c.s_max = 6;
  c.enc_layers = 1;
  c.enc_heads = 2;
  c.gater_layers = 1;
  c.gater_heads = 2;
  c.ffn_mult = 2;
  c.warmup_steps = 0;
  return c;
}

std::string story_alphabet() {
  return test_support::StoryGenerator(0).text(4000);
}

std::shared_ptr<model::GqVae<float>> untrained_model(TrainConfig c = tiny_config(),
                                                     std::uint64_t seed = 5) {
  Rng rng(seed);
  const auto vocab = corpus::build_char_vocab(std::vector<std::string>{story_alphabet()});
  return std::make_shared<model::GqVae<float>>(c, vocab, rng);
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("gqvae-tok-" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

// ------------------------------------------------------------- selection

TEST(Tokenize, SelectionRuleOnStub) {
  StubTokenizer stub;
  const auto t = stub.tokenize("hello", false);
  EXPECT_EQ(t.ids, (std::vector<std::int32_t>{7, 3}));
  ASSERT_EQ(t.spans.size(), 2u);
  EXPECT_EQ(t.spans[0], (std::pair<std::size_t, std::size_t>{0, 3}));
  EXPECT_EQ(t.spans[1], (std::pair<std::size_t, std::size_t>{3, 5}));
  EXPECT_EQ(stub.detokenize(t.ids), "hello");
}

TEST(Tokenize, LowGatesGiveOneTokenAtForcedFinalPosition) {
  const auto dict = stub_dict();
  const std::vector<float> gates = {0.1f, 0.4f, 0.0f, 0.49f, 0.2f};
  const std::vector<std::int32_t> idx = {7, 7, 7, 7, 3};
  const auto t = select_tokens(std::span<const float>(gates), std::span<const std::int32_t>(idx), dict);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.ids[0], 3);
  EXPECT_EQ(t.spans[0], (std::pair<std::size_t, std::size_t>{0, 5}));
}

TEST(Tokenize, EmptyTextGivesEmptyResult) {
  auto m = untrained_model();
  GqTokenizer<float> tok(m, extract_dictionary(*m));
  EXPECT_TRUE(tok.tokenize("", false).empty());
  EXPECT_TRUE(tok.tokenize("", true).empty());
}

TEST(Tokenize, UnknownCharacterInStrictModeNamesOffset) {
  auto m = untrained_model();
  GqTokenizer<float> tok(m, extract_dictionary(*m));
  try {
    tok.tokenize("the cat\x01", true);
    FAIL();
  } catch (const corpus::UnknownCharError& e) {
    EXPECT_EQ(e.offset(), 7u);
  }
}

TEST(Detokenize, ConcatenatesAndRejectsUnknownIds) {
  const auto dict = stub_dict();
  EXPECT_EQ(detokenize(std::vector<std::int32_t>{7, 3}, dict), "hello");
  EXPECT_EQ(detokenize(std::vector<std::int32_t>{}, dict), "");
  try {
    detokenize(std::vector<std::int32_t>{999}, dict);
    FAIL();
  } catch (const TokenizerError& e) {
    EXPECT_NE(std::string(e.what()).find("999"), std::string::npos);
  }
}

// -------------------------------------------------------------- fallback

TEST(Fallback, MismatchedTokenIsReplacedByCharacters) {
  StubTokenizer stub;
  stub.dict = stub_dict(U"hal");
  const auto t = stub.tokenize("hello", true);
  const auto& d = stub.dict;
  EXPECT_EQ(t.ids, (std::vector<std::int32_t>{*d.fallback_id(U'h'), *d.fallback_id(U'e'),
                                              *d.fallback_id(U'l'), 3}));
  EXPECT_EQ(t.fallback_flags, (std::vector<std::uint8_t>{1, 1, 1, 0}));
  EXPECT_EQ(stub.detokenize(t.ids), "hello");
}

TEST(Fallback, PerfectTokensAreUnchanged) {
  StubTokenizer stub;
  const auto plain = stub.tokenize("hello", false);
  const auto fb = stub.tokenize("hello", true);
  EXPECT_EQ(plain.ids, fb.ids);
  EXPECT_EQ(plain.spans, fb.spans);
  EXPECT_EQ(fb.fallback_flags, (std::vector<std::uint8_t>{0, 0}));
}

TEST(Fallback, LosslessAndCoveringOnRandomText) {
  auto m = untrained_model();
  GqTokenizer<float> tok(m, extract_dictionary(*m));
  const auto units = m->vocab().units();
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::u32string u;
    const std::size_t n = rng.below(40);
    for (std::size_t i = 0; i < n; ++i) u.push_back(units[rng.below(units.size())]);
    const std::string text = corpus::utf8_encode(u);
    const auto plain = tok.tokenize(text, false);
    const auto fb = tok.tokenize(text, true);
    EXPECT_EQ(tok.detokenize(fb.ids), text);
    EXPECT_GE(fb.size(), plain.size());
    for (const auto* t : {&plain, &fb}) {
      std::size_t pos = 0;
      for (const auto& [b, e] : t->spans) {
        EXPECT_EQ(b, pos);
        EXPECT_GT(e, b);
        pos = e;
      }
      EXPECT_EQ(pos, u.size());
    }
  }
}

TEST(Fallback, StoryParagraphRoundTrips) {
  auto m = untrained_model();
  GqTokenizer<float> tok(m, extract_dictionary(*m));
  const auto text = test_support::StoryGenerator(17).text(3000);
  EXPECT_EQ(tok.detokenize(tok.tokenize(text, true).ids), text);
}

TEST(Tokenize, BatchingAndPaddingDoNotChangeResults) {
  auto m = untrained_model();
  const auto dict = extract_dictionary(*m);
  GqTokenizer<float> a(m, dict);
  GqTokenizer<float> b(m, dict);
  a.inference_batch = 1;
  b.inference_batch = 64;
  const auto docs = test_support::StoryGenerator(4).documents(5, 400);
  const auto ra = a.tokenize_all(docs, false);
  const auto rb = b.tokenize_all(docs, false);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    EXPECT_EQ(ra[d].ids, rb[d].ids);
    EXPECT_EQ(ra[d].spans, rb[d].spans);
  }
  // Padded to S_max vs trimmed to the row length.
  const auto row = m->vocab().encode(std::string_view(" kite"));
  const auto padded = m->infer(corpus::make_batch(std::vector<std::vector<std::int32_t>>{row}, 6, m->vocab().pad_id()));
  const auto trimmed = m->infer(corpus::make_batch(std::vector<std::vector<std::int32_t>>{row}, 5, m->vocab().pad_id()));
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(padded.indices[t], trimmed.indices[t]);
    EXPECT_EQ(padded.gates[t], trimmed.gates[t]);
  }
}

// ------------------------------------------------------------ dictionary

TEST(Dictionary, IndexZeroIsTheLastCharacter) {
  const auto vocab = hello_vocab();
  const std::size_t w = 5, C = vocab.size();
  std::vector<float> logits(w * C, 0.0f);
  const std::u32string word = U"hello";
  for (std::size_t i = 0; i < w; ++i) logits[i * C + *vocab.find(word[w - 1 - i])] = 5.0f;
  const std::vector<float> m_hat = {1, 0.9f, 0.8f, 0.7f, 0.6f};
  EXPECT_EQ(decode_token_string(std::span<const float>(logits), std::span<const float>(m_hat), vocab),
            U"hello");
  const std::vector<float> two = {1, 0.9f, 0.4f, 0.1f, 0.0f};
  EXPECT_EQ(decode_token_string(std::span<const float>(logits), std::span<const float>(two), vocab),
            U"lo");
}

TEST(Dictionary, LengthIsClampedToAtLeastOne) {
  const auto vocab = hello_vocab();
  std::vector<float> logits(3 * vocab.size(), 0.0f);
  logits[*vocab.find(U'e')] = 1.0f;
  const std::vector<float> m_hat = {0.2f, 0.1f, 0.0f};
  EXPECT_EQ(decode_token_string(std::span<const float>(logits), std::span<const float>(m_hat), vocab),
            U"e");
}

TEST(Dictionary, PadPredictionTruncatesString) {
  const auto vocab = hello_vocab();
  const std::size_t C = vocab.size();
  std::vector<float> logits(3 * C, 0.0f);
  logits[0 * C + vocab.pad_id()] = 9.0f;  // row 0: pad wins but is skipped
  logits[0 * C + *vocab.find(U'o')] = 2.0f;
  logits[1 * C + vocab.pad_id()] = 9.0f;  // row 1: pad truncates
  logits[2 * C + *vocab.find(U'h')] = 3.0f;
  const std::vector<float> m_hat = {1, 1, 1};
  std::size_t cut = 0;
  EXPECT_EQ(decode_token_string(std::span<const float>(logits), std::span<const float>(m_hat), vocab,
                                &cut),
            U"o");
  EXPECT_EQ(cut, 1u);
}

TEST(Dictionary, DuplicateStringsShareLowestIndex) {
  std::vector<std::u32string> entries = {U"a", U"the", U"b", U"the"};
  const TokenDictionary d(entries, hello_vocab(), 4, "x");
  EXPECT_EQ(d.canonical_id(1), 1);
  EXPECT_EQ(d.canonical_id(3), 1);
  EXPECT_EQ(d.num_unique_codebook_strings(), 3u);
  EXPECT_LE(d.num_unique_codebook_strings(), d.codebook_size());
  // 'a' and 'b' reuse codebook ids; every other character gets its own id >= |V|.
  EXPECT_EQ(*d.fallback_id(U'a'), 0);
  EXPECT_EQ(*d.fallback_id(U'b'), 2);
  const auto vocab = hello_vocab();
  for (char32_t u : vocab.units()) {
    ASSERT_TRUE(d.fallback_id(u));
    if (u != U'a' && u != U'b') EXPECT_GE(*d.fallback_id(u), 4);
    EXPECT_EQ(d.units(*d.fallback_id(u)), std::u32string(1, u));
  }
}

TEST(Dictionary, ExtractionIsStableAndWellFormed) {
  auto m = untrained_model();
  const auto a = extract_dictionary(*m);
  const auto b = extract_dictionary(*m);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(tokenizer_json(a).dump(), tokenizer_json(b).dump());
  for (std::size_t k = 0; k < a.codebook_size(); ++k) {
    const auto& s = a.units(a.canonical_id(k));
    EXPECT_GE(s.size(), 1u);
    EXPECT_LE(s.size(), m->config().w);
  }
}

// ----------------------------------------------------------- file format

TEST(TokenizerFile, RoundTripPreservesIdsAndTokenization) {
  TempDir dir;
  auto m = untrained_model();
  const auto dict = extract_dictionary(*m);
  const auto path = dir.path / "tok.json";
  export_tokenizer(dict, path, std::string("ckpt/final.ckpt"));
  const auto j = read_json_file(path);
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["model_type"], "wordlevel");
  EXPECT_EQ(j["max_token_len"], m->config().w);
  EXPECT_EQ(j["pretokenizer_regex"], m->config().pre_split_pattern);
  EXPECT_TRUE(j["vocab"].is_object());
  EXPECT_TRUE(j["fallback_chars"].is_object());
  const auto loaded = load_tokenizer(path);
  EXPECT_TRUE(loaded == dict);
  GqTokenizer<float> a(m, dict), b(m, loaded);
  const auto text = test_support::StoryGenerator(23).text(2000);
  EXPECT_EQ(a.tokenize(text, true).ids, b.tokenize(text, true).ids);
  EXPECT_EQ(a.tokenize(text, false).ids, b.tokenize(text, false).ids);
}

TEST(TokenizerFile, DuplicateVocabularyStringIsRefused) {
  std::map<std::u32string, std::int32_t> vocab = {{U"ab", 0}, {U"a", 1}};
  auto d = TokenDictionary::from_parts(vocab, {{U'a', 1}}, {0, 0}, corpus::UnitMode::kChar, 4, "x");
  EXPECT_NO_THROW(tokenizer_json(d));
  // The same string under two ids cannot be written as a string -> id object.
  std::vector<std::u32string> entries = {U"ab", U"c"};
  TokenDictionary ok(entries, hello_vocab(), 4, "x");
  auto j = tokenizer_json(ok);
  j["vocab"]["zz"] = 0;
  EXPECT_THROW(tokenizer_from_json(j), TokenizerError);
}

TEST(TokenizerFile, MalformedFilesNameTheField) {
  std::vector<std::u32string> entries = {U"ab"};
  const auto good = tokenizer_json(TokenDictionary(entries, hello_vocab(), 4, "x"));
  for (const char* field : {"version", "vocab", "fallback_chars", "max_token_len"}) {
    auto j = good;
    j.erase(field);
    try {
      tokenizer_from_json(j);
      FAIL() << field;
    } catch (const TokenizerError& e) {
      EXPECT_NE(std::string(e.what()).find(std::string("/") + field), std::string::npos) << e.what();
    }
  }
  auto j = good;
  j["vocab"]["ab"] = "x";
  EXPECT_THROW(tokenizer_from_json(j), TokenizerError);
}

// ------------------------------------------------------------- id stream

TEST(ExportIds, StubHelloAndEmptyCorpus) {
  TempDir dir;
  StubTokenizer stub;
  const auto info = export_ids({"hello"}, stub, dir.path / "ids.bin");
  EXPECT_EQ(info.num_tokens, 2u);
  EXPECT_DOUBLE_EQ(info.bytes_per_token, 2.5);
  EXPECT_EQ(read_ids(dir.path / "ids.bin"), (std::vector<std::int32_t>{7, 3}));
  const auto side = read_json_file(sidecar_path(dir.path / "ids.bin"));
  EXPECT_EQ(side["num_tokens"], 2);
  EXPECT_EQ(side["vocab_size"], stub.id_space());
  EXPECT_DOUBLE_EQ(side["bytes_per_token"].get<double>(), 2.5);
  const auto empty = export_ids({}, stub, dir.path / "empty.bin");
  EXPECT_EQ(empty.num_tokens, 0u);
  EXPECT_EQ(fs::file_size(dir.path / "empty.bin"), 0u);
}

TEST(ExportIds, RerunIsBitwiseIdentical) {
  TempDir dir;
  auto m = untrained_model();
  GqTokenizer<float> tok(m, extract_dictionary(*m));
  const auto docs = test_support::StoryGenerator(8).documents(3, 500);
  export_ids(docs, tok, dir.path / "a.bin");
  GqTokenizer<float> fresh(m, extract_dictionary(*m));
  export_ids(docs, fresh, dir.path / "b.bin");
  EXPECT_EQ(read_bytes(dir.path / "a.bin"), read_bytes(dir.path / "b.bin"));
  EXPECT_EQ(read_bytes(dir.path / "a.bin.json"), read_bytes(dir.path / "b.bin.json"));
  std::string joined;
  for (const auto& d : docs) joined += d;
  EXPECT_EQ(tok.detokenize(read_ids(dir.path / "a.bin")), joined);
}
