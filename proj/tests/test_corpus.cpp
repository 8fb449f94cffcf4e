#include <set>

#include "doctest.h"
#include "support.hpp"
#include "tryage/corpus.hpp"

using namespace tryage;
using testing::TempDir;

namespace {

std::vector<PromptRecord> records_from(std::initializer_list<const char*> texts) {
  std::vector<PromptRecord> out;
  int i = 0;
  for (const char* t : texts) out.push_back({"p" + std::to_string(i++), t, std::nullopt, {}});
  return out;
}

std::set<std::string> words_of(const std::vector<PromptRecord>& records, const std::string& domain) {
  std::set<std::string> out;
  for (const auto& r : records) {
    if (r.domain == domain) {
      for (auto& t : tokenize(r.text)) out.insert(t);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits punctuation") {
  CHECK(tokenize("The cat.") == std::vector<std::string>{"the", "cat", "."});
  CHECK(tokenize("").empty());
  CHECK(tokenize("x+=1 // inc") == std::vector<std::string>{"x", "+", "=", "1", "/", "/", "inc"});
  CHECK(tokenize("  A\tb\n") == std::vector<std::string>{"a", "b"});
}

TEST_CASE("tokenize_masked keeps the mask symbol whole") {
  CHECK(tokenize_masked("Fill [MASK] here.") == std::vector<std::string>{"fill", "[MASK]", "here", "."});
  CHECK(tokenize_masked("[MASK]") == std::vector<std::string>{"[MASK]"});
}

TEST_CASE("jsonl loading skips blank lines and reports malformed ones") {
  TempDir dir("corpus");
  write_file(dir / "c.jsonl",
             "{\"id\":\"a\",\"text\":\"one two\"}\n"
             "\n"
             "{\"id\":\"b\",\"text\":\"three four\",\"domain\":\"code\"}\n"
             "{\"id\":\"c\",\"text\":\"five\",\"flags\":[\"x\"]}\n");
  const CorpusLoad load = load_corpus(dir / "c.jsonl", CorpusFormat::jsonl);
  REQUIRE(load.records.size() == 3);
  CHECK(load.skipped == 1);
  CHECK(load.records[1].domain == std::optional<std::string>("code"));
  CHECK(load.records[2].raw_flags == std::vector<std::string>{"x"});

  write_file(dir / "bad.jsonl", "{\"id\":\"a\",\"text\":\"ok\"}\nnot json\n");
  const CorpusLoad lenient = load_corpus(dir / "bad.jsonl", CorpusFormat::jsonl);
  CHECK(lenient.records.size() == 1);
  CHECK(lenient.warnings.size() == 1);
  CHECK_THROWS_AS(load_corpus(dir / "bad.jsonl", CorpusFormat::jsonl, {.strict = true}), CorpusError);
}

TEST_CASE("reserved mask symbol in input is rejected in strict mode") {
  TempDir dir("corpus");
  write_file(dir / "m.jsonl", "{\"id\":\"a\",\"text\":\"a [MASK] b\"}\n");
  CHECK(load_corpus(dir / "m.jsonl", CorpusFormat::jsonl).warnings.size() == 1);
  CHECK_THROWS_AS(load_corpus(dir / "m.jsonl", CorpusFormat::jsonl, {.strict = true}), CorpusError);
}

TEST_CASE("directory of labeled text files") {
  TempDir dir("corpus");
  std::filesystem::create_directories(dir / "code");
  std::filesystem::create_directories(dir / "legal");
  write_file(dir / "code/a.txt", "int main");
  write_file(dir / "legal/b.txt", "the court");
  const CorpusLoad load = load_corpus(dir.path(), CorpusFormat::dir_of_labeled_txt);
  REQUIRE(load.records.size() == 2);
  CHECK(load.records[0].domain == std::optional<std::string>("code"));
  CHECK(load.records[1].domain == std::optional<std::string>("legal"));
}

TEST_CASE("10k synthetic lines load as 10k records with unique ids") {
  SynthConfig sc;
  sc.n_domains = 10;
  sc.prompts_per_domain = 1000;
  sc.min_length = 4;
  sc.max_length = 6;
  const auto records = synth_corpus(sc);
  TempDir dir("corpus");
  write_corpus_jsonl(dir / "big.jsonl", records);
  const CorpusLoad load = load_corpus(dir / "big.jsonl", CorpusFormat::jsonl);
  CHECK(load.records.size() == 10000);
  std::set<std::string> ids;
  for (const auto& r : load.records) ids.insert(r.id);
  CHECK(ids.size() == 10000);
}

TEST_CASE("masking") {
  SUBCASE("exhaustive masking of a three-token record") {
    const auto build = make_mlm_instances(records_from({"a b c"}), 3, 1);
    REQUIRE(build.instances.size() == 3);
    std::set<std::size_t> idx;
    for (const auto& inst : build.instances) {
      idx.insert(inst.mask_index);
      CHECK(inst.tokens[inst.mask_index] == kMaskToken);
    }
    CHECK(idx == std::set<std::size_t>{0, 1, 2});
  }
  SUBCASE("single-token record yields nothing") {
    const auto build = make_mlm_instances(records_from({"alone"}), 2, 1);
    CHECK(build.instances.empty());
    CHECK(build.skipped_records == 1);
  }
  SUBCASE("fixed seed is reproducible") {
    const auto recs = records_from({"a b c d e f", "g h i j", "k l m n o"});
    const auto a = make_mlm_instances(recs, 2, 99);
    const auto b = make_mlm_instances(recs, 2, 99);
    REQUIRE(a.instances.size() == b.instances.size());
    for (std::size_t i = 0; i < a.instances.size(); ++i) {
      CHECK(a.instances[i].id() == b.instances[i].id());
      CHECK(a.instances[i].masked_text() == b.instances[i].masked_text());
    }
  }
  SUBCASE("restoring the target reproduces the tokenization") {
    const auto recs = records_from({"The quick, brown fox!", "x+=1 // inc"});
    for (const auto& inst : make_mlm_instances(recs, 4, 5).instances) {
      const auto& src = inst.prompt_id == "p0" ? recs[0] : recs[1];
      CHECK(inst.restored_tokens() == tokenize(src.text));
    }
  }
  SUBCASE("long records are truncated") {
    std::string text;
    for (int i = 0; i < 700; ++i) text += "w" + std::to_string(i) + " ";
    const auto build = make_mlm_instances(records_from({text.c_str()}), 1, 3);
    REQUIRE(build.instances.size() == 1);
    CHECK(build.instances[0].tokens.size() == kMaxSequenceTokens);
  }
  CHECK_THROWS(make_mlm_instances(records_from({"a b"}), 0, 1));
}

TEST_CASE("split by prompt") {
  std::vector<PromptRecord> recs;
  for (int i = 0; i < 10; ++i) recs.push_back({"r" + std::to_string(i), "a b c d", std::nullopt, {}});
  const auto inst = make_mlm_instances(recs, 2, 3).instances;

  auto prompts = [](const std::vector<MlmInstance>& v) {
    std::set<std::string> s;
    for (const auto& i : v) s.insert(i.prompt_id);
    return s;
  };

  const CorpusSplit s = split_corpus(inst, {0.8, 0.1, 0.1}, 11);
  CHECK(prompts(s.train).size() == 8);
  CHECK(prompts(s.val).size() == 1);
  CHECK(prompts(s.test).size() == 1);
  for (const auto& p : prompts(s.val)) CHECK(prompts(s.train).count(p) == 0);
  CHECK(s.train.size() + s.val.size() + s.test.size() == inst.size());

  const CorpusSplit all = split_corpus(inst, {1, 0, 0}, 11);
  CHECK(all.train.size() == inst.size());
  CHECK(all.val.empty());

  CHECK_THROWS(split_corpus(inst, {0.5, 0.2, 0.2}, 1));
  const auto two = make_mlm_instances(records_from({"a b", "c d"}), 1, 1).instances;
  CHECK_THROWS(split_corpus(two, {0.4, 0.3, 0.3}, 1));
}

TEST_CASE("1000 synthetic prompts split identically for a fixed seed") {
  SynthConfig sc;
  sc.n_domains = 4;
  sc.prompts_per_domain = 250;
  sc.min_length = 5;
  sc.max_length = 9;
  const auto recs = synth_corpus(sc);
  const auto inst = make_mlm_instances(recs, 1, 7).instances;
  const CorpusSplit a = split_corpus(inst, {0.8, 0.1, 0.1}, 7);
  const CorpusSplit b = split_corpus(inst, {0.8, 0.1, 0.1}, 7);
  REQUIRE(a.test.size() == b.test.size());
  for (std::size_t i = 0; i < a.test.size(); ++i) CHECK(a.test[i].id() == b.test[i].id());
  CHECK(a.train.size() == 800);
}

TEST_CASE("synthetic overlap extremes") {
  SynthConfig sc;
  sc.n_domains = 3;
  sc.prompts_per_domain = 40;
  sc.min_length = 30;
  sc.max_length = 40;

  sc.overlap = 0.0;
  const auto disjoint = synth_corpus(sc);
  const auto a = words_of(disjoint, "domain0");
  const auto b = words_of(disjoint, "domain1");
  std::vector<std::string> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  CHECK(common.empty());

  sc.overlap = 1.0;
  sc.vocab_size = 30;  // small enough that every walk set covers the shared pool
  const auto same = synth_corpus(sc);
  CHECK(words_of(same, "domain0") == words_of(same, "domain2"));

  sc.overlap = 1.5;
  CHECK_THROWS(synth_corpus(sc));
}

TEST_CASE("default fixture corpus matches the frozen checksum") {
  TempDir dir("corpus");
  write_corpus_jsonl(dir / "corpus.jsonl", synth_corpus(SynthConfig{}));
  const std::string golden = trim(read_file(testing::golden_dir() + "/default_corpus.fnv1a64"));
  CHECK(hex64(file_checksum(dir / "corpus.jsonl")) == golden);
}
