#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support.hpp"
#include "tryage/experts.hpp"

using namespace tryage;
using testing::TempDir;

namespace {

MlmInstance masked(const std::string& text, std::size_t index) {
  MlmInstance inst;
  inst.prompt_id = "t";
  inst.tokens = tokenize(text);
  inst.target = inst.tokens.at(index);
  inst.tokens[index] = std::string(kMaskToken);
  inst.mask_index = index;
  return inst;
}

NgramExpert trained(std::vector<std::string> texts, int order, double alpha, const std::string& id = "e") {
  return train_ngram_expert(texts, testing::spec(id, 1), order, alpha);
}

double sum_of(const TokenDistribution& d) {
  double s = 0.0;
  for (const auto& [t, p] : d) s += p;
  return s;
}

}  // namespace

TEST_CASE("symmetric counts give equal probabilities as alpha vanishes") {
  const NgramExpert uni = trained({"a b a b"}, 1, 1e-9);
  CHECK(uni.unigram_probability("a") == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(uni.unigram_probability("b") == doctest::Approx(0.5).epsilon(1e-6));

  const NgramExpert bi = trained({"a b a c"}, 2, 1e-9);
  CHECK(bi.probability("a", "b") == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(bi.probability("a", "c") == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("hand-computed smoothed probabilities with alpha 1") {
  // "a b a c": unigram counts a=2 b=1 c=1, N=4, |V|=3, k=4.
  // Bigram counts: <s>->a, a->b, b->a, a->c.
  const NgramExpert e = trained({"a b a c"}, 2, 1.0);
  CHECK(e.unigram_probability("a") == doctest::Approx(3.0 / 8.0).epsilon(1e-12));
  CHECK(e.unigram_probability("b") == doctest::Approx(2.0 / 8.0).epsilon(1e-12));
  CHECK(e.unigram_probability("<unk>") == doctest::Approx(1.0 / 8.0).epsilon(1e-12));
  // P(b|a) = (1 + 4 * 2/8) / (2 + 4) = 1/3
  CHECK(e.probability("a", "b") == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  // P(a|a) = (0 + 4 * 3/8) / 6 = 1/4
  CHECK(e.probability("a", "a") == doctest::Approx(0.25).epsilon(1e-12));
  // P(<unk>|a) = (4 * 1/8) / 6 = 1/12
  CHECK(e.probability("a", "<unk>") == doctest::Approx(1.0 / 12.0).epsilon(1e-12));
  // Unseen context backs off to the unigram.
  CHECK(e.probability("c", "a") == doctest::Approx(3.0 / 8.0).epsilon(1e-12));

  const MlmInstance inst = masked("a b", 1);
  CHECK(e.loss(inst) == doctest::Approx(-std::log(1.0 / 3.0)).epsilon(1e-12));
  const MlmInstance start = masked("a b", 0);
  // P(a|<s>) = (1 + 4 * 3/8) / (1 + 4) = 0.5
  CHECK(e.loss(start) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const MlmInstance oov = masked("a zebra", 1);
  CHECK(e.loss(oov) == doctest::Approx(std::log(12.0)).epsilon(1e-12));
}

TEST_CASE("distributions sum to one and include unknown mass") {
  const NgramExpert e = trained({"the cat sat on the mat", "the dog sat"}, 2, 0.3);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto d = e.predict(masked("the dog sat on", i));
    CHECK(sum_of(d) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(d.count("<unk>") == 1);
  }
}

TEST_CASE("single-token vocabulary concentrates mass") {
  const double alpha = 0.3;
  const NgramExpert e = trained({"x x x"}, 2, alpha);
  // Context x holds two observations, all on x; mass off x is bounded by k/(N_w+k).
  const double k = alpha * 2.0;
  const double delta = k / (2.0 + k);
  CHECK(e.probability("x", "x") >= 1.0 - delta);
  CHECK(e.top_prediction(masked("x x", 1)) == "x");
}

TEST_CASE("smoothing-only expert is uniform") {
  const NgramExpert e(testing::spec("u", 3), 2, 0.7, {"a", "b", "c"});
  const auto d = e.predict(masked("a b", 1));
  for (const auto& [t, p] : d) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
  // Equal mass everywhere; the lexicographically smallest token wins.
  CHECK(e.top_prediction(masked("a b", 1)) == "<unk>");
}

TEST_CASE("loss identities") {
  // Empty vocabulary: all mass sits on <unk>, so P(target) = 1.
  const NgramExpert e(testing::spec("u", 1), 1, 1.0, {});
  CHECK(e.loss(masked("q r", 1)) == doctest::Approx(0.0).epsilon(1e-15));

  // Vocabulary {a} with count e-2 on a: P(<unk>) = 1 / (e - 2 + 2) = 1/e.
  NgramExpert g(testing::spec("g", 1), 1, 1.0, {"a"});
  g.update(masked("a a", 1), std::exp(1.0) - 2.0);
  CHECK(g.loss(masked("a zz", 1)) == doctest::Approx(1.0).epsilon(1e-12));

  const NgramExpert f = trained({"a b"}, 1, 1.0);
  CHECK(f.loss(masked("a b", 0)) == doctest::Approx(-std::log(f.unigram_probability("a"))).epsilon(1e-12));
}

TEST_CASE("updates") {
  NgramExpert e = trained({"a b c a b"}, 2, 0.3);
  const MlmInstance inst = masked("c c", 1);  // (c, c) never seen
  const double before = e.loss(inst);
  NgramExpert same = e;
  same.update(inst, 0.0);
  CHECK(same == e);
  e.update(inst, 1.0);
  CHECK(e.loss(inst) < before);
  CHECK_THROWS_AS(e.update(inst, -1.0), ExpertError);

  SUBCASE("repeated updates follow the closed form") {
    NgramExpert u = trained({"a b c a"}, 1, 1.0);
    const MlmInstance x = masked("z b", 1);
    const double c = 1.0, n = 4.0, v = 3.0, alpha = 1.0;
    for (int i = 0; i < 100; ++i) expert_update(u, x, 1.0);
    const double expect = -std::log((c + 100.0 + alpha) / (n + 100.0 + alpha * (v + 1.0)));
    CHECK(u.loss(x) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(u.loss(x) < 0.1);
  }
}

TEST_CASE("own-domain loss is lower than foreign-domain loss") {
  SynthConfig sc;
  sc.n_domains = 2;
  sc.prompts_per_domain = 40;
  sc.overlap = 0.0;
  sc.min_length = 40;
  sc.max_length = 60;
  const auto recs = synth_corpus(sc);
  std::vector<std::string> d0, d1;
  std::vector<PromptRecord> held0, held1;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const bool holdout = i % 5 == 0;
    auto& train = recs[i].domain == "domain0" ? d0 : d1;
    auto& held = recs[i].domain == "domain0" ? held0 : held1;
    if (holdout) held.push_back(recs[i]);
    else train.push_back(recs[i].text);
  }
  const NgramExpert e0 = trained(d0, 2, 0.3, "e0");
  auto mean_loss = [&](const std::vector<PromptRecord>& rs) {
    const auto inst = make_mlm_instances(rs, 3, 1).instances;
    double s = 0.0;
    for (const auto& i : inst) s += e0.loss(i);
    return s / static_cast<double>(inst.size());
  };
  CHECK(mean_loss(held0) < mean_loss(held1));
}

TEST_CASE("persistence round-trips exactly") {
  TempDir dir("experts");
  NgramExpert e = trained({"the cat sat", "a dog ran far"}, 2, 0.25, "ngram-x");
  e.update(masked("the zebra", 1), 0.5);
  e.save(dir / "x.expert");
  const NgramExpert back = NgramExpert::load(dir / "x.expert");
  CHECK(back == e);
  const MlmInstance q = masked("the cat", 1);
  CHECK(back.loss(q) == e.loss(q));
}

TEST_CASE("manifest round-trip and duplicate detection") {
  TempDir dir("experts");
  std::vector<ExpertSpec> specs = {testing::spec("a", 10, 5, {{"verbosity", 0.5}}), testing::spec("b", 20, 7)};
  specs[1].kind = ExpertKind::remote;
  specs[1].endpoint = "http://127.0.0.1:9";
  save_manifest(dir / "m.jsonl", specs);
  const auto back = load_manifest(dir / "m.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].attributes.at("verbosity") == 0.5);
  CHECK(back[1].endpoint == specs[1].endpoint);
  specs.push_back(specs[0]);
  save_manifest(dir / "dup.jsonl", specs);
  CHECK_THROWS_AS(load_manifest(dir / "dup.jsonl"), ExpertError);
}

TEST_CASE("Q-table construction") {
  const NgramExpert a = trained({"a b c d"}, 2, 0.3, "A");
  const NgramExpert b = trained({"c d e f"}, 2, 0.3, "B");
  const NgramExpert c = trained({"a a b b"}, 1, 0.3, "C");
  std::vector<ExpertPtr> lib = {std::make_shared<NgramExpert>(a), std::make_shared<NgramExpert>(b),
                                std::make_shared<NgramExpert>(c)};

  SUBCASE("one expert, one instance") {
    const MlmInstance inst = masked("a b", 1);
    std::vector<ExpertPtr> one = {lib[0]};
    const QTable q = build_q_table(one, std::vector<MlmInstance>{inst}).table;
    REQUIRE(q.rows() == 1);
    CHECK(q.loss(0, 0) == expert_loss(a, inst));
  }

  SUBCASE("duplicate rows and argmin re-scan") {
    std::vector<PromptRecord> recs;
    Rng rng(3);
    const std::vector<std::string> words = {"a", "b", "c", "d", "e", "f"};
    for (int i = 0; i < 50; ++i) {
      std::string t;
      for (int k = 0; k < 6; ++k) t += words[rng.uniform_index(words.size())] + " ";
      recs.push_back({"r" + std::to_string(i), t, std::nullopt, {}});
    }
    auto inst = make_mlm_instances(recs, 1, 9).instances;
    inst.push_back(inst.front());
    inst.back().prompt_id = "dup";
    const QTable q = build_q_table(lib, inst).table;
    REQUIRE(q.rows() == 51);
    for (std::size_t j = 0; j < 3; ++j) CHECK(q.loss(0, j) == q.loss(50, j));
    for (std::size_t r = 0; r < 50; ++r) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < 3; ++j) best = std::min(best, lib[j]->loss(inst[r]));
      const auto row = q.loss_row(r);
      CHECK(*std::min_element(row.begin(), row.end()) == best);
    }
  }

  SUBCASE("save and load with correctness flags") {
    TempDir dir("experts");
    const auto inst = make_mlm_instances(std::vector<PromptRecord>{{"p", "a b c d e", std::nullopt, {}}}, 5, 1).instances;
    const QTable q = build_q_table(lib, inst).table;
    save_q_table(q, dir / "q.csv");
    CHECK(std::filesystem::exists(correct_path_for(dir / "q.csv")));
    const QTable back = load_q_table(dir / "q.csv");
    CHECK(back.losses == q.losses);
    CHECK(back.correct == q.correct);
    CHECK(back.expert_ids == q.expert_ids);
  }
}
