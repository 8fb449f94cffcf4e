#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "tryage/eval.hpp"

using namespace tryage;
using testing::TempDir;

namespace {

// Hand-built table: rows r0..r(n-1), experts a/b, domain alternates.
struct Toy {
  QTable q;
  std::vector<MlmInstance> inst;
  std::vector<ExpertSpec> lib = {testing::spec("a", 10), testing::spec("b", 20)};
};

Toy toy(std::size_t n, Rng& rng) {
  Toy t;
  t.q.expert_ids = {"a", "b"};
  for (std::size_t i = 0; i < n; ++i) {
    MlmInstance m;
    m.prompt_id = "p" + std::to_string(i);
    m.tokens = {"w" + std::to_string(i), std::string(kMaskToken)};
    m.mask_index = 1;
    m.target = "x";
    m.domain = i % 2 == 0 ? "even" : "odd";
    t.inst.push_back(m);
    t.q.instance_ids.push_back(m.id());
    const double la = rng.uniform(0, 2), lb = rng.uniform(0, 2);
    t.q.losses.insert(t.q.losses.end(), {la, lb});
    t.q.correct.insert(t.q.correct.end(), {std::uint8_t(la < 1.0), std::uint8_t(lb < 1.0)});
  }
  return t;
}

}  // namespace

TEST_CASE("reference figures") {
  CHECK(reference::kSelectionAccuracy == 0.508);
  CHECK(reference::kSelectionAccuracyAbstract == 0.509);
  CHECK(reference::kGpt35TurboSelection == 0.236);
  CHECK(reference::kGorillaSelection == 0.108);
  CHECK(reference::kGainOverRoberta.size() == 6);
  CHECK(reference::kGainOverRoberta.at("Github") == 0.179);
  CHECK(reference::kGainOverRoberta.at("USPTO") == 0.0502);
}

TEST_CASE("routing accuracy") {
  Rng rng(1);
  const Toy t = toy(400, rng);
  const auto rows = rows_for(t.q, t.inst);

  std::vector<RoutingDecision> oracle;
  for (std::size_t r : rows) oracle.push_back(route_oracle(t.q.loss_row(r), t.lib, {}));
  CHECK(routing_accuracy(oracle, t.q, rows) == 1.0);

  // Uniform random choices hit the argmin half of the time.
  std::vector<RoutingDecision> coin;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    RoutingDecision d;
    d.chosen_expert = rng.bernoulli(0.5) ? "a" : "b";
    coin.push_back(d);
  }
  const double sigma = std::sqrt(0.25 / 400.0);
  CHECK(std::abs(routing_accuracy(coin, t.q, rows) - 0.5) <= 3 * sigma);
  CHECK_THROWS_AS(routing_accuracy(std::vector<RoutingDecision>{}, t.q, std::vector<std::size_t>{}), EvalError);
}

TEST_CASE("combined accuracy and allocation") {
  Rng rng(2);
  Toy t = toy(10, rng);
  std::fill(t.q.correct.begin(), t.q.correct.end(), 1);
  std::vector<RoutingDecision> d;
  for (std::size_t i = 0; i < 10; ++i) {
    RoutingDecision x;
    x.chosen_expert = i < 3 ? "a" : "b";
    d.push_back(x);
  }
  const CombinedAccuracy c = combined_accuracy(d, t.q, t.inst);
  CHECK(c.aggregate == 1.0);
  CHECK(c.per_domain.at("even") == 1.0);

  t.inst[9].domain.reset();
  const AllocationMatrix m = allocation_matrix(d, t.inst, t.q.expert_ids);
  CHECK(m.unlabeled == 1);
  for (const auto& [domain, row] : m.rows) {
    double s = 0.0;
    for (const auto& [_, v] : row) s += v;
    CHECK(s == doctest::Approx(1.0));
  }
  CHECK(m.rows.at("even").at("a") == doctest::Approx(0.4));
}

TEST_CASE("best single expert") {
  Rng rng(3);
  Toy t = toy(6, rng);
  t.q.correct = {1, 0, 1, 1, 0, 1, 1, 0, 0, 1, 0, 1};
  const auto best = best_single_expert(t.q, t.inst);
  CHECK(best.first == "b");
  CHECK(best.second == doctest::Approx(4.0 / 6.0));
  t.q.correct = {1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(best_single_expert(t.q, t.inst).first == "a");
}

TEST_CASE("evaluation on a fixture") {
  const Fixture fx = testing::make_fixture(testing::small_config(3, 20, 0.2));
  const QTablePredictor exact(fx.qtable, fx.split.test);
  CHECK(prediction_error(exact, fx.qtable, fx.split.test) == 0.0);

  const EvalReport r = evaluate(exact, fx.library, fx.qtable, fx.split.test);
  CHECK(r.routing_top1_accuracy == 1.0);
  CHECK(r.loss_prediction_mae == 0.0);
  CHECK(r.n_instances == fx.split.test.size());
  for (const auto& [d, row] : r.allocation_matrix) {
    double s = 0.0;
    for (const auto& [_, v] : row) s += v;
    CHECK(s == doctest::Approx(1.0));
  }
  CHECK(report_text(r).find("routing_top1_accuracy") != std::string::npos);
  const std::string alloc = allocation_csv(r);
  CHECK(std::count(alloc.begin(), alloc.end(), '\n') == 1 + r.allocation_matrix.size());
}

TEST_CASE("a one-expert library scores that expert") {
  Fixture fx = testing::make_fixture(testing::small_config(1, 30, 0.0));
  REQUIRE(fx.library.size() == 1);
  const QTablePredictor exact(fx.qtable, fx.split.test);
  const EvalReport r = evaluate(exact, fx.library, fx.qtable, fx.split.test);
  CHECK(r.routing_top1_accuracy == 1.0);
  CHECK(r.aggregate_combined_accuracy == r.best_single_expert.second);
}

TEST_CASE("embedding export and separation") {
  TempDir dir("eval");
  const RouterModel m = RouterModel::initialized(FeatureConfig{.dim = 256}, {"a", "b"}, 4, 1);
  export_embeddings(m, std::vector<MlmInstance>{}, dir / "empty.csv");
  CHECK(read_file(dir / "empty.csv") == "instance_id,domain,h_0,h_1,h_2,h_3\n");

  Rng rng(4);
  const Toy t = toy(7, rng);
  export_embeddings(m, t.inst, dir / "e.csv");
  const std::string csv = read_file(dir / "e.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);

  const std::vector<std::vector<double>> e = {{0, 0}, {0, 1}, {3, 0}, {3, 1}};
  const std::vector<std::string> d = {"x", "x", "y", "y"};
  const Separation s = embedding_separation(e, d);
  CHECK(s.within == doctest::Approx(1.0));
  CHECK(s.cross == doctest::Approx((3.0 + std::sqrt(10.0) + std::sqrt(10.0) + 3.0) / 4.0));
}
