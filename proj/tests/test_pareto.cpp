#include "doctest.h"
#include "support.hpp"
#include "tryage/eval.hpp"
#include "tryage/pareto.hpp"

using namespace tryage;

namespace {

TradeoffPoint point(double lambda, double acc, double size) {
  TradeoffPoint p;
  p.lambda = lambda;
  p.combined_accuracy = acc;
  p.mean_normalized_size = size;
  return p;
}

RoutingDecision chose(const std::string& id) {
  RoutingDecision d;
  d.chosen_expert = id;
  return d;
}

}  // namespace

TEST_CASE("default lambda grid") {
  const auto g = default_lambda_grid();
  REQUIRE(g.size() == 17);
  CHECK(g.front() == 0.0);
  CHECK(g[1] == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
  CHECK(g.back() == 16.0);
  for (std::size_t i = 2; i < g.size(); ++i) {
    CHECK(g[i] > g[i - 1]);
    CHECK(g[i] / g[i - 1] == doctest::Approx(std::pow(256.0, 1.0 / 15.0)).epsilon(1e-9));
  }
}

TEST_CASE("allocation histogram") {
  const std::vector<std::string> ids = {"a", "b", "c"};
  const std::vector<RoutingDecision> d = {chose("a"), chose("a"), chose("b"), chose("a")};
  const auto h = allocation_histogram(d, ids);
  CHECK(h.at("a") == 0.75);
  CHECK(h.at("b") == 0.25);
  CHECK(h.at("c") == 0.0);
  CHECK_THROWS(allocation_histogram(std::vector<RoutingDecision>{}, ids));
}

TEST_CASE("pareto front") {
  SUBCASE("a single point is its own front") {
    const std::vector<TradeoffPoint> pts = {point(0, 0.5, 0.5)};
    CHECK(pareto_front(pts).size() == 1);
  }
  SUBCASE("a strictly worse point is dropped") {
    const std::vector<TradeoffPoint> pts = {point(0, 0.9, 0.8), point(1, 0.9, 0.5)};
    const auto f = pareto_front(pts);
    REQUIRE(f.size() == 1);
    CHECK(f[0].lambda == 1);
  }
  SUBCASE("agrees with pairwise dominance on random points") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<TradeoffPoint> pts;
      for (int i = 0; i < 20; ++i) {
        pts.push_back(point(i, rng.uniform_index(8) / 8.0, rng.uniform_index(8) / 8.0));
      }
      std::vector<double> expect;
      for (const auto& p : pts) {
        bool dominated = false;
        for (const auto& q : pts) {
          const bool ge = q.combined_accuracy >= p.combined_accuracy && q.mean_normalized_size <= p.mean_normalized_size;
          const bool strict = q.combined_accuracy > p.combined_accuracy || q.mean_normalized_size < p.mean_normalized_size;
          dominated = dominated || (ge && strict);
        }
        if (!dominated) expect.push_back(p.lambda);
      }
      std::vector<double> got;
      for (const auto& p : pareto_front(pts)) got.push_back(p.lambda);
      CHECK(got == expect);
    }
  }
  CHECK(compute_saved(point(0, 1, 0.8), point(1, 1, 0.2)) == doctest::Approx(0.75));
}

TEST_CASE("sweep endpoints and monotone size") {
  const Fixture fx = testing::make_fixture(testing::small_config(4, 20, 0.2));
  const QTablePredictor pred(fx.qtable, fx.split.test);
  const auto& test = fx.split.test;

  const std::vector<double> zero = {0.0};
  const TradeoffPoint p0 = sweep_lambda(pred, fx.library, fx.qtable, test, zero).front();
  const EvalReport ev = evaluate(pred, fx.library, fx.qtable, test);
  CHECK(p0.combined_accuracy == ev.aggregate_combined_accuracy);
  std::vector<RoutingDecision> free;
  for (const auto& inst : test) free.push_back(route_oracle(fx.qtable.loss_row(fx.qtable.row_of(inst.id())), fx.library, {}));
  CHECK(p0.allocation == allocation_histogram(free, fx.qtable.expert_ids));

  const std::vector<double> huge = {1e9};
  const TradeoffPoint pb = sweep_lambda(pred, fx.library, fx.qtable, test, huge).front();
  std::uint64_t smallest = UINT64_MAX, largest = 0;
  for (const auto& s : fx.library) {
    smallest = std::min(smallest, s.param_count);
    largest = std::max(largest, s.param_count);
  }
  double on_smallest = 0.0;
  for (const auto& s : fx.library) {
    if (s.param_count == smallest) on_smallest += pb.allocation.at(s.expert_id);
  }
  CHECK(on_smallest == doctest::Approx(1.0));
  CHECK(pb.mean_normalized_size == doctest::Approx(double(smallest) / double(largest)));

  const auto pts = sweep_lambda(pred, fx.library, fx.qtable, test, default_lambda_grid());
  REQUIRE(pts.size() == 17);
  for (std::size_t i = 1; i < pts.size(); ++i) CHECK(pts[i].mean_normalized_size <= pts[i - 1].mean_normalized_size);

  const std::string csv = sweep_csv(pts, fx.qtable.expert_ids);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 18);
  CHECK_THROWS(sweep_lambda(pred, fx.library, fx.qtable, std::vector<MlmInstance>{}, zero));
}
