#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "tryage/pipeline.hpp"

using namespace tryage;
using testing::TempDir;

namespace {

PipelineConfig staged_config(const TempDir& dir) {
  PipelineConfig c = testing::small_config(2, 30, 0.1);
  c.features.dim = 1024;
  c.train.hidden_dim = 8;
  c.train.max_epochs = 2;
  c.corpus_path = dir / "data/corpus.jsonl";
  c.instances_path = dir / "data/instances.jsonl";
  c.experts_dir = dir / "data/experts";
  c.qtable_path = dir / "data/qtable.csv";
  c.router_path = dir / "data/router.bin";
  c.reports_dir = dir / "reports";
  return c;
}

}  // namespace

TEST_CASE("config text") {
  PipelineConfig c;
  c.apply_text("# comment\nseed = 7\ntrain.learning_rate=0.01\n\nsynth.overlap = 0.5\nsweep.grid = 0, 1, 2\n");
  CHECK(c.seed == 7);
  CHECK(c.train.learning_rate == 0.01);
  CHECK(c.synth.overlap == 0.5);
  CHECK(c.grid() == std::vector<double>{0, 1, 2});
  CHECK(c.get("synth.overlap") == "0.5");

  PipelineConfig d;
  d.apply_text(c.dump());
  CHECK(d.dump() == c.dump());

  CHECK_THROWS_AS(c.set("train.warp_factor", "9"), ConfigError);
  CHECK_THROWS_AS(c.apply_text("no equals sign"), ConfigError);
  CHECK_THROWS_AS(c.set("train.batch_size", "many"), ConfigError);
  CHECK(PipelineConfig().grid().size() == 17);
  for (const auto& k : PipelineConfig::keys()) CHECK_NOTHROW(c.get(k));
}

TEST_CASE("instances persist with their split") {
  TempDir dir("pipeline");
  const Fixture fx = testing::make_fixture(testing::small_config(2, 10, 0.0));
  save_instances(dir / "i.jsonl", fx.split);
  const CorpusSplit back = load_instances(dir / "i.jsonl");
  REQUIRE(back.train.size() == fx.split.train.size());
  REQUIRE(back.test.size() == fx.split.test.size());
  for (std::size_t i = 0; i < back.test.size(); ++i) {
    CHECK(back.test[i].id() == fx.split.test[i].id());
    CHECK(back.test[i].tokens == fx.split.test[i].tokens);
    CHECK(back.test[i].target == fx.split.test[i].target);
    CHECK(back.test[i].domain == fx.split.test[i].domain);
  }
}

TEST_CASE("stages run end to end") {
  TempDir dir("pipeline");
  const PipelineConfig c = staged_config(dir);
  std::ostringstream log;
  stage_synth(c, log);
  stage_build_experts(c, log);
  stage_qtable(c, log);
  stage_train(c, log);
  stage_eval(c, log);
  stage_sweep(c, log);

  for (const char* f : {"train_report.txt", "train_curve.csv", "eval_report.txt", "eval_allocation.csv",
                        "eval_domain_accuracy.csv", "embeddings.csv", "sweep.csv", "pareto_front.csv",
                        "sweep_report.txt"}) {
    CHECK_MESSAGE(std::filesystem::exists(c.reports_dir / f), f);
  }
  const std::string sweep = read_file(c.reports_dir / "sweep.csv");
  CHECK(std::count(sweep.begin(), sweep.end(), '\n') == 18);
  CHECK(load_manifest(c.manifest_path()).size() == 2);

  const CorpusSplit split = load_instances(c.instances_path);
  for (std::size_t i = 0; i < std::min<std::size_t>(split.test.size(), 5); ++i) {
    RouteOptions o;
    o.text = split.test[i].masked_text() + " [Flag: Smallest model]";
    o.predictor = PredictorKind::qtable;
    const auto predicted = nlohmann::json::parse(stage_route(c, o));
    o.oracle = true;
    auto oracle = nlohmann::json::parse(stage_route(c, o));
    CHECK(predicted.at("mode") == "predictive");
    CHECK(oracle.at("mode") == "oracle");
    oracle["mode"] = "predictive";
    CHECK(predicted == oracle);
  }

  RouteOptions r;
  r.text = "anything at all [MASK]";
  const auto routed = nlohmann::json::parse(stage_route(c, r));
  CHECK(routed.at("expert_ids").size() == 2);

  RouteOptions missing;
  missing.text = "not an instance";
  missing.predictor = PredictorKind::qtable;
  CHECK_THROWS(stage_route(c, missing));
}

TEST_CASE("missing inputs fail with a clear error") {
  TempDir dir("pipeline");
  const PipelineConfig c = staged_config(dir);
  std::ostringstream log;
  CHECK_THROWS(stage_build_experts(c, log));
  CHECK_THROWS(stage_train(c, log));
}
