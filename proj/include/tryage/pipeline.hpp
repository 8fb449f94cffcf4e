#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tryage/corpus.hpp"
#include "tryage/eval.hpp"
#include "tryage/experts.hpp"
#include "tryage/gateway.hpp"
#include "tryage/objective.hpp"
#include "tryage/pareto.hpp"
#include "tryage/router.hpp"

namespace tryage {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat key=value configuration; keys carry section prefixes such as
// "train.learning_rate". Lines starting with '#' are comments.
struct PipelineConfig {
  std::uint64_t seed = 42;

  SynthConfig synth;
  std::size_t masks_per_record = 1;
  SplitFractions split;

  int expert_order = 2;
  double smoothing_alpha = 0.3;
  bool qtable_strict = true;

  FeatureConfig features;
  TrainConfig train;
  std::vector<double> sweep_grid;  // empty: default grid

  std::filesystem::path corpus_path = "data/corpus.jsonl";
  std::filesystem::path instances_path = "data/instances.jsonl";
  std::filesystem::path experts_dir = "data/experts";
  std::filesystem::path qtable_path = "data/qtable.csv";
  std::filesystem::path router_path = "data/router.bin";
  std::filesystem::path reports_dir = "reports";
  std::filesystem::path flag_bindings_path;  // empty: default bindings

  std::string listen_address = "127.0.0.1:8080";
  bool forward_to_expert = false;
  int request_timeout_ms = 5000;
  std::size_t max_body_bytes = 1 << 20;

  PipelineConfig();

  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static std::vector<std::string> keys();

  void apply_text(std::string_view text, std::string_view source = "<config>");
  static PipelineConfig load(const std::filesystem::path& path);
  std::string dump() const;

  std::filesystem::path manifest_path() const { return experts_dir / "manifest.jsonl"; }
  // Train config with its seed derived from the root seed.
  TrainConfig effective_train() const;
  std::vector<double> grid() const;
  GatewayConfig gateway() const;
};

// Everything downstream of the corpus, held in memory.
struct Fixture {
  std::vector<PromptRecord> records;
  CorpusSplit split;
  std::vector<ExpertPtr> experts;
  std::vector<ExpertSpec> library;
  QTable qtable;

  std::vector<MlmInstance> all_instances() const;
};

CorpusSplit make_split(std::span<const PromptRecord> records, const PipelineConfig& config);

// One n-gram specialist per domain, trained on that domain's train-split
// records. Unlabeled records form the domain "unlabeled".
std::vector<ExpertPtr> build_experts(std::span<const PromptRecord> records, const CorpusSplit& split,
                                     const PipelineConfig& config);

Fixture build_fixture(std::vector<PromptRecord> records, const PipelineConfig& config);
TrainReport train_fixture(const Fixture& fixture, const PipelineConfig& config);

// Instances with split labels.
void save_instances(const std::filesystem::path& path, const CorpusSplit& split);
CorpusSplit load_instances(const std::filesystem::path& path);

std::vector<ExpertPtr> load_library(const std::filesystem::path& manifest, const std::filesystem::path& experts_dir,
                                    int timeout_ms = 5000);
std::vector<ExpertSpec> specs_of(std::span<const ExpertPtr> experts);

// Pipeline stages. Each reads and writes only its declared files.
void stage_synth(const PipelineConfig& config, std::ostream& log);
void stage_build_experts(const PipelineConfig& config, std::ostream& log);
void stage_qtable(const PipelineConfig& config, std::ostream& log);
void stage_train(const PipelineConfig& config, std::ostream& log);
void stage_eval(const PipelineConfig& config, std::ostream& log);
void stage_sweep(const PipelineConfig& config, std::ostream& log);

enum class PredictorKind { router, qtable };

struct RouteOptions {
  std::string text;
  PredictorKind predictor = PredictorKind::router;
  bool oracle = false;  // route on the true Q-table row instead
  std::vector<ConstraintTerm> extra_constraints;
};

// JSON routing response for one prompt.
std::string stage_route(const PipelineConfig& config, const RouteOptions& options);

std::string train_report_text(const TrainReport& report, double elapsed_seconds);
std::string train_curve_csv(const TrainReport& report);

}  // namespace tryage
