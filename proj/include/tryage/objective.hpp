#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "tryage/corpus.hpp"
#include "tryage/experts.hpp"
#include "tryage/router.hpp"

namespace tryage {

class ObjectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ConstraintKind { size_linear, size_log, recency, attribute };

std::string constraint_kind_name(ConstraintKind kind);
ConstraintKind constraint_kind_from_name(std::string_view name);

struct ConstraintTerm {
  ConstraintKind kind = ConstraintKind::size_linear;
  double lambda = 0.0;
  std::string attribute;  // only for ConstraintKind::attribute

  void validate() const;
  bool operator==(const ConstraintTerm&) const = default;
};

nlohmann::ordered_json constraint_to_json(const ConstraintTerm& term);
ConstraintTerm constraint_from_json(const nlohmann::json& j);

struct FlagBinding {
  std::string flag_text;
  ConstraintTerm constraint;
};

// "Smallest model" -> size_linear, "Newest model" -> recency, both with lambda 16.
std::vector<FlagBinding> default_flag_bindings();

// JSONL, one {flag, kind, lambda, attribute?} per line.
std::vector<FlagBinding> load_flag_bindings(const std::filesystem::path& path);
void save_flag_bindings(const std::filesystem::path& path, std::span<const FlagBinding> bindings);

struct ParsedFlags {
  std::string clean_text;
  std::vector<ConstraintTerm> constraints;
  std::vector<std::string> flags;          // names of recognized flags, in text order
  std::vector<std::string> unknown_flags;  // removed but unbound
};

// Removes every "[Flag: <name>]" (case-insensitive) and maps the names through
// the bindings. Whitespace is collapsed only where a flag was removed.
ParsedFlags parse_flags(std::string_view text, std::span<const FlagBinding> bindings);

// Normalized constraint value in [0, 1]; normalization is over `library`.
double constraint_value(const ConstraintTerm& term, const ExpertSpec& expert, std::span<const ExpertSpec> library);

enum class RouteMode { oracle, predictive };

struct RoutingDecision {
  RouteMode mode = RouteMode::oracle;
  std::string chosen_expert;
  bool tie_broken = false;
  std::vector<std::string> expert_ids;
  std::vector<double> losses;  // true losses (oracle) or predicted losses (predictive)
  std::vector<double> objective_values;
  std::vector<ConstraintTerm> constraints;
  std::vector<std::vector<double>> constraint_contributions;  // lambda_j * C_j per expert

  std::size_t chosen_index() const;
};

nlohmann::ordered_json decision_to_json(const RoutingDecision& decision);

// Argmin of L_i + sum_j lambda_j C_j(M_i). Ties go to the smaller
// param_count, then the lexicographically smaller expert_id.
RoutingDecision route_oracle(std::span<const double> q_row, std::span<const ExpertSpec> library,
                             std::span<const ConstraintTerm> constraints);

// Same objective over an explicit candidate list whose constraint values are
// normalized over `library`.
RoutingDecision route_with_losses(std::span<const double> losses, std::span<const ExpertSpec> candidates,
                                  std::span<const ExpertSpec> library, std::span<const ConstraintTerm> constraints,
                                  RouteMode mode);

// Supplies predicted losses for a flag-free prompt text.
class LossPredictor {
 public:
  virtual ~LossPredictor() = default;
  virtual const std::vector<std::string>& expert_ids() const = 0;
  virtual std::vector<double> predict(std::string_view clean_text) const = 0;
};

class RouterPredictor final : public LossPredictor {
 public:
  explicit RouterPredictor(const RouterModel& model) : model_(model) {}
  const std::vector<std::string>& expert_ids() const override { return model_.expert_ids(); }
  std::vector<double> predict(std::string_view clean_text) const override { return model_.predict_text(clean_text); }

 private:
  const RouterModel& model_;
};

// Test double that returns the true Q-table row for an instance's masked text.
class QTablePredictor final : public LossPredictor {
 public:
  QTablePredictor(const QTable& table, std::span<const MlmInstance> instances);
  const std::vector<std::string>& expert_ids() const override { return table_.expert_ids; }
  std::vector<double> predict(std::string_view clean_text) const override;

 private:
  const QTable& table_;
  std::unordered_map<std::string, std::size_t> rows_;
};

struct PredictiveRoute {
  RoutingDecision decision;
  ParsedFlags parsed;
};

PredictiveRoute route_predictive(const LossPredictor& predictor, std::string_view text,
                                 std::span<const ExpertSpec> library, std::span<const FlagBinding> bindings,
                                 std::span<const ConstraintTerm> extra_constraints);

// Joint router/expert training.
enum class RefreshPolicy { routed_only, full_refresh };

std::string refresh_policy_name(RefreshPolicy policy);
RefreshPolicy refresh_policy_from_name(std::string_view name);

struct JointConfig {
  RefreshPolicy refresh = RefreshPolicy::routed_only;
  std::size_t batch_size = 24;
  double learning_rate = 1e-3;
  double update_weight = 1.0;
  DivergenceKind divergence = DivergenceKind::squared_error;
  std::vector<ConstraintTerm> constraints;
  std::uint64_t seed = 0;
};

struct JointReport {
  std::size_t batches = 0;
  std::size_t instances = 0;
  std::size_t refreshed_cells = 0;
  double mean_router_divergence = 0.0;
  std::map<std::string, std::size_t> routed_counts;
};

// One pass over `instances`. Per batch: route with the current router,
// update each chosen expert on its routed instances, refresh the affected
// Q-table cells, then take one router step toward the refreshed rows.
// routed_only refreshes the (instance, chosen expert) cells of the batch;
// full_refresh recomputes every row for each expert updated in the batch.
JointReport joint_train_epoch(RouterModel& router, RouterOptimizer& optimizer, std::span<const ExpertPtr> experts,
                              std::span<const MlmInstance> instances, QTable& qtable, const JointConfig& config);

}  // namespace tryage
