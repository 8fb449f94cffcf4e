#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tryage/objective.hpp"

namespace tryage {

// Published reference figures, shown alongside desk-scale results. They are
// not reproduced here.
namespace reference {
inline constexpr double kSelectionAccuracy = 0.508;          // results text
inline constexpr double kSelectionAccuracyAbstract = 0.509;  // abstract; differs from the results text
inline constexpr double kGpt35TurboSelection = 0.236;
inline constexpr double kGorillaSelection = 0.108;
inline const std::map<std::string, double> kGainOverRoberta = {
    {"Github", 0.179},          {"Freelaw", 0.077},  {"StackExchange", 0.065},
    {"DM Mathematics", 0.10},   {"BookCorpus2", 0.123}, {"USPTO", 0.0502},
};
}  // namespace reference

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Q-table row index of each instance.
std::vector<std::size_t> rows_for(const QTable& qtable, std::span<const MlmInstance> instances);

// Fraction of decisions whose chosen expert attains the row-minimum true loss.
double routing_accuracy(std::span<const RoutingDecision> decisions, const QTable& qtable,
                        std::span<const std::size_t> rows);

struct CombinedAccuracy {
  std::map<std::string, double> per_domain;
  double aggregate = 0.0;
};

// Top-1 correctness of each chosen expert, grouped by instance domain.
// Unlabeled instances count toward the aggregate only.
CombinedAccuracy combined_accuracy(std::span<const RoutingDecision> decisions, const QTable& qtable,
                                   std::span<const MlmInstance> instances);

struct AllocationMatrix {
  std::map<std::string, std::map<std::string, double>> rows;
  std::size_t unlabeled = 0;
};

AllocationMatrix allocation_matrix(std::span<const RoutingDecision> decisions, std::span<const MlmInstance> instances,
                                   std::span<const std::string> expert_ids);

// Mean over (instance, expert) of |predicted - true| loss.
double prediction_error(const LossPredictor& predictor, const QTable& qtable, std::span<const MlmInstance> instances);

// Expert with the highest standalone accuracy; ties go to the smaller id.
std::pair<std::string, double> best_single_expert(const QTable& qtable, std::span<const MlmInstance> instances);

// CSV instance_id,domain,h_0..h_{H-1}.
void export_embeddings(const RouterModel& router, std::span<const MlmInstance> instances,
                       const std::filesystem::path& path);

struct Separation {
  double within = 0.0;
  double cross = 0.0;
};

// Mean Euclidean distance over pairs in the same domain and in different domains.
Separation embedding_separation(std::span<const std::vector<double>> embeddings,
                                std::span<const std::string> domains);

struct EvalReport {
  double routing_top1_accuracy = 0.0;
  std::map<std::string, double> per_domain_combined_accuracy;
  double aggregate_combined_accuracy = 0.0;
  std::map<std::string, std::map<std::string, double>> allocation_matrix;
  double loss_prediction_mae = 0.0;
  std::pair<std::string, double> best_single_expert;
  std::size_t n_instances = 0;
  std::vector<std::string> expert_ids;
};

// Unconstrained predictive routing of every instance, then all metrics.
EvalReport evaluate(const LossPredictor& predictor, std::span<const ExpertSpec> library, const QTable& qtable,
                    std::span<const MlmInstance> instances);

std::string report_text(const EvalReport& report);
std::string allocation_csv(const EvalReport& report);
std::string domain_accuracy_csv(const EvalReport& report);

}  // namespace tryage
