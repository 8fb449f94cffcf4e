#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "tryage/objective.hpp"

namespace tryage {

struct TradeoffPoint {
  double lambda = 0.0;
  double combined_accuracy = 0.0;
  double mean_normalized_size = 0.0;
  std::map<std::string, double> allocation;
  std::size_t n_instances = 0;
};

// {0} plus 16 geometric points from 1/16 to 16.
std::vector<double> default_lambda_grid();

// Fraction of decisions per expert; every id in `expert_ids` appears.
std::map<std::string, double> allocation_histogram(std::span<const RoutingDecision> decisions,
                                                   std::span<const std::string> expert_ids);

// Predicted losses are computed once per instance and reused across the grid.
std::vector<TradeoffPoint> sweep_lambda(const LossPredictor& predictor, std::span<const ExpertSpec> library,
                                        const QTable& qtable, std::span<const MlmInstance> instances,
                                        std::span<const double> grid);

// Same sweep over precomputed per-instance loss vectors (one per instance,
// ordered as predictor.expert_ids()).
std::vector<TradeoffPoint> sweep_lambda_losses(std::span<const std::vector<double>> losses,
                                               std::span<const std::string> expert_ids,
                                               std::span<const ExpertSpec> library, const QTable& qtable,
                                               std::span<const MlmInstance> instances, std::span<const double> grid);

// Points not dominated under (max accuracy, min size), ordered by lambda.
std::vector<TradeoffPoint> pareto_front(std::span<const TradeoffPoint> points);

// 1 - size(point) / size(base).
double compute_saved(const TradeoffPoint& base, const TradeoffPoint& point);

// lambda,combined_accuracy,mean_normalized_size,<alloc per expert>
std::string sweep_csv(std::span<const TradeoffPoint> points, std::span<const std::string> expert_ids);

}  // namespace tryage
