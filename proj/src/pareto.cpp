#include "tryage/pareto.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "tryage/util.hpp"

namespace tryage {

std::vector<double> default_lambda_grid() {
  std::vector<double> grid = {0.0};
  const double lo = 1.0 / 16.0;
  for (int k = 0; k < 16; ++k) grid.push_back(lo * std::pow(256.0, k / 15.0));
  grid.back() = 16.0;
  return grid;
}

std::map<std::string, double> allocation_histogram(std::span<const RoutingDecision> decisions,
                                                   std::span<const std::string> expert_ids) {
  if (decisions.empty()) throw ObjectiveError("allocation_histogram needs at least one decision");
  std::map<std::string, double> counts;
  for (const auto& id : expert_ids) counts[id] = 0.0;
  for (const auto& d : decisions) counts[d.chosen_expert] += 1.0;
  for (auto& [_, v] : counts) v /= static_cast<double>(decisions.size());
  return counts;
}

std::vector<TradeoffPoint> sweep_lambda_losses(std::span<const std::vector<double>> losses,
                                               std::span<const std::string> expert_ids,
                                               std::span<const ExpertSpec> library, const QTable& qtable,
                                               std::span<const MlmInstance> instances, std::span<const double> grid) {
  if (instances.empty()) throw ObjectiveError("sweep needs at least one instance");
  if (grid.empty()) throw ObjectiveError("lambda grid is empty");
  if (losses.size() != instances.size()) throw ObjectiveError("one loss vector per instance is required");
  for (double l : grid) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ObjectiveError("lambda values must be finite and non-negative");
  }

  std::vector<ExpertSpec> candidates;
  std::vector<std::size_t> cols;
  for (const auto& id : expert_ids) {
    auto it = std::find_if(library.begin(), library.end(), [&](const ExpertSpec& s) { return s.expert_id == id; });
    if (it == library.end()) throw ObjectiveError("expert '" + id + "' is not in the library");
    candidates.push_back(*it);
    cols.push_back(qtable.col_of(id));
  }
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < qtable.rows(); ++i) row_of.emplace(qtable.instance_ids[i], i);
  std::vector<std::size_t> rows;
  for (const auto& inst : instances) {
    auto it = row_of.find(inst.id());
    if (it == row_of.end()) throw ObjectiveError("instance " + inst.id() + " has no Q-table row");
    rows.push_back(it->second);
  }
  const ConstraintTerm size_term{ConstraintKind::size_linear, 0.0, {}};
  std::vector<double> size_value;
  for (const auto& c : candidates) size_value.push_back(constraint_value(size_term, c, library));

  std::vector<TradeoffPoint> points;
  for (double lambda : grid) {
    const ConstraintTerm term{ConstraintKind::size_linear, lambda, {}};
    std::vector<RoutingDecision> decisions;
    decisions.reserve(instances.size());
    std::size_t correct = 0;
    double size_sum = 0.0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      decisions.push_back(
          route_with_losses(losses[i], candidates, library, std::span(&term, 1), RouteMode::predictive));
      const std::size_t k = decisions.back().chosen_index();
      correct += qtable.is_correct(rows[i], cols[k]) ? 1 : 0;
      size_sum += size_value[k];
    }
    TradeoffPoint p;
    p.lambda = lambda;
    p.n_instances = instances.size();
    p.combined_accuracy = static_cast<double>(correct) / static_cast<double>(instances.size());
    p.mean_normalized_size = size_sum / static_cast<double>(instances.size());
    p.allocation = allocation_histogram(decisions, expert_ids);
    points.push_back(std::move(p));
  }
  return points;
}

std::vector<TradeoffPoint> sweep_lambda(const LossPredictor& predictor, std::span<const ExpertSpec> library,
                                        const QTable& qtable, std::span<const MlmInstance> instances,
                                        std::span<const double> grid) {
  if (instances.empty()) throw ObjectiveError("sweep needs at least one instance");
  std::vector<std::vector<double>> losses;
  losses.reserve(instances.size());
  for (const auto& inst : instances) losses.push_back(predictor.predict(inst.masked_text()));
  return sweep_lambda_losses(losses, predictor.expert_ids(), library, qtable, instances, grid);
}

std::vector<TradeoffPoint> pareto_front(std::span<const TradeoffPoint> points) {
  auto dominates = [](const TradeoffPoint& a, const TradeoffPoint& b) {
    return a.combined_accuracy >= b.combined_accuracy && a.mean_normalized_size <= b.mean_normalized_size &&
           (a.combined_accuracy > b.combined_accuracy || a.mean_normalized_size < b.mean_normalized_size);
  };
  std::vector<TradeoffPoint> front;
  for (const auto& p : points) {
    const bool dominated = std::any_of(points.begin(), points.end(), [&](const TradeoffPoint& q) { return dominates(q, p); });
    if (!dominated) front.push_back(p);
  }
  std::stable_sort(front.begin(), front.end(),
                   [](const TradeoffPoint& a, const TradeoffPoint& b) { return a.lambda < b.lambda; });
  return front;
}

double compute_saved(const TradeoffPoint& base, const TradeoffPoint& point) {
  if (!(base.mean_normalized_size > 0.0)) throw ObjectiveError("base point has zero size");
  return 1.0 - point.mean_normalized_size / base.mean_normalized_size;
}

std::string sweep_csv(std::span<const TradeoffPoint> points, std::span<const std::string> expert_ids) {
  std::vector<std::string> header = {"lambda", "combined_accuracy", "mean_normalized_size"};
  header.insert(header.end(), expert_ids.begin(), expert_ids.end());
  std::string out = csv_row(header);
  for (const auto& p : points) {
    std::vector<std::string> row = {format_double(p.lambda), format_double(p.combined_accuracy),
                                    format_double(p.mean_normalized_size)};
    for (const auto& id : expert_ids) {
      auto it = p.allocation.find(id);
      row.push_back(format_double(it == p.allocation.end() ? 0.0 : it->second));
    }
    out += csv_row(row);
  }
  return out;
}

}  // namespace tryage
