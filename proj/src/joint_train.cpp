#include <algorithm>
#include <set>

#include "tryage/objective.hpp"
#include "tryage/util.hpp"

namespace tryage {

std::string refresh_policy_name(RefreshPolicy policy) {
  return policy == RefreshPolicy::full_refresh ? "full_refresh" : "routed_only";
}

RefreshPolicy refresh_policy_from_name(std::string_view name) {
  if (name == "routed_only") return RefreshPolicy::routed_only;
  if (name == "full_refresh") return RefreshPolicy::full_refresh;
  throw ObjectiveError("unknown refresh policy '" + std::string(name) + "'");
}

JointReport joint_train_epoch(RouterModel& router, RouterOptimizer& optimizer, std::span<const ExpertPtr> experts,
                              std::span<const MlmInstance> instances, QTable& qtable, const JointConfig& config) {
  if (config.batch_size < 1) throw ObjectiveError("joint batch_size must be >= 1");
  std::vector<ExpertSpec> library;
  for (const auto& e : experts) {
    if (!dynamic_cast<NgramExpert*>(e.get())) {
      throw ObjectiveError("expert " + e->spec().expert_id + " is not updatable; joint training needs n-gram experts");
    }
    library.push_back(e->spec());
  }
  std::vector<std::size_t> expert_col(router.n_experts());
  std::vector<ExpertModel*> by_router_index(router.n_experts());
  for (std::size_t k = 0; k < router.n_experts(); ++k) {
    const std::string& id = router.expert_ids()[k];
    auto it = std::find_if(experts.begin(), experts.end(), [&](const ExpertPtr& e) { return e->spec().expert_id == id; });
    if (it == experts.end()) throw ObjectiveError("router expert '" + id + "' has no matching expert");
    by_router_index[k] = it->get();
    expert_col[k] = qtable.col_of(id);
  }

  JointReport report;
  for (const auto& id : router.expert_ids()) report.routed_counts[id] = 0;
  if (instances.empty()) return report;

  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < qtable.rows(); ++i) row_of.emplace(qtable.instance_ids[i], i);
  std::vector<std::size_t> rows(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    auto it = row_of.find(instances[i].id());
    if (it == row_of.end()) throw ObjectiveError("instance " + instances[i].id() + " has no Q-table row");
    rows[i] = it->second;
  }

  std::vector<std::size_t> order(instances.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::substream(config.seed, "joint/batching");
  rng.shuffle(order);

  std::vector<ExpertSpec> candidates;
  for (const auto* e : by_router_index) candidates.push_back(e->spec());
  double div_sum = 0.0;
  for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
    const std::size_t hi = std::min(lo + config.batch_size, order.size());
    std::vector<SparseVector> xs;
    std::vector<std::size_t> chosen;
    // (a) route every instance with the pre-step router.
    for (std::size_t b = lo; b < hi; ++b) {
      const MlmInstance& inst = instances[order[b]];
      const std::string text = inst.masked_text();
      xs.push_back(featurize(text, router.feature_config()));
      const std::vector<double> pred = router.forward(xs.back());
      const RoutingDecision d = route_with_losses(pred, candidates, library, config.constraints, RouteMode::predictive);
      chosen.push_back(d.chosen_index());
      ++report.routed_counts[d.chosen_expert];
    }
    // (b) expert updates from the pre-batch expert state.
    std::set<std::size_t> touched;
    for (std::size_t b = lo; b < hi; ++b) {
      const std::size_t k = chosen[b - lo];
      expert_update(*by_router_index[k], instances[order[b]], config.update_weight);
      touched.insert(k);
    }
    // (c) refresh true losses.
    if (config.refresh == RefreshPolicy::routed_only) {
      for (std::size_t b = lo; b < hi; ++b) {
        const std::size_t k = chosen[b - lo];
        qtable.loss(rows[order[b]], expert_col[k]) = by_router_index[k]->loss(instances[order[b]]);
        ++report.refreshed_cells;
      }
    } else {
      for (std::size_t k : touched) {
        for (std::size_t i = 0; i < instances.size(); ++i) {
          qtable.loss(rows[i], expert_col[k]) = by_router_index[k]->loss(instances[i]);
          ++report.refreshed_cells;
        }
      }
    }
    // (d) one router step toward the refreshed rows.
    std::vector<const SparseVector*> bx;
    std::vector<std::vector<double>> by;
    for (std::size_t b = lo; b < hi; ++b) {
      bx.push_back(&xs[b - lo]);
      std::vector<double> y(router.n_experts());
      for (std::size_t k = 0; k < router.n_experts(); ++k) y[k] = qtable.loss(rows[order[b]], expert_col[k]);
      by.push_back(std::move(y));
    }
    div_sum += optimizer.step(router, bx, by, config.divergence, config.learning_rate);
    ++report.batches;
  }
  report.instances = instances.size();
  report.mean_router_divergence = div_sum / static_cast<double>(report.batches);
  return report;
}

}  // namespace tryage
