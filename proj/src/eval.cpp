#include "tryage/eval.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "tryage/util.hpp"

namespace tryage {

std::vector<std::size_t> rows_for(const QTable& qtable, std::span<const MlmInstance> instances) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < qtable.rows(); ++i) index.emplace(qtable.instance_ids[i], i);
  std::vector<std::size_t> rows;
  rows.reserve(instances.size());
  for (const auto& inst : instances) {
    auto it = index.find(inst.id());
    if (it == index.end()) throw EvalError("instance " + inst.id() + " has no Q-table row");
    rows.push_back(it->second);
  }
  return rows;
}

double routing_accuracy(std::span<const RoutingDecision> decisions, const QTable& qtable,
                        std::span<const std::size_t> rows) {
  if (decisions.size() != rows.size()) throw EvalError("decisions and Q-table rows are not aligned");
  if (decisions.empty()) throw EvalError("no decisions to score");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const auto row = qtable.loss_row(rows[i]);
    const double best = *std::min_element(row.begin(), row.end());
    hits += row[qtable.col_of(decisions[i].chosen_expert)] == best ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(decisions.size());
}

CombinedAccuracy combined_accuracy(std::span<const RoutingDecision> decisions, const QTable& qtable,
                                   std::span<const MlmInstance> instances) {
  if (decisions.size() != instances.size()) throw EvalError("decisions and instances are not aligned");
  CombinedAccuracy out;
  if (decisions.empty()) return out;
  const auto rows = rows_for(qtable, instances);
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const bool ok = qtable.is_correct(rows[i], qtable.col_of(decisions[i].chosen_expert));
    hits += ok ? 1 : 0;
    if (instances[i].domain) {
      auto& t = tally[*instances[i].domain];
      t.first += ok ? 1 : 0;
      ++t.second;
    }
  }
  for (const auto& [d, t] : tally) out.per_domain[d] = static_cast<double>(t.first) / static_cast<double>(t.second);
  out.aggregate = static_cast<double>(hits) / static_cast<double>(decisions.size());
  return out;
}

AllocationMatrix allocation_matrix(std::span<const RoutingDecision> decisions, std::span<const MlmInstance> instances,
                                   std::span<const std::string> expert_ids) {
  if (decisions.size() != instances.size()) throw EvalError("decisions and instances are not aligned");
  AllocationMatrix m;
  std::map<std::string, std::size_t> totals;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    if (!instances[i].domain) {
      ++m.unlabeled;
      continue;
    }
    auto& row = m.rows[*instances[i].domain];
    if (row.empty()) {
      for (const auto& id : expert_ids) row[id] = 0.0;
    }
    row[decisions[i].chosen_expert] += 1.0;
    ++totals[*instances[i].domain];
  }
  for (auto& [d, row] : m.rows) {
    for (auto& [_, v] : row) v /= static_cast<double>(totals[d]);
  }
  return m;
}

double prediction_error(const LossPredictor& predictor, const QTable& qtable, std::span<const MlmInstance> instances) {
  if (instances.empty()) throw EvalError("prediction_error needs a non-empty split");
  const auto rows = rows_for(qtable, instances);
  std::vector<std::size_t> cols;
  for (const auto& id : predictor.expert_ids()) cols.push_back(qtable.col_of(id));
  double sum = 0.0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto pred = predictor.predict(instances[i].masked_text());
    for (std::size_t k = 0; k < cols.size(); ++k) sum += std::abs(pred[k] - qtable.loss(rows[i], cols[k]));
  }
  return sum / static_cast<double>(instances.size() * cols.size());
}

std::pair<std::string, double> best_single_expert(const QTable& qtable, std::span<const MlmInstance> instances) {
  if (instances.empty()) throw EvalError("best_single_expert needs instances");
  const auto rows = rows_for(qtable, instances);
  std::pair<std::string, double> best{"", -1.0};
  for (std::size_t j = 0; j < qtable.cols(); ++j) {
    std::size_t hits = 0;
    for (std::size_t r : rows) hits += qtable.is_correct(r, j) ? 1 : 0;
    const double acc = static_cast<double>(hits) / static_cast<double>(rows.size());
    const std::string& id = qtable.expert_ids[j];
    if (acc > best.second || (acc == best.second && id < best.first)) best = {id, acc};
  }
  return best;
}

void export_embeddings(const RouterModel& router, std::span<const MlmInstance> instances,
                       const std::filesystem::path& path) {
  std::vector<std::string> header = {"instance_id", "domain"};
  for (std::size_t j = 0; j < router.hidden_dim(); ++j) header.push_back("h_" + std::to_string(j));
  std::string out = csv_row(header);
  for (const auto& inst : instances) {
    const auto h = router.embed(featurize(inst.masked_text(), router.feature_config()));
    std::vector<std::string> row = {inst.id(), inst.domain.value_or("")};
    for (double v : h) row.push_back(format_double(v));
    out += csv_row(row);
  }
  try {
    write_file(path, out);
  } catch (const std::exception& e) {
    throw EvalError("cannot write embeddings to " + path.string() + ": " + e.what());
  }
}

Separation embedding_separation(std::span<const std::vector<double>> embeddings,
                                std::span<const std::string> domains) {
  if (embeddings.size() != domains.size()) throw EvalError("embeddings and domains differ in length");
  double within = 0.0, cross = 0.0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t a = 0; a < embeddings.size(); ++a) {
    for (std::size_t b = a + 1; b < embeddings.size(); ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < embeddings[a].size(); ++k) {
        const double d = embeddings[a][k] - embeddings[b][k];
        s += d * d;
      }
      if (domains[a] == domains[b]) {
        within += std::sqrt(s);
        ++nw;
      } else {
        cross += std::sqrt(s);
        ++nc;
      }
    }
  }
  return {nw ? within / static_cast<double>(nw) : 0.0, nc ? cross / static_cast<double>(nc) : 0.0};
}

EvalReport evaluate(const LossPredictor& predictor, std::span<const ExpertSpec> library, const QTable& qtable,
                    std::span<const MlmInstance> instances) {
  if (instances.empty()) throw EvalError("evaluation split is empty");
  std::vector<RoutingDecision> decisions;
  decisions.reserve(instances.size());
  for (const auto& inst : instances) {
    decisions.push_back(route_predictive(predictor, inst.masked_text(), library, {}, {}).decision);
  }
  EvalReport r;
  r.n_instances = instances.size();
  r.expert_ids = predictor.expert_ids();
  const auto rows = rows_for(qtable, instances);
  r.routing_top1_accuracy = routing_accuracy(decisions, qtable, rows);
  const auto combined = combined_accuracy(decisions, qtable, instances);
  r.per_domain_combined_accuracy = combined.per_domain;
  r.aggregate_combined_accuracy = combined.aggregate;
  r.allocation_matrix = allocation_matrix(decisions, instances, r.expert_ids).rows;
  r.loss_prediction_mae = prediction_error(predictor, qtable, instances);
  r.best_single_expert = best_single_expert(qtable, instances);
  return r;
}

std::string report_text(const EvalReport& r) {
  std::string out;
  auto line = [&out](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
  line("n_instances", std::to_string(r.n_instances));
  line("routing_top1_accuracy", format_double(r.routing_top1_accuracy));
  line("aggregate_combined_accuracy", format_double(r.aggregate_combined_accuracy));
  line("best_single_expert", r.best_single_expert.first);
  line("best_single_expert_accuracy", format_double(r.best_single_expert.second));
  line("loss_prediction_mae", format_double(r.loss_prediction_mae));
  for (const auto& [d, acc] : r.per_domain_combined_accuracy) line("combined_accuracy." + d, format_double(acc));
  for (const auto& [d, row] : r.allocation_matrix) {
    for (const auto& [e, f] : row) line("allocation." + d + "." + e, format_double(f));
  }
  line("reference.selection_accuracy", format_double(reference::kSelectionAccuracy));
  line("reference.selection_accuracy_abstract", format_double(reference::kSelectionAccuracyAbstract));
  line("reference.gpt35_turbo_selection", format_double(reference::kGpt35TurboSelection));
  line("reference.gorilla_selection", format_double(reference::kGorillaSelection));
  return out;
}

std::string allocation_csv(const EvalReport& r) {
  std::vector<std::string> header = {"domain"};
  header.insert(header.end(), r.expert_ids.begin(), r.expert_ids.end());
  std::string out = csv_row(header);
  for (const auto& [d, row] : r.allocation_matrix) {
    std::vector<std::string> fields = {d};
    for (const auto& id : r.expert_ids) {
      auto it = row.find(id);
      fields.push_back(format_double(it == row.end() ? 0.0 : it->second));
    }
    out += csv_row(fields);
  }
  return out;
}

std::string domain_accuracy_csv(const EvalReport& r) {
  std::string out = csv_row(std::vector<std::string>{"domain", "combined_accuracy"});
  for (const auto& [d, acc] : r.per_domain_combined_accuracy) {
    out += csv_row(std::vector<std::string>{d, format_double(acc)});
  }
  out += csv_row(std::vector<std::string>{"(all)", format_double(r.aggregate_combined_accuracy)});
  return out;
}

}  // namespace tryage
