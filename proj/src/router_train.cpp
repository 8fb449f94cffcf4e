#include <cmath>
#include <unordered_map>

#include "tryage/router.hpp"
#include "tryage/util.hpp"

namespace tryage {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !(lr_decay > 0.0) || !(weight_decay >= 0.0)) {
    throw RouterError("learning_rate and lr_decay must be positive, weight_decay non-negative");
  }
  if (batch_size < 1) throw RouterError("batch_size must be >= 1");
  if (max_epochs < 1) throw RouterError("max_epochs must be >= 1");
  if (patience < 1) throw RouterError("patience must be >= 1");
  if (val_checks_per_epoch < 1) throw RouterError("val_checks_per_epoch must be >= 1");
  if (hidden_dim < 1) throw RouterError("hidden_dim must be >= 1");
}

double mean_divergence(const RouterModel& model, std::span<const SparseVector> features,
                       std::span<const std::vector<double>> truths, DivergenceKind kind) {
  if (features.size() != truths.size()) throw RouterError("features and targets differ in length");
  if (features.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) s += divergence(model.forward(features[i]), truths[i], kind);
  return s / static_cast<double>(features.size());
}

std::vector<std::vector<double>> q_targets(const QTable& qtable, std::span<const MlmInstance> instances) {
  std::unordered_map<std::string, std::size_t> rows;
  for (std::size_t i = 0; i < qtable.rows(); ++i) rows.emplace(qtable.instance_ids[i], i);
  std::vector<std::vector<double>> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    auto it = rows.find(inst.id());
    if (it == rows.end()) throw RouterError("instance " + inst.id() + " has no Q-table row");
    auto row = qtable.loss_row(it->second);
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

TrainReport train_router(const QTable& qtable, std::span<const MlmInstance> train, std::span<const MlmInstance> val,
                         const FeatureConfig& features, const TrainConfig& config) {
  config.validate();
  features.validate();
  if (train.empty()) throw RouterError("training split is empty");
  if (val.empty()) throw RouterError("validation split is empty");

  std::vector<SparseVector> xtrain, xval;
  xtrain.reserve(train.size());
  xval.reserve(val.size());
  for (const auto& inst : train) xtrain.push_back(featurize(inst.masked_text(), features));
  for (const auto& inst : val) xval.push_back(featurize(inst.masked_text(), features));
  const auto ytrain = q_targets(qtable, train);
  const auto yval = q_targets(qtable, val);

  RouterModel model =
      RouterModel::initialized(features, qtable.expert_ids, config.hidden_dim, mix_seed(config.seed, "init"));
  model.set_seed(config.seed);
  // Output biases start at the mean training loss of each expert.
  auto& b2 = model.params().b2;
  for (std::size_t k = 0; k < b2.size(); ++k) {
    double s = 0.0;
    for (const auto& y : ytrain) s += y[k];
    b2[k] = static_cast<float>(s / static_cast<double>(ytrain.size()));
  }

  TrainReport report;
  report.initial_val_divergence = mean_divergence(model, xval, yval, config.divergence);
  report.best_val_divergence = report.initial_val_divergence;
  report.train_curve.push_back({0, mean_divergence(model, xtrain, ytrain, config.divergence),
                                report.initial_val_divergence});
  report.checkpoint = model;

  RouterOptimizer opt(model, config.weight_decay);
  Rng rng = Rng::substream(config.seed, "batching");
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t checks = config.val_checks_per_epoch;
  std::size_t since_best = 0;
  double running = 0.0;
  std::size_t running_n = 0;
  std::vector<const SparseVector*> bx;
  std::vector<std::vector<double>> by;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < config.max_epochs && !stop; ++epoch) {
    report.epochs_run = epoch + 1;
    const double lr = config.learning_rate * std::pow(config.lr_decay, static_cast<double>(epoch));
    rng.shuffle(order);
    for (std::size_t s = 0; s < steps_per_epoch && !stop; ++s) {
      bx.clear();
      by.clear();
      const std::size_t lo = s * config.batch_size;
      const std::size_t hi = std::min(lo + config.batch_size, order.size());
      for (std::size_t i = lo; i < hi; ++i) {
        bx.push_back(&xtrain[order[i]]);
        by.push_back(ytrain[order[i]]);
      }
      running += opt.step(model, bx, by, config.divergence, lr);
      ++running_n;
      ++report.steps;

      if ((s + 1) * checks / steps_per_epoch == s * checks / steps_per_epoch) continue;
      const double v = mean_divergence(model, xval, yval, config.divergence);
      if (!std::isfinite(v)) {
        throw RouterError("non-finite validation divergence at step " + std::to_string(report.steps));
      }
      report.train_curve.push_back({report.steps, running / static_cast<double>(running_n), v});
      running = 0.0;
      running_n = 0;
      if (v < report.best_val_divergence) {
        report.best_val_divergence = v;
        report.checkpoint = model;
        since_best = 0;
      } else if (++since_best >= config.patience) {
        stop = true;
      }
    }
  }
  return report;
}

}  // namespace tryage
