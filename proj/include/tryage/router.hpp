#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tryage/corpus.hpp"
#include "tryage/experts.hpp"

namespace tryage {

class RouterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Normalize { l2, none };

struct FeatureConfig {
  int ngram_min = 3;
  int ngram_max = 5;
  std::size_t dim = 32768;
  std::uint64_t hash_seed = 0;
  Normalize normalize = Normalize::l2;

  void validate() const;
};

// Bucket and sign hashes of one character n-gram.
std::size_t feature_bucket(std::string_view gram, const FeatureConfig& config);
double feature_sign(std::string_view gram, const FeatureConfig& config);

struct SparseVector {
  std::size_t dim = 0;
  std::vector<std::pair<std::uint32_t, double>> entries;  // sorted by index, no zeros

  std::vector<double> to_dense() const;
  double norm() const;
};

SparseVector featurize(std::string_view text, const FeatureConfig& config);

enum class DivergenceKind { squared_error, absolute_error };

std::string divergence_name(DivergenceKind kind);
DivergenceKind divergence_from_name(std::string_view name);

double divergence(std::span<const double> pred, std::span<const double> truth, DivergenceKind kind);

// Parameter blocks of the two-layer regressor, row-major:
// w1 is dim x hidden, w2 is hidden x n_experts.
template <typename T>
struct RouterParams {
  std::vector<T> w1, b1, w2, b2;
};

class RouterModel {
 public:
  RouterModel() = default;
  RouterModel(FeatureConfig features, std::vector<std::string> expert_ids, std::size_t hidden_dim);

  // Glorot-uniform weights, zero biases.
  static RouterModel initialized(FeatureConfig features, std::vector<std::string> expert_ids,
                                 std::size_t hidden_dim, std::uint64_t seed);

  const FeatureConfig& feature_config() const { return features_; }
  const std::vector<std::string>& expert_ids() const { return expert_ids_; }
  std::size_t dim() const { return features_.dim; }
  std::size_t hidden_dim() const { return hidden_; }
  std::size_t n_experts() const { return expert_ids_.size(); }
  std::size_t n_params() const;
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

  RouterParams<float>& params() { return params_; }
  const RouterParams<float>& params() const { return params_; }

  std::vector<double> forward(const SparseVector& x) const;
  std::vector<double> embed(const SparseVector& x) const;
  std::vector<double> predict_text(std::string_view text) const { return forward(featurize(text, features_)); }

  bool all_finite() const;

  // One JSON header line, then little-endian float32 blocks w1, b1, w2, b2.
  void save(const std::filesystem::path& path) const;
  static RouterModel load(const std::filesystem::path& path);
  std::string serialize() const;
  static RouterModel deserialize(std::string_view bytes);
  std::string fingerprint() const;

  bool operator==(const RouterModel& other) const;

 private:
  FeatureConfig features_;
  std::vector<std::string> expert_ids_;
  std::size_t hidden_ = 64;
  std::uint64_t seed_ = 0;
  RouterParams<float> params_;
};

std::vector<double> router_forward(const RouterModel& model, const SparseVector& x);
std::vector<double> router_embed(const RouterModel& model, const SparseVector& x);

// Gradient of divergence(forward(x), truth) with respect to every parameter.
struct RouterGradients {
  RouterParams<double> grad;
  double value = 0.0;
};

RouterGradients router_gradients(const RouterModel& model, const SparseVector& x, std::span<const double> truth,
                                 DivergenceKind kind);

// Max relative error between analytic and central-difference gradients.
double gradient_check(const RouterModel& model, const SparseVector& x, std::span<const double> truth,
                      DivergenceKind kind);

struct TrainConfig {
  double learning_rate = 5e-5;
  double lr_decay = 0.9;
  double weight_decay = 1e-5;
  std::size_t batch_size = 24;
  std::size_t max_epochs = 40;
  std::size_t patience = 16;
  std::size_t val_checks_per_epoch = 4;
  std::size_t hidden_dim = 64;
  DivergenceKind divergence = DivergenceKind::squared_error;
  std::uint64_t seed = 0;

  void validate() const;
};

// AdamW with dense moment updates. beta1 0.9, beta2 0.999, eps 1e-8.
class RouterOptimizer {
 public:
  RouterOptimizer(const RouterModel& model, double weight_decay);

  // One step on the mean divergence over the batch; returns the pre-step
  // mean divergence.
  double step(RouterModel& model, std::span<const SparseVector* const> xs,
              std::span<const std::vector<double>> truths, DivergenceKind kind, double learning_rate);

  std::size_t steps_taken() const { return t_; }

 private:
  double weight_decay_;
  std::size_t t_ = 0;
  RouterParams<double> m_, v_, g_;
};

struct CurvePoint {
  std::size_t step = 0;
  double train_divergence = 0.0;
  double val_divergence = 0.0;
};

struct TrainReport {
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  double initial_val_divergence = 0.0;
  double best_val_divergence = 0.0;
  std::vector<CurvePoint> train_curve;
  RouterModel checkpoint;
};

// Mean divergence of the model over the given instances.
double mean_divergence(const RouterModel& model, std::span<const SparseVector> features,
                       std::span<const std::vector<double>> truths, DivergenceKind kind);

// Targets for each instance from its Q-table row.
std::vector<std::vector<double>> q_targets(const QTable& qtable, std::span<const MlmInstance> instances);

TrainReport train_router(const QTable& qtable, std::span<const MlmInstance> train, std::span<const MlmInstance> val,
                         const FeatureConfig& features, const TrainConfig& config);

}  // namespace tryage
