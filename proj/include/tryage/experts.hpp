#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "tryage/corpus.hpp"

namespace tryage {

class ExpertError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExpertKind { builtin_ngram, remote };

struct ExpertSpec {
  std::string expert_id;
  std::uint64_t param_count = 1;
  std::uint64_t recency_days = 0;
  ExpertKind kind = ExpertKind::builtin_ngram;
  std::optional<std::string> endpoint;
  std::map<std::string, double> attributes;

  void validate() const;
};

nlohmann::ordered_json spec_to_json(const ExpertSpec& spec);
ExpertSpec spec_from_json(const nlohmann::json& j);

// Manifest: one ExpertSpec object per line.
std::vector<ExpertSpec> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, std::span<const ExpertSpec> specs);

// Probabilities keyed by token; experts that reserve unknown-token mass
// report it under kUnknownToken.
using TokenDistribution = std::map<std::string, double>;

inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kStartContext = "<s>";

// Anything that can score a masked-token instance.
class ExpertModel {
 public:
  virtual ~ExpertModel() = default;
  virtual const ExpertSpec& spec() const = 0;
  virtual TokenDistribution predict(const MlmInstance& instance) const = 0;
  // Cross-entropy -ln P(target | context).
  virtual double loss(const MlmInstance& instance) const = 0;
  // Top-1 token; ties go to the lexicographically smallest token.
  virtual std::string top_prediction(const MlmInstance& instance) const = 0;
};

using ExpertPtr = std::shared_ptr<ExpertModel>;

// Smoothed unigram/bigram masked-token predictor over the left context.
//
// Unigram: P1(t) = (c(t) + a) / (N + a(|V|+1)) over V plus <unk>.
// Bigram:  P2(t|w) = (c(w,t) + k P1(t)) / (N_w + k), k = a(|V|+1), for a
//          context w seen in training; unseen contexts use P1 directly.
// The vocabulary is frozen at build time; out-of-vocabulary tokens map to
// <unk>, both as targets and as contexts.
class NgramExpert final : public ExpertModel {
 public:
  NgramExpert(ExpertSpec spec, int order, double smoothing_alpha, std::set<std::string> vocab);

  const ExpertSpec& spec() const override { return spec_; }
  TokenDistribution predict(const MlmInstance& instance) const override;
  double loss(const MlmInstance& instance) const override;
  std::string top_prediction(const MlmInstance& instance) const override;

  int order() const { return order_; }
  double smoothing_alpha() const { return alpha_; }
  const std::set<std::string>& vocab() const { return vocab_; }

  // Adds `weight` to the counts of (context, target) at every order.
  void update(const MlmInstance& instance, double weight);

  // Accumulates counts from one training text.
  void observe_text(std::string_view text);

  double probability(std::string_view context, std::string_view token) const;
  double unigram_probability(std::string_view token) const;
  std::string context_key(const MlmInstance& instance) const;
  std::string map_token(std::string_view token) const;

  // Counts file: first line is the spec JSON (with order and alpha), then
  // "context<TAB>token<TAB>count" lines; unigram rows use context "<uni>".
  void save(const std::filesystem::path& path) const;
  static NgramExpert load(const std::filesystem::path& path);

  bool operator==(const NgramExpert& other) const;

 private:
  struct ContextCounts {
    std::unordered_map<std::string, double> counts;
    double total = 0.0;
  };

  double smoothing_mass() const { return alpha_ * static_cast<double>(vocab_.size() + 1); }
  const ContextCounts* find_context(std::string_view context) const;

  ExpertSpec spec_;
  int order_;
  double alpha_;
  std::set<std::string> vocab_;
  ContextCounts unigram_;
  std::unordered_map<std::string, ContextCounts> bigram_;
};

// param_count recorded for an n-gram expert.
std::uint64_t ngram_param_count(std::size_t vocab_size, int order);

NgramExpert train_ngram_expert(std::span<const std::string> texts, ExpertSpec spec, int order,
                               double smoothing_alpha);

TokenDistribution expert_predict(const ExpertModel& expert, const MlmInstance& instance);
double expert_loss(const ExpertModel& expert, const MlmInstance& instance);
void expert_update(ExpertModel& expert, const MlmInstance& instance, double weight);

// Ground-truth loss matrix: rows are instances, columns experts.
struct QTable {
  std::vector<std::string> expert_ids;
  std::vector<std::string> instance_ids;
  std::vector<double> losses;         // row-major
  std::vector<std::uint8_t> correct;  // row-major, 1 when top-1 equals target

  std::size_t rows() const { return instance_ids.size(); }
  std::size_t cols() const { return expert_ids.size(); }
  double loss(std::size_t row, std::size_t col) const { return losses[row * cols() + col]; }
  double& loss(std::size_t row, std::size_t col) { return losses[row * cols() + col]; }
  bool is_correct(std::size_t row, std::size_t col) const { return correct[row * cols() + col] != 0; }
  std::span<const double> loss_row(std::size_t row) const {
    return {losses.data() + row * cols(), cols()};
  }
  std::size_t row_of(std::string_view instance_id) const;
  std::size_t col_of(std::string_view expert_id) const;
  void validate() const;
};

enum class FailurePolicy { strict, lenient };

struct QTableBuild {
  QTable table;
  std::vector<std::string> excluded_experts;
  std::vector<std::string> warnings;
};

QTableBuild build_q_table(std::span<const ExpertPtr> library, std::span<const MlmInstance> instances,
                          FailurePolicy policy = FailurePolicy::strict);

// <path> holds losses; the sibling "<stem>.correct.csv" holds 0/1 flags.
void save_q_table(const QTable& table, const std::filesystem::path& path);
QTable load_q_table(const std::filesystem::path& path);
std::filesystem::path correct_path_for(const std::filesystem::path& loss_path);

}  // namespace tryage
