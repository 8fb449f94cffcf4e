#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "tryage/experts.hpp"
#include "tryage/objective.hpp"
#include "tryage/pipeline.hpp"
#include "tryage/util.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh empty directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = fs::temp_directory_path() /
            ("tryage-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline tryage::ExpertSpec spec(std::string id, std::uint64_t params, std::uint64_t days = 0,
                               std::map<std::string, double> attrs = {}) {
  tryage::ExpertSpec s;
  s.expert_id = std::move(id);
  s.param_count = params;
  s.recency_days = days;
  s.attributes = std::move(attrs);
  return s;
}

// Exhaustive objective evaluation written without the library's routing
// code: every constraint value is recomputed from the raw specs.
struct BruteDecision {
  std::size_t chosen = 0;
  bool tie = false;
  std::vector<double> objectives;
};

inline double brute_value(const tryage::ConstraintTerm& c, const tryage::ExpertSpec& e,
                          const std::vector<tryage::ExpertSpec>& lib) {
  using tryage::ConstraintKind;
  double mx = 0.0;
  double v = 0.0;
  for (const auto& s : lib) {
    switch (c.kind) {
      case ConstraintKind::size_linear: mx = std::max(mx, double(s.param_count)); break;
      case ConstraintKind::size_log: mx = std::max(mx, double(s.param_count)); break;
      case ConstraintKind::recency: mx = std::max(mx, double(s.recency_days)); break;
      case ConstraintKind::attribute: mx = std::max(mx, s.attributes.at(c.attribute)); break;
    }
  }
  switch (c.kind) {
    case ConstraintKind::size_linear: v = double(e.param_count) / mx; break;
    case ConstraintKind::size_log: v = std::log(double(e.param_count)) / std::log(mx); break;
    case ConstraintKind::recency: v = mx == 0.0 ? 0.0 : double(e.recency_days) / mx; break;
    case ConstraintKind::attribute: v = mx == 0.0 ? 0.0 : e.attributes.at(c.attribute) / mx; break;
  }
  return v;
}

inline BruteDecision brute_route(const std::vector<double>& losses, const std::vector<tryage::ExpertSpec>& lib,
                                 const std::vector<tryage::ConstraintTerm>& constraints) {
  BruteDecision d;
  for (std::size_t i = 0; i < lib.size(); ++i) {
    double obj = losses[i];
    for (const auto& c : constraints) obj += c.lambda * brute_value(c, lib[i], lib);
    d.objectives.push_back(obj);
  }
  const double best = *std::min_element(d.objectives.begin(), d.objectives.end());
  std::vector<std::size_t> winners;
  for (std::size_t i = 0; i < lib.size(); ++i) {
    if (d.objectives[i] == best) winners.push_back(i);
  }
  d.tie = winners.size() > 1;
  d.chosen = winners.front();
  for (std::size_t i : winners) {
    const auto& a = lib[i];
    const auto& b = lib[d.chosen];
    if (a.param_count < b.param_count || (a.param_count == b.param_count && a.expert_id < b.expert_id)) d.chosen = i;
  }
  return d;
}

// Decision equality ignoring the mode field.
inline bool same_decision(const tryage::RoutingDecision& a, const tryage::RoutingDecision& b) {
  return a.chosen_expert == b.chosen_expert && a.tie_broken == b.tie_broken && a.expert_ids == b.expert_ids &&
         a.losses == b.losses && a.objective_values == b.objective_values && a.constraints == b.constraints &&
         a.constraint_contributions == b.constraint_contributions;
}

inline tryage::PipelineConfig small_config(std::size_t n_domains, std::size_t prompts, double overlap,
                                           std::uint64_t seed = 42) {
  tryage::PipelineConfig c;
  c.seed = seed;
  c.synth.n_domains = n_domains;
  c.synth.prompts_per_domain = prompts;
  c.synth.overlap = overlap;
  c.synth.seed = seed;
  return c;
}

inline tryage::Fixture make_fixture(const tryage::PipelineConfig& config) {
  tryage::SynthConfig sc = config.synth;
  sc.seed = config.seed;
  return tryage::build_fixture(tryage::synth_corpus(sc), config);
}

inline std::string golden_dir() { return TRYAGE_GOLDEN_DIR; }

}  // namespace testing
