#include "tryage/objective.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>

#include "tryage/util.hpp"

namespace tryage {

using nlohmann::json;

std::string constraint_kind_name(ConstraintKind kind) {
  switch (kind) {
    case ConstraintKind::size_linear: return "size_linear";
    case ConstraintKind::size_log: return "size_log";
    case ConstraintKind::recency: return "recency";
    case ConstraintKind::attribute: return "attribute";
  }
  return "size_linear";
}

ConstraintKind constraint_kind_from_name(std::string_view name) {
  if (name == "size_linear") return ConstraintKind::size_linear;
  if (name == "size_log") return ConstraintKind::size_log;
  if (name == "recency") return ConstraintKind::recency;
  if (name == "attribute") return ConstraintKind::attribute;
  throw ObjectiveError("unknown constraint kind '" + std::string(name) + "'");
}

void ConstraintTerm::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ObjectiveError("lambda must be finite and non-negative");
  if (kind == ConstraintKind::attribute && attribute.empty()) {
    throw ObjectiveError("attribute constraint needs an attribute name");
  }
}

nlohmann::ordered_json constraint_to_json(const ConstraintTerm& term) {
  nlohmann::ordered_json j;
  j["kind"] = constraint_kind_name(term.kind);
  j["lambda"] = term.lambda;
  if (term.kind == ConstraintKind::attribute) j["attribute"] = term.attribute;
  return j;
}

ConstraintTerm constraint_from_json(const json& j) {
  if (!j.is_object()) throw ObjectiveError("constraint must be a JSON object");
  ConstraintTerm t;
  try {
    t.kind = constraint_kind_from_name(j.at("kind").get<std::string>());
    t.lambda = j.at("lambda").get<double>();
    if (j.contains("attribute") && !j["attribute"].is_null()) t.attribute = j["attribute"].get<std::string>();
  } catch (const json::exception& e) {
    throw ObjectiveError(std::string("malformed constraint: ") + e.what());
  }
  t.validate();
  return t;
}

std::vector<FlagBinding> default_flag_bindings() {
  return {{"Smallest model", {ConstraintKind::size_linear, 16.0, {}}},
          {"Newest model", {ConstraintKind::recency, 16.0, {}}}};
}

std::vector<FlagBinding> load_flag_bindings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ObjectiveError("cannot read flag bindings " + path.string());
  std::vector<FlagBinding> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      FlagBinding b;
      b.flag_text = j.at("flag").get<std::string>();
      if (trim(b.flag_text).empty()) throw ObjectiveError("empty flag text");
      b.constraint = constraint_from_json(j);
      out.push_back(std::move(b));
    } catch (const std::exception& e) {
      throw ObjectiveError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_flag_bindings(const std::filesystem::path& path, std::span<const FlagBinding> bindings) {
  std::string out;
  for (const auto& b : bindings) {
    nlohmann::ordered_json j;
    j["flag"] = b.flag_text;
    const nlohmann::ordered_json c = constraint_to_json(b.constraint);
    for (const auto& [k, v] : c.items()) j[k] = v;
    out += j.dump() + "\n";
  }
  write_file(path, out);
}

namespace {

bool is_ws(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string normalize_flag_name(std::string_view name) {
  std::string out;
  bool gap = false;
  for (char c : name) {
    if (is_ws(c)) {
      gap = !out.empty();
      continue;
    }
    if (gap) out += ' ';
    gap = false;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

const std::regex& flag_pattern() {
  static const std::regex re(R"(\[\s*flag\s*:\s*([^\]]*)\])", std::regex::icase | std::regex::ECMAScript);
  return re;
}

}  // namespace

ParsedFlags parse_flags(std::string_view text, std::span<const FlagBinding> bindings) {
  ParsedFlags out;
  const std::string s(text);
  std::string clean;
  bool removed = false;
  std::size_t pos = 0;
  auto append = [&](std::string_view seg) {
    if (removed) {
      std::size_t i = 0;
      while (i < seg.size() && is_ws(seg[i])) ++i;
      seg.remove_prefix(i);
      if (seg.empty()) return;
      if (!clean.empty()) clean += ' ';
      removed = false;
    }
    clean.append(seg);
  };
  for (auto it = std::sregex_iterator(s.begin(), s.end(), flag_pattern()); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    append(std::string_view(s).substr(pos, static_cast<std::size_t>(m.position(0)) - pos));
    while (!clean.empty() && is_ws(clean.back())) clean.pop_back();
    removed = true;
    pos = static_cast<std::size_t>(m.position(0) + m.length(0));

    const std::string name = trim(m.str(1));
    const std::string key = normalize_flag_name(name);
    bool bound = false;
    for (const auto& b : bindings) {
      if (normalize_flag_name(b.flag_text) == key) {
        out.constraints.push_back(b.constraint);
        bound = true;
        break;
      }
    }
    (bound ? out.flags : out.unknown_flags).push_back(name);
  }
  append(std::string_view(s).substr(pos));
  out.clean_text = std::move(clean);
  return out;
}

double constraint_value(const ConstraintTerm& term, const ExpertSpec& expert, std::span<const ExpertSpec> library) {
  if (std::none_of(library.begin(), library.end(),
                   [&](const ExpertSpec& s) { return s.expert_id == expert.expert_id; })) {
    throw ObjectiveError("expert " + expert.expert_id + " is not in the library");
  }
  switch (term.kind) {
    case ConstraintKind::size_linear: {
      std::uint64_t mx = 0;
      for (const auto& s : library) mx = std::max(mx, s.param_count);
      return static_cast<double>(expert.param_count) / static_cast<double>(mx);
    }
    case ConstraintKind::size_log: {
      std::uint64_t mx = 0;
      for (const auto& s : library) mx = std::max(mx, s.param_count);
      if (mx < 2) throw ObjectiveError("size_log needs a library whose largest param_count is at least 2");
      return std::log(static_cast<double>(expert.param_count)) / std::log(static_cast<double>(mx));
    }
    case ConstraintKind::recency: {
      std::uint64_t mx = 0;
      for (const auto& s : library) mx = std::max(mx, s.recency_days);
      return mx == 0 ? 0.0 : static_cast<double>(expert.recency_days) / static_cast<double>(mx);
    }
    case ConstraintKind::attribute: {
      double mx = 0.0;
      for (const auto& s : library) {
        auto it = s.attributes.find(term.attribute);
        if (it == s.attributes.end()) {
          throw ObjectiveError("expert " + s.expert_id + " has no attribute '" + term.attribute + "'");
        }
        if (!(it->second >= 0.0)) throw ObjectiveError("attribute '" + term.attribute + "' must be non-negative");
        mx = std::max(mx, it->second);
      }
      return mx == 0.0 ? 0.0 : expert.attributes.at(term.attribute) / mx;
    }
  }
  return 0.0;
}

std::size_t RoutingDecision::chosen_index() const {
  auto it = std::find(expert_ids.begin(), expert_ids.end(), chosen_expert);
  if (it == expert_ids.end()) throw ObjectiveError("chosen expert missing from decision");
  return static_cast<std::size_t>(it - expert_ids.begin());
}

nlohmann::ordered_json decision_to_json(const RoutingDecision& d) {
  nlohmann::ordered_json j;
  j["mode"] = d.mode == RouteMode::oracle ? "oracle" : "predictive";
  j["chosen_expert"] = d.chosen_expert;
  j["tie_broken"] = d.tie_broken;
  j["expert_ids"] = d.expert_ids;
  j["losses"] = d.losses;
  j["objective_values"] = d.objective_values;
  nlohmann::ordered_json cs = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < d.constraints.size(); ++c) {
    nlohmann::ordered_json cj = constraint_to_json(d.constraints[c]);
    cj["contributions"] = d.constraint_contributions[c];
    cs.push_back(std::move(cj));
  }
  j["constraints"] = std::move(cs);
  return j;
}

RoutingDecision route_with_losses(std::span<const double> losses, std::span<const ExpertSpec> candidates,
                                  std::span<const ExpertSpec> library, std::span<const ConstraintTerm> constraints,
                                  RouteMode mode) {
  if (candidates.empty()) throw ObjectiveError("cannot route over an empty library");
  if (losses.size() != candidates.size()) {
    throw ObjectiveError("loss vector has " + std::to_string(losses.size()) + " entries for " +
                         std::to_string(candidates.size()) + " experts");
  }
  for (const auto& c : constraints) c.validate();

  RoutingDecision d;
  d.mode = mode;
  d.losses.assign(losses.begin(), losses.end());
  d.constraints.assign(constraints.begin(), constraints.end());
  d.constraint_contributions.assign(constraints.size(), std::vector<double>(candidates.size()));
  d.objective_values.assign(losses.begin(), losses.end());
  for (const auto& s : candidates) d.expert_ids.push_back(s.expert_id);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    for (std::size_t c = 0; c < constraints.size(); ++c) {
      const double v = constraints[c].lambda * constraint_value(constraints[c], candidates[i], library);
      d.constraint_contributions[c][i] = v;
      d.objective_values[i] += v;
    }
    if (!std::isfinite(d.objective_values[i])) {
      throw ObjectiveError("non-finite objective for expert " + candidates[i].expert_id);
    }
  }

  std::size_t best = 0;
  std::size_t n_min = 1;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double a = d.objective_values[i];
    const double b = d.objective_values[best];
    if (a < b) {
      best = i;
      n_min = 1;
    } else if (a == b) {
      ++n_min;
      const auto& ci = candidates[i];
      const auto& cb = candidates[best];
      if (ci.param_count < cb.param_count || (ci.param_count == cb.param_count && ci.expert_id < cb.expert_id)) {
        best = i;
      }
    }
  }
  d.chosen_expert = candidates[best].expert_id;
  d.tie_broken = n_min > 1;
  return d;
}

RoutingDecision route_oracle(std::span<const double> q_row, std::span<const ExpertSpec> library,
                             std::span<const ConstraintTerm> constraints) {
  return route_with_losses(q_row, library, library, constraints, RouteMode::oracle);
}

QTablePredictor::QTablePredictor(const QTable& table, std::span<const MlmInstance> instances) : table_(table) {
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < table.rows(); ++i) by_id.emplace(table.instance_ids[i], i);
  for (const auto& inst : instances) {
    auto it = by_id.find(inst.id());
    if (it == by_id.end()) throw ObjectiveError("instance " + inst.id() + " has no Q-table row");
    rows_.emplace(inst.masked_text(), it->second);
  }
}

std::vector<double> QTablePredictor::predict(std::string_view clean_text) const {
  auto it = rows_.find(std::string(clean_text));
  if (it == rows_.end()) throw ObjectiveError("no Q-table row for the given text");
  auto row = table_.loss_row(it->second);
  return {row.begin(), row.end()};
}

PredictiveRoute route_predictive(const LossPredictor& predictor, std::string_view text,
                                 std::span<const ExpertSpec> library, std::span<const FlagBinding> bindings,
                                 std::span<const ConstraintTerm> extra_constraints) {
  PredictiveRoute out;
  out.parsed = parse_flags(text, bindings);
  std::vector<ExpertSpec> candidates;
  for (const auto& id : predictor.expert_ids()) {
    auto it = std::find_if(library.begin(), library.end(), [&](const ExpertSpec& s) { return s.expert_id == id; });
    if (it == library.end()) throw ObjectiveError("router expert '" + id + "' is not in the library");
    candidates.push_back(*it);
  }
  std::vector<ConstraintTerm> constraints = out.parsed.constraints;
  constraints.insert(constraints.end(), extra_constraints.begin(), extra_constraints.end());
  const std::vector<double> predicted = predictor.predict(out.parsed.clean_text);
  out.decision = route_with_losses(predicted, candidates, library, constraints, RouteMode::predictive);
  return out;
}

}  // namespace tryage
