#include "tryage/experts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tryage/util.hpp"

namespace tryage {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kUnigramContext = "<uni>";

std::string kind_name(ExpertKind kind) {
  return kind == ExpertKind::remote ? "remote" : "builtin_ngram";
}

ExpertKind kind_from_name(const std::string& name) {
  if (name == "builtin_ngram") return ExpertKind::builtin_ngram;
  if (name == "remote") return ExpertKind::remote;
  throw ExpertError("unknown expert kind '" + name + "'");
}

}  // namespace

void ExpertSpec::validate() const {
  if (expert_id.empty()) throw ExpertError("expert_id must be non-empty");
  if (param_count < 1) throw ExpertError("param_count must be >= 1 for " + expert_id);
  if (kind == ExpertKind::remote && (!endpoint || endpoint->empty())) {
    throw ExpertError("remote expert " + expert_id + " needs an endpoint");
  }
}

nlohmann::ordered_json spec_to_json(const ExpertSpec& spec) {
  nlohmann::ordered_json j;
  j["expert_id"] = spec.expert_id;
  j["param_count"] = spec.param_count;
  j["recency_days"] = spec.recency_days;
  j["kind"] = kind_name(spec.kind);
  if (spec.endpoint) j["endpoint"] = *spec.endpoint;
  nlohmann::ordered_json attrs = nlohmann::ordered_json::object();
  for (const auto& [k, v] : spec.attributes) attrs[k] = v;
  j["attributes"] = attrs;
  return j;
}

ExpertSpec spec_from_json(const json& j) {
  ExpertSpec s;
  try {
    s.expert_id = j.at("expert_id").get<std::string>();
    s.param_count = j.at("param_count").get<std::uint64_t>();
    s.recency_days = j.value("recency_days", std::uint64_t{0});
    s.kind = kind_from_name(j.value("kind", std::string("builtin_ngram")));
    if (j.contains("endpoint") && !j["endpoint"].is_null()) s.endpoint = j["endpoint"].get<std::string>();
    if (j.contains("attributes")) {
      for (const auto& [k, v] : j["attributes"].items()) s.attributes[k] = v.get<double>();
    }
  } catch (const json::exception& e) {
    throw ExpertError(std::string("malformed expert spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<ExpertSpec> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ExpertError("cannot read manifest " + path.string());
  std::vector<ExpertSpec> specs;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      specs.push_back(spec_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ExpertError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!ids.insert(specs.back().expert_id).second) {
      throw ExpertError("duplicate expert_id '" + specs.back().expert_id + "' in manifest");
    }
  }
  return specs;
}

void save_manifest(const fs::path& path, std::span<const ExpertSpec> specs) {
  std::string out;
  for (const auto& s : specs) out += spec_to_json(s).dump() + "\n";
  write_file(path, out);
}

std::uint64_t ngram_param_count(std::size_t vocab_size, int order) {
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(vocab_size) * static_cast<std::uint64_t>(order));
}

NgramExpert::NgramExpert(ExpertSpec spec, int order, double smoothing_alpha, std::set<std::string> vocab)
    : spec_(std::move(spec)), order_(order), alpha_(smoothing_alpha), vocab_(std::move(vocab)) {
  if (order_ != 1 && order_ != 2) throw ExpertError("n-gram order must be 1 or 2");
  if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) throw ExpertError("smoothing_alpha must be positive");
  if (vocab_.contains(std::string(kUnknownToken))) throw ExpertError("vocabulary may not contain <unk>");
  spec_.kind = ExpertKind::builtin_ngram;
  spec_.validate();
}

std::string NgramExpert::map_token(std::string_view token) const {
  auto it = vocab_.find(std::string(token));
  return it == vocab_.end() ? std::string(kUnknownToken) : *it;
}

std::string NgramExpert::context_key(const MlmInstance& instance) const {
  if (order_ == 1) return {};
  if (instance.mask_index == 0) return std::string(kStartContext);
  return map_token(instance.tokens.at(instance.mask_index - 1));
}

const NgramExpert::ContextCounts* NgramExpert::find_context(std::string_view context) const {
  if (order_ == 1 || context.empty()) return nullptr;
  auto it = bigram_.find(std::string(context));
  if (it == bigram_.end() || !(it->second.total > 0.0)) return nullptr;
  return &it->second;
}

double NgramExpert::unigram_probability(std::string_view token) const {
  auto it = unigram_.counts.find(std::string(token));
  const double c = it == unigram_.counts.end() ? 0.0 : it->second;
  return (c + alpha_) / (unigram_.total + smoothing_mass());
}

double NgramExpert::probability(std::string_view context, std::string_view token) const {
  const double p1 = unigram_probability(token);
  const ContextCounts* ctx = find_context(context);
  if (!ctx) return p1;
  auto it = ctx->counts.find(std::string(token));
  const double c = it == ctx->counts.end() ? 0.0 : it->second;
  const double k = smoothing_mass();
  return (c + k * p1) / (ctx->total + k);
}

TokenDistribution NgramExpert::predict(const MlmInstance& instance) const {
  const std::string ctx = context_key(instance);
  TokenDistribution dist;
  for (const auto& t : vocab_) dist.emplace(t, probability(ctx, t));
  dist.emplace(std::string(kUnknownToken), probability(ctx, kUnknownToken));
  return dist;
}

double NgramExpert::loss(const MlmInstance& instance) const {
  return -std::log(probability(context_key(instance), map_token(instance.target)));
}

std::string NgramExpert::top_prediction(const MlmInstance& instance) const {
  const std::string ctx = context_key(instance);
  std::string best(kUnknownToken);
  double best_p = probability(ctx, kUnknownToken);
  // Iteration is in lexicographic order; strict > keeps the smallest token on ties.
  for (const auto& t : vocab_) {
    const double p = probability(ctx, t);
    if (p > best_p || (p == best_p && t < best)) {
      best_p = p;
      best = t;
    }
  }
  return best;
}

void NgramExpert::update(const MlmInstance& instance, double weight) {
  if (!(weight >= 0.0) || !std::isfinite(weight)) throw ExpertError("update weight must be non-negative");
  if (weight == 0.0) return;
  const std::string target = map_token(instance.target);
  unigram_.counts[target] += weight;
  unigram_.total += weight;
  if (order_ == 2) {
    auto& ctx = bigram_[context_key(instance)];
    ctx.counts[target] += weight;
    ctx.total += weight;
  }
}

void NgramExpert::observe_text(std::string_view text) {
  std::vector<std::string> tokens = tokenize(text);
  if (tokens.size() > kMaxSequenceTokens) tokens.resize(kMaxSequenceTokens);
  std::string prev(kStartContext);
  for (const auto& raw : tokens) {
    const std::string t = map_token(raw);
    unigram_.counts[t] += 1.0;
    unigram_.total += 1.0;
    if (order_ == 2) {
      auto& ctx = bigram_[prev];
      ctx.counts[t] += 1.0;
      ctx.total += 1.0;
    }
    prev = t;
  }
}

void NgramExpert::save(const fs::path& path) const {
  nlohmann::ordered_json header;
  header["spec"] = spec_to_json(spec_);
  header["order"] = order_;
  header["smoothing_alpha"] = alpha_;
  std::string out = header.dump() + "\n";

  auto emit = [&out](std::string_view ctx, const std::string& tok, double count) {
    out.append(ctx);
    out += '\t';
    out += tok;
    out += '\t';
    out += format_double(count);
    out += '\n';
  };
  // Unigram rows list the whole vocabulary so zero-count words survive.
  for (const auto& t : vocab_) {
    auto it = unigram_.counts.find(t);
    emit(kUnigramContext, t, it == unigram_.counts.end() ? 0.0 : it->second);
  }
  if (auto it = unigram_.counts.find(std::string(kUnknownToken)); it != unigram_.counts.end()) {
    emit(kUnigramContext, it->first, it->second);
  }
  std::vector<std::string> contexts;
  for (const auto& [k, _] : bigram_) contexts.push_back(k);
  std::sort(contexts.begin(), contexts.end());
  for (const auto& c : contexts) {
    const auto& counts = bigram_.at(c).counts;
    std::vector<std::string> toks;
    for (const auto& [k, _] : counts) toks.push_back(k);
    std::sort(toks.begin(), toks.end());
    for (const auto& t : toks) emit(c, t, counts.at(t));
  }
  write_file(path, out);
}

NgramExpert NgramExpert::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ExpertError("cannot read expert file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ExpertError("empty expert file " + path.string());
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw ExpertError("bad expert header in " + path.string() + ": " + e.what());
  }
  ExpertSpec spec = spec_from_json(header.at("spec"));
  const int order = header.at("order").get<int>();
  const double alpha = header.at("smoothing_alpha").get<double>();

  struct Row {
    std::string ctx, tok;
    double count;
  };
  std::vector<Row> rows;
  std::set<std::string> vocab;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) {
      throw ExpertError(path.string() + ":" + std::to_string(line_no) + ": expected three tab-separated fields");
    }
    Row r{line.substr(0, a), line.substr(a + 1, b - a - 1), parse_double(std::string_view(line).substr(b + 1))};
    if (r.ctx == kUnigramContext && r.tok != kUnknownToken) vocab.insert(r.tok);
    rows.push_back(std::move(r));
  }
  NgramExpert expert(std::move(spec), order, alpha, std::move(vocab));
  for (const auto& r : rows) {
    if (r.ctx == kUnigramContext) {
      if (r.count != 0.0) expert.unigram_.counts[r.tok] = r.count;
      expert.unigram_.total += r.count;
    } else {
      auto& ctx = expert.bigram_[r.ctx];
      ctx.counts[r.tok] = r.count;
      ctx.total += r.count;
    }
  }
  return expert;
}

bool NgramExpert::operator==(const NgramExpert& other) const {
  auto same_counts = [](const ContextCounts& a, const ContextCounts& b) {
    return a.counts == b.counts && a.total == b.total;
  };
  if (spec_to_json(spec_) != spec_to_json(other.spec_) || order_ != other.order_ || alpha_ != other.alpha_ ||
      vocab_ != other.vocab_ || !same_counts(unigram_, other.unigram_) || bigram_.size() != other.bigram_.size()) {
    return false;
  }
  for (const auto& [k, v] : bigram_) {
    auto it = other.bigram_.find(k);
    if (it == other.bigram_.end() || !same_counts(v, it->second)) return false;
  }
  return true;
}

NgramExpert train_ngram_expert(std::span<const std::string> texts, ExpertSpec spec, int order,
                               double smoothing_alpha) {
  std::set<std::string> vocab;
  std::size_t n_tokens = 0;
  for (const auto& text : texts) {
    std::vector<std::string> tokens = tokenize(text);
    if (tokens.size() > kMaxSequenceTokens) tokens.resize(kMaxSequenceTokens);
    n_tokens += tokens.size();
    vocab.insert(tokens.begin(), tokens.end());
  }
  if (n_tokens == 0) throw ExpertError("training text for " + spec.expert_id + " is empty");
  spec.param_count = ngram_param_count(vocab.size(), order);
  spec.kind = ExpertKind::builtin_ngram;
  NgramExpert expert(std::move(spec), order, smoothing_alpha, std::move(vocab));
  for (const auto& text : texts) expert.observe_text(text);
  return expert;
}

TokenDistribution expert_predict(const ExpertModel& expert, const MlmInstance& instance) {
  return expert.predict(instance);
}

double expert_loss(const ExpertModel& expert, const MlmInstance& instance) {
  return expert.loss(instance);
}

void expert_update(ExpertModel& expert, const MlmInstance& instance, double weight) {
  auto* ngram = dynamic_cast<NgramExpert*>(&expert);
  if (!ngram) throw ExpertError("expert " + expert.spec().expert_id + " is not updatable");
  ngram->update(instance, weight);
}

std::size_t QTable::row_of(std::string_view instance_id) const {
  auto it = std::find(instance_ids.begin(), instance_ids.end(), instance_id);
  if (it == instance_ids.end()) throw ExpertError("instance '" + std::string(instance_id) + "' not in Q-table");
  return static_cast<std::size_t>(it - instance_ids.begin());
}

std::size_t QTable::col_of(std::string_view expert_id) const {
  auto it = std::find(expert_ids.begin(), expert_ids.end(), expert_id);
  if (it == expert_ids.end()) throw ExpertError("expert '" + std::string(expert_id) + "' not in Q-table");
  return static_cast<std::size_t>(it - expert_ids.begin());
}

void QTable::validate() const {
  if (losses.size() != rows() * cols() || correct.size() != rows() * cols()) {
    throw ExpertError("Q-table matrix shape does not match its ids");
  }
  for (double l : losses) {
    if (!std::isfinite(l) || l < 0.0) throw ExpertError("Q-table losses must be finite and non-negative");
  }
}

QTableBuild build_q_table(std::span<const ExpertPtr> library, std::span<const MlmInstance> instances,
                          FailurePolicy policy) {
  if (library.empty()) throw ExpertError("Q-table needs at least one expert");
  if (instances.empty()) throw ExpertError("Q-table needs at least one instance");

  QTableBuild build;
  std::vector<std::vector<double>> columns;
  std::vector<std::vector<std::uint8_t>> hits;
  for (const auto& expert : library) {
    std::vector<double> col(instances.size());
    std::vector<std::uint8_t> hit(instances.size());
    bool failed = false;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      try {
        col[i] = expert->loss(instances[i]);
        hit[i] = expert->top_prediction(instances[i]) == instances[i].target ? 1 : 0;
      } catch (const std::exception& e) {
        if (policy == FailurePolicy::strict) {
          throw ExpertError("row " + std::to_string(i) + " (" + instances[i].id() + ") failed for expert " +
                            expert->spec().expert_id + ": " + e.what());
        }
        build.warnings.push_back("excluding expert " + expert->spec().expert_id + ": " + e.what());
        failed = true;
        break;
      }
    }
    if (failed) {
      build.excluded_experts.push_back(expert->spec().expert_id);
      continue;
    }
    build.table.expert_ids.push_back(expert->spec().expert_id);
    columns.push_back(std::move(col));
    hits.push_back(std::move(hit));
  }
  if (columns.empty()) throw ExpertError("every expert failed while building the Q-table");

  QTable& t = build.table;
  for (const auto& inst : instances) t.instance_ids.push_back(inst.id());
  t.losses.resize(t.rows() * t.cols());
  t.correct.resize(t.rows() * t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      t.losses[i * t.cols() + j] = columns[j][i];
      t.correct[i * t.cols() + j] = hits[j][i];
    }
  }
  t.validate();
  return build;
}

fs::path correct_path_for(const fs::path& loss_path) {
  fs::path p = loss_path;
  p.replace_extension();
  return fs::path(p.string() + ".correct.csv");
}

void save_q_table(const QTable& table, const fs::path& path) {
  table.validate();
  std::vector<std::string> header = {"instance_id"};
  header.insert(header.end(), table.expert_ids.begin(), table.expert_ids.end());
  std::string losses = csv_row(header);
  std::string correct = csv_row(header);
  for (std::size_t i = 0; i < table.rows(); ++i) {
    std::vector<std::string> lrow = {table.instance_ids[i]};
    std::vector<std::string> crow = {table.instance_ids[i]};
    for (std::size_t j = 0; j < table.cols(); ++j) {
      lrow.push_back(format_double(table.loss(i, j)));
      crow.push_back(table.is_correct(i, j) ? "1" : "0");
    }
    losses += csv_row(lrow);
    correct += csv_row(crow);
  }
  write_file(path, losses);
  write_file(correct_path_for(path), correct);
}

QTable load_q_table(const fs::path& path) {
  auto read_matrix = [](const fs::path& p, std::vector<std::string>& header, std::vector<std::string>& ids,
                        std::vector<double>& values) {
    std::ifstream in(p);
    if (!in) throw ExpertError("cannot read " + p.string());
    std::string line;
    if (!std::getline(in, line)) throw ExpertError("empty Q-table file " + p.string());
    header = csv_parse_line(line);
    if (header.empty() || header[0] != "instance_id") throw ExpertError("Q-table header must start with instance_id");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      auto fields = csv_parse_line(line);
      if (fields.size() != header.size()) {
        throw ExpertError(p.string() + ":" + std::to_string(line_no) + ": wrong number of fields");
      }
      ids.push_back(fields[0]);
      for (std::size_t j = 1; j < fields.size(); ++j) values.push_back(parse_double(fields[j]));
    }
  };
  QTable t;
  std::vector<std::string> header, cheader, cids;
  std::vector<double> flags;
  read_matrix(path, header, t.instance_ids, t.losses);
  read_matrix(correct_path_for(path), cheader, cids, flags);
  if (cheader != header || cids != t.instance_ids) throw ExpertError("correct table does not match loss table");
  t.expert_ids.assign(header.begin() + 1, header.end());
  t.correct.reserve(flags.size());
  for (double f : flags) t.correct.push_back(f != 0.0 ? 1 : 0);
  t.validate();
  return t;
}

}  // namespace tryage
