#include "tryage/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "tryage/util.hpp"

namespace tryage {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool parse_bool(std::string_view v) {
  const std::string s = to_lower_ascii(trim(v));
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("expected a boolean, got '" + std::string(v) + "'");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

struct Key {
  std::string name;
  std::function<void(PipelineConfig&, std::string_view)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

#define TRYAGE_U64(key, expr)                                                                        \
  Key {                                                                                              \
    key, [](PipelineConfig& c, std::string_view v) { expr = static_cast<std::decay_t<decltype(expr)>>(parse_u64(v)); }, \
        [](const PipelineConfig& c) { return std::to_string(expr); }                                 \
  }
#define TRYAGE_REAL(key, expr)                                                              \
  Key {                                                                                     \
    key, [](PipelineConfig& c, std::string_view v) { expr = parse_double(v); },             \
        [](const PipelineConfig& c) { return format_double(expr); }                         \
  }
#define TRYAGE_PATH(key, expr)                                                              \
  Key {                                                                                     \
    key, [](PipelineConfig& c, std::string_view v) { expr = fs::path(trim(v)); },           \
        [](const PipelineConfig& c) { return expr.generic_string(); }                       \
  }
#define TRYAGE_BOOL(key, expr)                                                              \
  Key {                                                                                     \
    key, [](PipelineConfig& c, std::string_view v) { expr = parse_bool(v); },               \
        [](const PipelineConfig& c) { return bool_text(expr); }                             \
  }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      TRYAGE_U64("seed", c.seed),
      TRYAGE_U64("synth.n_domains", c.synth.n_domains),
      TRYAGE_U64("synth.prompts_per_domain", c.synth.prompts_per_domain),
      TRYAGE_U64("synth.vocab_size", c.synth.vocab_size),
      TRYAGE_REAL("synth.overlap", c.synth.overlap),
      TRYAGE_U64("synth.min_length", c.synth.min_length),
      TRYAGE_U64("synth.max_length", c.synth.max_length),
      TRYAGE_U64("synth.branching", c.synth.branching),
      TRYAGE_U64("corpus.masks_per_record", c.masks_per_record),
      TRYAGE_REAL("corpus.split_train", c.split.train),
      TRYAGE_REAL("corpus.split_val", c.split.val),
      TRYAGE_REAL("corpus.split_test", c.split.test),
      TRYAGE_U64("experts.order", c.expert_order),
      TRYAGE_REAL("experts.smoothing_alpha", c.smoothing_alpha),
      TRYAGE_BOOL("qtable.strict", c.qtable_strict),
      TRYAGE_U64("features.ngram_min", c.features.ngram_min),
      TRYAGE_U64("features.ngram_max", c.features.ngram_max),
      TRYAGE_U64("features.dim", c.features.dim),
      TRYAGE_U64("features.hash_seed", c.features.hash_seed),
      Key{"features.normalize",
          [](PipelineConfig& c, std::string_view v) {
            const std::string s = trim(v);
            if (s == "l2") c.features.normalize = Normalize::l2;
            else if (s == "none") c.features.normalize = Normalize::none;
            else throw ConfigError("features.normalize must be l2 or none");
          },
          [](const PipelineConfig& c) { return std::string(c.features.normalize == Normalize::l2 ? "l2" : "none"); }},
      TRYAGE_REAL("train.learning_rate", c.train.learning_rate),
      TRYAGE_REAL("train.lr_decay", c.train.lr_decay),
      TRYAGE_REAL("train.weight_decay", c.train.weight_decay),
      TRYAGE_U64("train.batch_size", c.train.batch_size),
      TRYAGE_U64("train.max_epochs", c.train.max_epochs),
      TRYAGE_U64("train.patience", c.train.patience),
      TRYAGE_U64("train.val_checks_per_epoch", c.train.val_checks_per_epoch),
      TRYAGE_U64("train.hidden_dim", c.train.hidden_dim),
      Key{"train.divergence",
          [](PipelineConfig& c, std::string_view v) { c.train.divergence = divergence_from_name(trim(v)); },
          [](const PipelineConfig& c) { return divergence_name(c.train.divergence); }},
      Key{"sweep.grid",
          [](PipelineConfig& c, std::string_view v) {
            c.sweep_grid.clear();
            std::string s = trim(v);
            if (s.empty() || s == "default") return;
            for (const auto& f : csv_parse_line(s)) c.sweep_grid.push_back(parse_double(trim(f)));
          },
          [](const PipelineConfig& c) {
            if (c.sweep_grid.empty()) return std::string("default");
            std::vector<std::string> parts;
            for (double l : c.sweep_grid) parts.push_back(format_double(l));
            return join(parts, ",");
          }},
      TRYAGE_PATH("paths.corpus", c.corpus_path),
      TRYAGE_PATH("paths.instances", c.instances_path),
      TRYAGE_PATH("paths.experts_dir", c.experts_dir),
      TRYAGE_PATH("paths.qtable", c.qtable_path),
      TRYAGE_PATH("paths.router", c.router_path),
      TRYAGE_PATH("paths.reports_dir", c.reports_dir),
      TRYAGE_PATH("paths.flag_bindings", c.flag_bindings_path),
      Key{"gateway.listen_address", [](PipelineConfig& c, std::string_view v) { c.listen_address = trim(v); },
          [](const PipelineConfig& c) { return c.listen_address; }},
      TRYAGE_BOOL("gateway.forward_to_expert", c.forward_to_expert),
      TRYAGE_U64("gateway.request_timeout_ms", c.request_timeout_ms),
      TRYAGE_U64("gateway.max_body_bytes", c.max_body_bytes),
  };
  return keys;
}

#undef TRYAGE_U64
#undef TRYAGE_REAL
#undef TRYAGE_PATH
#undef TRYAGE_BOOL

const Key& find_key(std::string_view name) {
  for (const auto& k : registry()) {
    if (k.name == name) return k;
  }
  throw ConfigError("unknown config key '" + std::string(name) + "'");
}

std::string expert_id_for(const std::string& domain) { return "ngram-" + domain; }

std::string domain_of(const PromptRecord& r) { return r.domain.value_or("unlabeled"); }

std::string split_name(int which) { return which == 0 ? "train" : (which == 1 ? "val" : "test"); }

}  // namespace

PipelineConfig::PipelineConfig() { train.learning_rate = 1e-3; }

void PipelineConfig::set(std::string_view key, std::string_view value) {
  const Key& k = find_key(trim(key));
  try {
    k.set(*this, trim(value));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("bad value for " + k.name + ": " + e.what());
  }
}

std::string PipelineConfig::get(std::string_view key) const { return find_key(trim(key)).get(*this); }

std::vector<std::string> PipelineConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

void PipelineConfig::apply_text(std::string_view text, std::string_view source) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = std::min(text.find('\n', pos), text.size());
    const std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected key=value");
    }
    try {
      set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  PipelineConfig c;
  c.apply_text(read_file(path), path.string());
  return c;
}

std::string PipelineConfig::dump() const {
  std::string out;
  for (const auto& k : registry()) out += k.name + "=" + k.get(*this) + "\n";
  return out;
}

TrainConfig PipelineConfig::effective_train() const {
  TrainConfig t = train;
  t.seed = mix_seed(seed, "router");
  return t;
}

std::vector<double> PipelineConfig::grid() const { return sweep_grid.empty() ? default_lambda_grid() : sweep_grid; }

GatewayConfig PipelineConfig::gateway() const {
  GatewayConfig g;
  g.listen_address = listen_address;
  g.router_model_path = router_path;
  g.library_manifest_path = manifest_path();
  g.flag_bindings_path = flag_bindings_path;
  g.experts_dir = experts_dir;
  g.forward_to_expert = forward_to_expert;
  g.request_timeout_ms = request_timeout_ms;
  g.max_body_bytes = max_body_bytes;
  return g;
}

std::vector<MlmInstance> Fixture::all_instances() const {
  std::vector<MlmInstance> out = split.train;
  out.insert(out.end(), split.val.begin(), split.val.end());
  out.insert(out.end(), split.test.begin(), split.test.end());
  return out;
}

CorpusSplit make_split(std::span<const PromptRecord> records, const PipelineConfig& config) {
  const MlmBuild build = make_mlm_instances(records, config.masks_per_record, mix_seed(config.seed, "masks"));
  return split_corpus(build.instances, config.split, mix_seed(config.seed, "split"));
}

std::vector<ExpertPtr> build_experts(std::span<const PromptRecord> records, const CorpusSplit& split,
                                     const PipelineConfig& config) {
  std::unordered_set<std::string> train_prompts;
  for (const auto& inst : split.train) train_prompts.insert(inst.prompt_id);
  std::map<std::string, std::vector<std::string>> texts;
  for (const auto& r : records) {
    if (train_prompts.contains(r.id)) texts[domain_of(r)].push_back(r.text);
  }
  if (texts.empty()) throw ExpertError("no training records to build experts from");
  std::vector<ExpertPtr> experts;
  for (const auto& [domain, domain_texts] : texts) {
    ExpertSpec spec;
    spec.expert_id = expert_id_for(domain);
    Rng meta = Rng::substream(config.seed, "experts/" + spec.expert_id);
    spec.recency_days = 30 + meta.uniform_index(1066);
    spec.attributes["verbosity"] = meta.uniform01();
    experts.push_back(std::make_shared<NgramExpert>(
        train_ngram_expert(domain_texts, std::move(spec), config.expert_order, config.smoothing_alpha)));
  }
  return experts;
}

std::vector<ExpertSpec> specs_of(std::span<const ExpertPtr> experts) {
  std::vector<ExpertSpec> out;
  for (const auto& e : experts) out.push_back(e->spec());
  return out;
}

Fixture build_fixture(std::vector<PromptRecord> records, const PipelineConfig& config) {
  Fixture f;
  f.records = std::move(records);
  f.split = make_split(f.records, config);
  f.experts = build_experts(f.records, f.split, config);
  f.library = specs_of(f.experts);
  const auto all = f.all_instances();
  f.qtable = build_q_table(f.experts, all, config.qtable_strict ? FailurePolicy::strict : FailurePolicy::lenient).table;
  return f;
}

TrainReport train_fixture(const Fixture& fixture, const PipelineConfig& config) {
  return train_router(fixture.qtable, fixture.split.train, fixture.split.val, config.features, config.effective_train());
}

void save_instances(const fs::path& path, const CorpusSplit& split) {
  std::string out;
  const std::vector<MlmInstance>* parts[3] = {&split.train, &split.val, &split.test};
  for (int s = 0; s < 3; ++s) {
    for (const auto& inst : *parts[s]) {
      nlohmann::ordered_json j;
      j["id"] = inst.id();
      j["prompt_id"] = inst.prompt_id;
      j["split"] = split_name(s);
      j["mask_index"] = inst.mask_index;
      j["target"] = inst.target;
      if (inst.domain) j["domain"] = *inst.domain;
      j["tokens"] = inst.tokens;
      out += j.dump() + "\n";
    }
  }
  write_file(path, out);
}

CorpusSplit load_instances(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot read instances file " + path.string());
  CorpusSplit split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      MlmInstance inst;
      inst.prompt_id = j.at("prompt_id").get<std::string>();
      inst.mask_index = j.at("mask_index").get<std::size_t>();
      inst.target = j.at("target").get<std::string>();
      if (j.contains("domain")) inst.domain = j["domain"].get<std::string>();
      inst.tokens = j.at("tokens").get<std::vector<std::string>>();
      if (inst.mask_index >= inst.tokens.size() || inst.tokens[inst.mask_index] != kMaskToken) {
        throw CorpusError("mask_index does not point at the mask symbol");
      }
      const std::string s = j.at("split").get<std::string>();
      if (s == "train") split.train.push_back(std::move(inst));
      else if (s == "val") split.val.push_back(std::move(inst));
      else if (s == "test") split.test.push_back(std::move(inst));
      else throw CorpusError("unknown split '" + s + "'");
    } catch (const std::exception& e) {
      throw CorpusError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return split;
}

std::vector<ExpertPtr> load_library(const fs::path& manifest, const fs::path& experts_dir, int timeout_ms) {
  std::vector<ExpertPtr> out;
  for (const auto& spec : load_manifest(manifest)) {
    if (spec.kind == ExpertKind::remote) {
      out.push_back(std::make_shared<RemoteExpert>(spec, timeout_ms));
      continue;
    }
    NgramExpert e = NgramExpert::load(experts_dir / (spec.expert_id + ".expert"));
    if (spec_to_json(e.spec()) != spec_to_json(spec)) {
      throw ExpertError("expert file for " + spec.expert_id + " does not match the manifest");
    }
    out.push_back(std::make_shared<NgramExpert>(std::move(e)));
  }
  return out;
}

void stage_synth(const PipelineConfig& config, std::ostream& log) {
  SynthConfig sc = config.synth;
  sc.seed = config.seed;
  const auto records = synth_corpus(sc);
  write_corpus_jsonl(config.corpus_path, records);
  log << "wrote " << records.size() << " records to " << config.corpus_path.string() << "\n";
}

void stage_build_experts(const PipelineConfig& config, std::ostream& log) {
  const CorpusLoad load = load_corpus(config.corpus_path, fs::is_directory(config.corpus_path)
                                                              ? CorpusFormat::dir_of_labeled_txt
                                                              : CorpusFormat::jsonl);
  for (const auto& w : load.warnings) log << "warning: " << w << "\n";
  const CorpusSplit split = make_split(load.records, config);
  save_instances(config.instances_path, split);
  const auto experts = build_experts(load.records, split, config);
  fs::create_directories(config.experts_dir);
  for (const auto& e : experts) {
    static_cast<const NgramExpert&>(*e).save(config.experts_dir / (e->spec().expert_id + ".expert"));
  }
  save_manifest(config.manifest_path(), specs_of(experts));
  log << "built " << experts.size() << " experts from " << load.records.size() << " records (" << split.train.size()
      << "/" << split.val.size() << "/" << split.test.size() << " instances)\n";
}

void stage_qtable(const PipelineConfig& config, std::ostream& log) {
  const auto experts = load_library(config.manifest_path(), config.experts_dir, config.request_timeout_ms);
  const CorpusSplit split = load_instances(config.instances_path);
  std::vector<MlmInstance> all = split.train;
  all.insert(all.end(), split.val.begin(), split.val.end());
  all.insert(all.end(), split.test.begin(), split.test.end());
  const QTableBuild build =
      build_q_table(experts, all, config.qtable_strict ? FailurePolicy::strict : FailurePolicy::lenient);
  for (const auto& w : build.warnings) log << "warning: " << w << "\n";
  save_q_table(build.table, config.qtable_path);
  log << "Q-table " << build.table.rows() << "x" << build.table.cols() << " written to "
      << config.qtable_path.string() << "\n";
}

std::string train_report_text(const TrainReport& report, double elapsed_seconds) {
  std::string out;
  out += "epochs_run=" + std::to_string(report.epochs_run) + "\n";
  out += "steps=" + std::to_string(report.steps) + "\n";
  out += "initial_val_divergence=" + format_double(report.initial_val_divergence) + "\n";
  out += "best_val_divergence=" + format_double(report.best_val_divergence) + "\n";
  out += "checkpoint_fingerprint=" + report.checkpoint.fingerprint() + "\n";
  out += "elapsed_seconds=" + format_double(elapsed_seconds) + "\n";
  return out;
}

std::string train_curve_csv(const TrainReport& report) {
  std::string out = csv_row(std::vector<std::string>{"step", "train_divergence", "val_divergence"});
  for (const auto& p : report.train_curve) {
    out += csv_row(std::vector<std::string>{std::to_string(p.step), format_double(p.train_divergence),
                                            format_double(p.val_divergence)});
  }
  return out;
}

void stage_train(const PipelineConfig& config, std::ostream& log) {
  const auto start = std::chrono::steady_clock::now();
  const QTable q = load_q_table(config.qtable_path);
  const CorpusSplit split = load_instances(config.instances_path);
  const TrainReport report = train_router(q, split.train, split.val, config.features, config.effective_train());
  report.checkpoint.save(config.router_path);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_file(config.reports_dir / "train_report.txt", train_report_text(report, elapsed));
  write_file(config.reports_dir / "train_curve.csv", train_curve_csv(report));
  log << "trained router: " << report.epochs_run << " epochs, best val divergence "
      << format_double(report.best_val_divergence) << "\n";
}

void stage_eval(const PipelineConfig& config, std::ostream& log) {
  const RouterModel router = RouterModel::load(config.router_path);
  const auto library = load_manifest(config.manifest_path());
  const QTable q = load_q_table(config.qtable_path);
  const CorpusSplit split = load_instances(config.instances_path);
  const RouterPredictor predictor(router);
  const EvalReport report = evaluate(predictor, library, q, split.test);
  write_file(config.reports_dir / "eval_report.txt", report_text(report));
  write_file(config.reports_dir / "eval_allocation.csv", allocation_csv(report));
  write_file(config.reports_dir / "eval_domain_accuracy.csv", domain_accuracy_csv(report));
  export_embeddings(router, split.test, config.reports_dir / "embeddings.csv");
  log << report_text(report);
}

void stage_sweep(const PipelineConfig& config, std::ostream& log) {
  const RouterModel router = RouterModel::load(config.router_path);
  const auto library = load_manifest(config.manifest_path());
  const QTable q = load_q_table(config.qtable_path);
  const CorpusSplit split = load_instances(config.instances_path);
  const RouterPredictor predictor(router);
  const auto grid = config.grid();
  const auto points = sweep_lambda(predictor, library, q, split.test, grid);
  const auto front = pareto_front(points);
  write_file(config.reports_dir / "sweep.csv", sweep_csv(points, router.expert_ids()));
  write_file(config.reports_dir / "pareto_front.csv", sweep_csv(front, router.expert_ids()));
  std::string text;
  for (const auto& p : points) {
    text += "lambda=" + format_double(p.lambda) + " combined_accuracy=" + format_double(p.combined_accuracy) +
            " mean_normalized_size=" + format_double(p.mean_normalized_size) +
            " compute_saved=" + format_double(compute_saved(points.front(), p)) + "\n";
  }
  write_file(config.reports_dir / "sweep_report.txt", text);
  log << text;
}

std::string stage_route(const PipelineConfig& config, const RouteOptions& options) {
  const auto library = load_manifest(config.manifest_path());
  const auto bindings =
      config.flag_bindings_path.empty() ? default_flag_bindings() : load_flag_bindings(config.flag_bindings_path);
  if (options.predictor == PredictorKind::router && !options.oracle) {
    const RouterModel router = RouterModel::load(config.router_path);
    const auto route =
        route_predictive(RouterPredictor(router), options.text, library, bindings, options.extra_constraints);
    return route_response_json(route, std::nullopt).dump();
  }
  const QTable q = load_q_table(config.qtable_path);
  const CorpusSplit split = load_instances(config.instances_path);
  std::vector<MlmInstance> all = split.train;
  all.insert(all.end(), split.val.begin(), split.val.end());
  all.insert(all.end(), split.test.begin(), split.test.end());
  const QTablePredictor predictor(q, all);
  if (!options.oracle) {
    const auto route = route_predictive(predictor, options.text, library, bindings, options.extra_constraints);
    return route_response_json(route, std::nullopt).dump();
  }
  PredictiveRoute route;
  route.parsed = parse_flags(options.text, bindings);
  std::vector<ConstraintTerm> constraints = route.parsed.constraints;
  constraints.insert(constraints.end(), options.extra_constraints.begin(), options.extra_constraints.end());
  std::vector<ExpertSpec> ordered;
  for (const auto& id : q.expert_ids) {
    auto it = std::find_if(library.begin(), library.end(), [&](const ExpertSpec& s) { return s.expert_id == id; });
    if (it == library.end()) throw ObjectiveError("Q-table expert '" + id + "' is not in the library");
    ordered.push_back(*it);
  }
  const auto row = predictor.predict(route.parsed.clean_text);
  route.decision = route_oracle(row, ordered, constraints);
  return route_response_json(route, std::nullopt).dump();
}

}  // namespace tryage
