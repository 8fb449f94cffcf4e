// Command-line front end for the routing pipeline.
//
//   tryage [--config FILE] [--seed N] [--verbose] [--<section.key> VALUE ...] <command>
//
// Commands: synth, build-experts, qtable, train, eval, sweep, route, serve.
// TRYAGE_CONFIG supplies the config path when --config is absent;
// TRYAGE_LISTEN overrides gateway.listen_address for `serve`.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "tryage/pipeline.hpp"
#include "tryage/util.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

tryage::ConstraintTerm parse_constraint(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() < 2 || parts.size() > 3) {
    throw tryage::ConfigError("constraint must look like kind:lambda[:attribute], got '" + text + "'");
  }
  tryage::ConstraintTerm t;
  t.kind = tryage::constraint_kind_from_name(parts[0]);
  t.lambda = tryage::parse_double(parts[1]);
  if (parts.size() == 3) t.attribute = parts[2];
  t.validate();
  return t;
}

int fail(const std::string& command, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = message;
  j["command"] = command;
  std::cerr << j.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perceptive prompt router: corpus synthesis, expert building, router training, evaluation, serving"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--seed", seed, "root seed for every stage");
  app.add_flag("--verbose", verbose, "log progress to stderr");

  std::map<std::string, std::string> overrides;
  for (const auto& key : tryage::PipelineConfig::keys()) {
    if (key == "seed") continue;
    app.add_option_function<std::string>(
           "--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; }, "config override")
        ->group("Config overrides");
  }

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-domain corpus");
  std::optional<std::size_t> n_domains, prompts_per_domain, vocab_size;
  std::optional<double> overlap;
  std::string synth_out;
  synth->add_option("--n-domains", n_domains, "number of domains");
  synth->add_option("--prompts-per-domain", prompts_per_domain, "prompts per domain");
  synth->add_option("--vocab-size", vocab_size, "total vocabulary size");
  synth->add_option("--overlap", overlap, "shared vocabulary fraction in [0,1]");
  synth->add_option("--out", synth_out, "output corpus path");

  auto* build = app.add_subcommand("build-experts", "split the corpus and train one n-gram expert per domain");
  auto* qtable = app.add_subcommand("qtable", "run every expert on every instance");
  auto* train = app.add_subcommand("train", "train the router on the Q-table");
  auto* eval = app.add_subcommand("eval", "evaluate the router on the test split");
  auto* sweep = app.add_subcommand("sweep", "sweep the size penalty weight");

  auto* route = app.add_subcommand("route", "route one prompt and print the decision");
  tryage::RouteOptions route_opts;
  std::string predictor = "router";
  std::vector<std::string> constraint_texts;
  route->add_option("--text", route_opts.text, "prompt text, may contain [Flag: ...]")->required();
  route->add_option("--predictor", predictor, "router or qtable (true losses)")
      ->check(CLI::IsMember({"router", "qtable"}));
  route->add_flag("--oracle", route_opts.oracle, "route on the true Q-table row");
  route->add_option("--constraint", constraint_texts, "extra constraint kind:lambda[:attribute]");

  auto* serve = app.add_subcommand("serve", "run the routing gateway");
  std::string listen;
  serve->add_option("--listen", listen, "host:port");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    if (config_path.empty()) {
      if (const char* env = std::getenv("TRYAGE_CONFIG"); env && *env) config_path = env;
    }
    tryage::PipelineConfig config = config_path.empty() ? tryage::PipelineConfig() : tryage::PipelineConfig::load(config_path);
    if (seed) config.seed = *seed;
    for (const auto& [k, v] : overrides) config.set(k, v);

    std::ostringstream sink;
    std::ostream& log = verbose ? std::cerr : static_cast<std::ostream&>(sink);

    if (*synth) {
      if (n_domains) config.synth.n_domains = *n_domains;
      if (prompts_per_domain) config.synth.prompts_per_domain = *prompts_per_domain;
      if (vocab_size) config.synth.vocab_size = *vocab_size;
      if (overlap) config.synth.overlap = *overlap;
      if (!synth_out.empty()) config.corpus_path = synth_out;
      tryage::stage_synth(config, log);
    } else if (*build) {
      tryage::stage_build_experts(config, log);
    } else if (*qtable) {
      tryage::stage_qtable(config, log);
    } else if (*train) {
      tryage::stage_train(config, log);
    } else if (*eval) {
      tryage::stage_eval(config, log);
    } else if (*sweep) {
      tryage::stage_sweep(config, log);
    } else if (*route) {
      route_opts.predictor = predictor == "qtable" ? tryage::PredictorKind::qtable : tryage::PredictorKind::router;
      for (const auto& c : constraint_texts) route_opts.extra_constraints.push_back(parse_constraint(c));
      std::cout << tryage::stage_route(config, route_opts) << "\n";
    } else if (*serve) {
      if (const char* env = std::getenv("TRYAGE_LISTEN"); env && *env) config.listen_address = env;
      if (!listen.empty()) config.listen_address = listen;
      tryage::Gateway gateway(config.gateway());
      const auto [host, port] = tryage::parse_listen_address(config.listen_address);
      const int bound = gateway.bind(host, port);
      std::signal(SIGTERM, on_signal);
      std::signal(SIGINT, on_signal);
      std::thread watcher([&gateway] {
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
        gateway.stop();
      });
      std::cerr << "listening on " << host << ":" << bound << "\n";
      gateway.run();
      g_stop = true;
      watcher.join();
    }
  } catch (const std::exception& e) {
    return fail(command, e.what());
  }
  return 0;
}
