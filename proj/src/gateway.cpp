#include "tryage/gateway.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "httplib.h"
#include "tryage/util.hpp"

namespace tryage {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string error_body(const std::string& message, const std::string& code) {
  ordered_json j;
  j["error"] = message;
  j["code"] = code;
  return j.dump();
}

std::string code_for_status(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 413: return "payload_too_large";
    case 414: return "uri_too_long";
    default: return status >= 500 ? "internal_error" : "http_" + std::to_string(status);
  }
}

void install_error_handler(httplib::Server& svr) {
  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      res.set_content(error_body(httplib::status_message(res.status), code_for_status(res.status)),
                      "application/json");
    }
  });
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

std::string with_scheme(const std::string& endpoint) {
  return endpoint.find("://") == std::string::npos ? "http://" + endpoint : endpoint;
}

}  // namespace

TopK top_k(const TokenDistribution& dist, std::size_t k) {
  std::vector<std::pair<std::string, double>> entries(dist.begin(), dist.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  TopK out;
  for (std::size_t i = 0; i < std::min(k, entries.size()); ++i) {
    out.tokens.push_back(entries[i].first);
    out.probs.push_back(entries[i].second);
  }
  return out;
}

std::string topk_to_json(const TopK& topk) {
  ordered_json j;
  j["tokens"] = topk.tokens;
  j["probs"] = topk.probs;
  return j.dump();
}

TopK parse_topk(std::string_view body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("reply is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("tokens") || !j.contains("probs") || !j["tokens"].is_array() ||
      !j["probs"].is_array()) {
    throw ProtocolError("reply must be an object with arrays 'tokens' and 'probs'");
  }
  TopK out;
  for (const auto& t : j["tokens"]) {
    if (!t.is_string()) throw ProtocolError("reply tokens must be strings");
    out.tokens.push_back(t.get<std::string>());
  }
  for (const auto& p : j["probs"]) {
    if (!p.is_number()) throw ProtocolError("reply probs must be numbers");
    out.probs.push_back(p.get<double>());
  }
  if (out.tokens.size() != out.probs.size()) throw ProtocolError("reply tokens and probs differ in length");
  if (out.tokens.empty() || out.tokens.size() > kMaxTopK) throw ProtocolError("reply must hold between 1 and 10 tokens");
  double total = 0.0;
  for (std::size_t i = 0; i < out.probs.size(); ++i) {
    const double p = out.probs[i];
    if (!(p > 0.0 && p <= 1.0)) throw ProtocolError("reply probabilities must lie in (0, 1]");
    if (i > 0 && p > out.probs[i - 1]) throw ProtocolError("reply probabilities must be in descending order");
    total += p;
  }
  if (total > 1.0 + 1e-6) throw ProtocolError("reply probabilities sum above 1");
  return out;
}

TopK remote_expert_predict(const std::string& endpoint, std::string_view masked_text, int timeout_ms) {
  if (endpoint.empty()) throw TransportError("empty endpoint");
  if (timeout_ms <= 0) throw TransportError("timeout must be positive");
  httplib::Client cli(with_scheme(endpoint));
  if (!cli.is_valid()) throw TransportError("invalid endpoint '" + endpoint + "'");
  const auto timeout = std::chrono::milliseconds(timeout_ms);
  cli.set_connection_timeout(timeout);
  cli.set_read_timeout(timeout);
  cli.set_write_timeout(timeout);
  ordered_json req;
  req["text"] = std::string(masked_text);
  auto res = cli.Post("/predict", req.dump(), "application/json");
  if (!res) throw TransportError("request to " + endpoint + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw ProtocolError("expert at " + endpoint + " answered HTTP " + std::to_string(res->status));
  }
  return parse_topk(res->body);
}

MlmInstance instance_from_masked_text(std::string_view text) {
  MlmInstance inst;
  inst.prompt_id = "request";
  inst.tokens = tokenize_masked(text);
  auto it = std::find(inst.tokens.begin(), inst.tokens.end(), kMaskToken);
  if (it == inst.tokens.end()) {
    inst.tokens.emplace_back(kMaskToken);
    it = inst.tokens.end() - 1;
  }
  inst.mask_index = static_cast<std::size_t>(it - inst.tokens.begin());
  if (inst.tokens.size() > kMaxSequenceTokens) {
    const std::size_t start = inst.mask_index < kMaxSequenceTokens ? 0 : inst.mask_index + 1 - kMaxSequenceTokens;
    inst.tokens = std::vector<std::string>(inst.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                           inst.tokens.begin() + static_cast<std::ptrdiff_t>(start + kMaxSequenceTokens));
    inst.mask_index -= start;
  }
  return inst;
}

RemoteExpert::RemoteExpert(ExpertSpec spec, int timeout_ms) : spec_(std::move(spec)), timeout_ms_(timeout_ms) {
  spec_.kind = ExpertKind::remote;
  spec_.validate();
}

TokenDistribution RemoteExpert::predict(const MlmInstance& instance) const {
  const TopK t = remote_expert_predict(*spec_.endpoint, instance.masked_text(), timeout_ms_);
  TokenDistribution d;
  for (std::size_t i = 0; i < t.tokens.size(); ++i) d.emplace(t.tokens[i], t.probs[i]);
  return d;
}

double RemoteExpert::loss(const MlmInstance& instance) const {
  const TopK t = remote_expert_predict(*spec_.endpoint, instance.masked_text(), timeout_ms_);
  double total = 0.0;
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    if (t.tokens[i] == instance.target) return -std::log(t.probs[i]);
    total += t.probs[i];
  }
  return -std::log(std::max(1.0 - total, 1e-12));
}

std::string RemoteExpert::top_prediction(const MlmInstance& instance) const {
  const TopK t = remote_expert_predict(*spec_.endpoint, instance.masked_text(), timeout_ms_);
  std::string best = t.tokens.front();
  for (std::size_t i = 1; i < t.tokens.size() && t.probs[i] == t.probs.front(); ++i) best = std::min(best, t.tokens[i]);
  return best;
}

void GatewayConfig::validate() const {
  parse_listen_address(listen_address);
  if (request_timeout_ms <= 0) throw GatewayError("request_timeout_ms must be positive");
  if (max_body_bytes < 1) throw GatewayError("max_body_bytes must be positive");
  namespace fs = std::filesystem;
  if (!fs::is_regular_file(router_model_path)) throw GatewayError("router model not found: " + router_model_path.string());
  if (!fs::is_regular_file(library_manifest_path)) {
    throw GatewayError("library manifest not found: " + library_manifest_path.string());
  }
  if (!flag_bindings_path.empty() && !fs::is_regular_file(flag_bindings_path)) {
    throw GatewayError("flag bindings not found: " + flag_bindings_path.string());
  }
}

std::pair<std::string, int> parse_listen_address(std::string_view address) {
  const auto colon = address.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw GatewayError("listen address must look like host:port, got '" + std::string(address) + "'");
  }
  std::uint64_t port = 0;
  try {
    port = parse_u64(address.substr(colon + 1));
  } catch (const std::exception&) {
    throw GatewayError("bad port in listen address '" + std::string(address) + "'");
  }
  if (port > 65535) throw GatewayError("port out of range in '" + std::string(address) + "'");
  return {std::string(address.substr(0, colon)), static_cast<int>(port)};
}

ordered_json route_response_json(const PredictiveRoute& route, const std::optional<Completion>& completion) {
  ordered_json j = decision_to_json(route.decision);
  j["clean_text"] = route.parsed.clean_text;
  j["flags"] = route.parsed.flags;
  j["unknown_flags"] = route.parsed.unknown_flags;
  if (completion) {
    ordered_json c;
    c["token"] = completion->token;
    c["probability"] = completion->probability;
    j["completion"] = std::move(c);
  }
  return j;
}

std::string normalize_response(std::string_view body) {
  ordered_json j = ordered_json::parse(body);
  j.erase("latency_ms");
  return j.dump();
}

struct Gateway::Server {
  httplib::Server svr;
};

Gateway::Gateway(const GatewayConfig& config) : config_(config) {
  config_.validate();
  router_ = RouterModel::load(config_.router_model_path);
  library_ = load_manifest(config_.library_manifest_path);
  bindings_ = config_.flag_bindings_path.empty() ? default_flag_bindings() : load_flag_bindings(config_.flag_bindings_path);
  if (config_.forward_to_expert && !config_.experts_dir.empty()) {
    for (const auto& s : library_) {
      const auto path = config_.experts_dir / (s.expert_id + ".expert");
      if (s.kind == ExpertKind::builtin_ngram && std::filesystem::exists(path)) {
        local_experts_[s.expert_id] = std::make_shared<NgramExpert>(NgramExpert::load(path));
      }
    }
  }
  checksums_["router"] = hex64(file_checksum(config_.router_model_path));
  checksums_["manifest"] = hex64(file_checksum(config_.library_manifest_path));
  if (!config_.flag_bindings_path.empty()) checksums_["bindings"] = hex64(file_checksum(config_.flag_bindings_path));
  validate_artifacts();
}

Gateway::Gateway(GatewayConfig config, RouterModel router, std::vector<ExpertSpec> library,
                 std::vector<FlagBinding> bindings, std::map<std::string, ExpertPtr> local_experts)
    : config_(std::move(config)),
      router_(std::move(router)),
      library_(std::move(library)),
      bindings_(std::move(bindings)),
      local_experts_(std::move(local_experts)) {
  checksums_["router"] = hex64(fnv1a64(router_.serialize()));
  std::string manifest;
  for (const auto& s : library_) manifest += spec_to_json(s).dump() + "\n";
  checksums_["manifest"] = hex64(fnv1a64(manifest));
  validate_artifacts();
}

Gateway::~Gateway() { stop(); }

void Gateway::validate_artifacts() const {
  if (library_.empty()) throw GatewayError("library manifest lists no experts");
  for (const auto& id : router_.expert_ids()) {
    if (std::none_of(library_.begin(), library_.end(), [&](const ExpertSpec& s) { return s.expert_id == id; })) {
      throw GatewayError("router expert '" + id + "' is missing from the library manifest");
    }
  }
}

std::optional<Completion> Gateway::forward(const PredictiveRoute& route) const {
  const std::string& id = route.decision.chosen_expert;
  const auto spec = std::find_if(library_.begin(), library_.end(), [&](const ExpertSpec& s) { return s.expert_id == id; });
  try {
    if (spec->kind == ExpertKind::remote) {
      const TopK t = remote_expert_predict(*spec->endpoint, route.parsed.clean_text, config_.request_timeout_ms);
      return Completion{t.tokens.front(), t.probs.front()};
    }
    auto it = local_experts_.find(id);
    if (it == local_experts_.end()) return std::nullopt;
    const MlmInstance inst = instance_from_masked_text(route.parsed.clean_text);
    const TopK t = top_k(it->second->predict(inst), 1);
    return Completion{t.tokens.front(), t.probs.front()};
  } catch (const TransportError&) {
    return std::nullopt;
  } catch (const ProtocolError&) {
    return std::nullopt;
  }
}

HttpResult Gateway::handle_route(std::string_view body) const {
  const auto start = std::chrono::steady_clock::now();
  if (body.size() > config_.max_body_bytes) {
    return {413, error_body("request body exceeds " + std::to_string(config_.max_body_bytes) + " bytes",
                            "payload_too_large")};
  }
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception& e) {
    return {400, error_body(std::string("malformed JSON: ") + e.what(), "bad_request")};
  }
  if (!req.is_object()) return {400, error_body("request body must be a JSON object", "bad_request")};
  if (!req.contains("text") || !req["text"].is_string()) {
    return {400, error_body("field 'text' must be a string", "bad_request")};
  }
  std::vector<ConstraintTerm> extra;
  if (req.contains("extra_constraints") && !req["extra_constraints"].is_null()) {
    if (!req["extra_constraints"].is_array()) {
      return {400, error_body("field 'extra_constraints' must be a list", "bad_request")};
    }
    try {
      for (const auto& c : req["extra_constraints"]) extra.push_back(constraint_from_json(c));
    } catch (const std::exception& e) {
      return {400, error_body(e.what(), "invalid_constraint")};
    }
  }

  PredictiveRoute route;
  try {
    route = route_predictive(RouterPredictor(router_), req["text"].get<std::string>(), library_, bindings_, extra);
  } catch (const ObjectiveError& e) {
    return {400, error_body(e.what(), "invalid_constraint")};
  }
  const double route_ms = elapsed_ms(start);
  std::optional<Completion> completion;
  const auto fwd_start = std::chrono::steady_clock::now();
  if (config_.forward_to_expert) completion = forward(route);
  const double forward_ms = config_.forward_to_expert ? elapsed_ms(fwd_start) : 0.0;

  ordered_json resp = route_response_json(route, completion);
  resp["latency_ms"] = {{"route", route_ms}, {"forward", forward_ms}, {"total", elapsed_ms(start)}};
  return {200, resp.dump()};
}

std::string Gateway::health_json() const {
  ordered_json j;
  j["status"] = "ok";
  j["router_fingerprint"] = router_.fingerprint();
  for (const auto& [k, v] : checksums_) j[k + "_checksum"] = v;
  j["n_experts"] = library_.size();
  return j.dump();
}

std::string Gateway::library_json() const {
  ordered_json j;
  j["experts"] = ordered_json::array();
  for (const auto& s : library_) j["experts"].push_back(spec_to_json(s));
  return j.dump();
}

int Gateway::bind(const std::string& host, int port) {
  if (server_) throw GatewayError("gateway is already bound");
  server_ = std::make_unique<Server>();
  auto& svr = server_->svr;
  // Bodies above the limit are answered by the handler with a JSON 413;
  // the transport cap only guards against runaway uploads.
  svr.set_payload_max_length(config_.max_body_bytes * 2 + 4096);
  install_error_handler(svr);
  svr.Post("/route", [this](const httplib::Request& req, httplib::Response& res) {
    const HttpResult r = handle_route(req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
  svr.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(health_json(), "application/json");
  });
  svr.Get("/library", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(library_json(), "application/json");
  });
  int bound = port;
  if (port == 0) {
    bound = svr.bind_to_any_port(host);
  } else if (!svr.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) {
    server_.reset();
    throw GatewayError("cannot bind " + host + ":" + std::to_string(port));
  }
  return bound;
}

void Gateway::run() {
  if (!server_) throw GatewayError("gateway is not bound");
  server_->svr.listen_after_bind();
}

void Gateway::stop() {
  if (server_) server_->svr.stop();
}

bool Gateway::running() const { return server_ && server_->svr.is_running(); }

struct ExpertServer::Server {
  httplib::Server svr;
};

ExpertServer::ExpertServer(ExpertPtr expert, std::size_t k) : expert_(std::move(expert)), k_(std::min(k, kMaxTopK)) {
  if (!expert_) throw GatewayError("expert server needs an expert");
  if (k_ < 1) throw GatewayError("k must be >= 1");
}

ExpertServer::~ExpertServer() { stop(); }

int ExpertServer::bind(const std::string& host, int port) {
  server_ = std::make_unique<Server>();
  auto& svr = server_->svr;
  install_error_handler(svr);
  svr.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
    json j;
    try {
      j = json::parse(req.body);
    } catch (const json::exception& e) {
      res.status = 400;
      res.set_content(error_body(std::string("malformed JSON: ") + e.what(), "bad_request"), "application/json");
      return;
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      res.status = 400;
      res.set_content(error_body("field 'text' must be a string", "bad_request"), "application/json");
      return;
    }
    const MlmInstance inst = instance_from_masked_text(j["text"].get<std::string>());
    res.set_content(topk_to_json(top_k(expert_->predict(inst), k_)), "application/json");
  });
  const int bound = port == 0 ? svr.bind_to_any_port(host) : (svr.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw GatewayError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void ExpertServer::run() {
  if (!server_) throw GatewayError("expert server is not bound");
  server_->svr.listen_after_bind();
}

void ExpertServer::stop() {
  if (server_) server_->svr.stop();
}

}  // namespace tryage
