#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tryage/experts.hpp"
#include "tryage/objective.hpp"
#include "tryage/router.hpp"

namespace tryage {

class GatewayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Connection failure or timeout talking to an expert endpoint.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Expert endpoint replied with something that violates the /predict contract.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kMaxTopK = 10;

struct TopK {
  std::vector<std::string> tokens;
  std::vector<double> probs;  // descending, each in (0, 1]
};

// POST <endpoint>/predict with {"text": masked_text}.
TopK remote_expert_predict(const std::string& endpoint, std::string_view masked_text, int timeout_ms = 5000);

// Validates and parses a /predict reply body.
TopK parse_topk(std::string_view body);
std::string topk_to_json(const TopK& topk);

// Highest-probability tokens of a distribution; ties in probability go to the
// lexicographically smaller token.
TopK top_k(const TokenDistribution& dist, std::size_t k);

// Masked instance built from a prompt; the first "[MASK]" is the target slot,
// or one is appended when the text has none.
MlmInstance instance_from_masked_text(std::string_view text);

// Expert reached over HTTP. A target outside the returned top-k is scored with
// the remaining probability mass, floored at 1e-12.
class RemoteExpert final : public ExpertModel {
 public:
  RemoteExpert(ExpertSpec spec, int timeout_ms = 5000);
  const ExpertSpec& spec() const override { return spec_; }
  TokenDistribution predict(const MlmInstance& instance) const override;
  double loss(const MlmInstance& instance) const override;
  std::string top_prediction(const MlmInstance& instance) const override;

 private:
  ExpertSpec spec_;
  int timeout_ms_;
};

struct GatewayConfig {
  std::string listen_address = "127.0.0.1:8080";
  std::filesystem::path router_model_path;
  std::filesystem::path library_manifest_path;
  std::filesystem::path flag_bindings_path;  // empty: default bindings
  std::filesystem::path experts_dir;         // builtin expert files, used when forwarding
  bool forward_to_expert = false;
  int request_timeout_ms = 5000;
  std::size_t max_body_bytes = 1 << 20;

  void validate() const;
};

// "host:port" split; throws GatewayError when malformed.
std::pair<std::string, int> parse_listen_address(std::string_view address);

struct Completion {
  std::string token;
  double probability = 0.0;
};

// Response body without the latency block. Gateway responses equal this
// object plus a "latency_ms" member.
nlohmann::ordered_json route_response_json(const PredictiveRoute& route, const std::optional<Completion>& completion);

// Drops "latency_ms" and re-serializes.
std::string normalize_response(std::string_view body);

struct HttpResult {
  int status = 200;
  std::string body;
};

class Gateway {
 public:
  explicit Gateway(const GatewayConfig& config);
  Gateway(GatewayConfig config, RouterModel router, std::vector<ExpertSpec> library,
          std::vector<FlagBinding> bindings, std::map<std::string, ExpertPtr> local_experts = {});
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  HttpResult handle_route(std::string_view body) const;
  std::string health_json() const;
  std::string library_json() const;

  const RouterModel& router() const { return router_; }
  const std::vector<ExpertSpec>& library() const { return library_; }
  const std::vector<FlagBinding>& bindings() const { return bindings_; }

  // Binds the listening socket; port 0 picks a free port. Returns the port.
  int bind(const std::string& host, int port);
  // Serves until stop(); in-flight requests finish first.
  void run();
  void stop();
  bool running() const;

 private:
  void validate_artifacts() const;
  std::optional<Completion> forward(const PredictiveRoute& route) const;

  GatewayConfig config_;
  RouterModel router_;
  std::vector<ExpertSpec> library_;
  std::vector<FlagBinding> bindings_;
  std::map<std::string, ExpertPtr> local_experts_;
  std::map<std::string, std::string> checksums_;
  struct Server;
  std::unique_ptr<Server> server_;
};

// Serves POST /predict for an in-process expert; used to put builtin experts
// behind the remote contract.
class ExpertServer {
 public:
  explicit ExpertServer(ExpertPtr expert, std::size_t k = kMaxTopK);
  ~ExpertServer();
  int bind(const std::string& host, int port);
  void run();
  void stop();

 private:
  ExpertPtr expert_;
  std::size_t k_;
  struct Server;
  std::unique_ptr<Server> server_;
};

}  // namespace tryage
