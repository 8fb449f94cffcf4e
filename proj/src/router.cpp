#include "tryage/router.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <unordered_map>

#include "json.hpp"
#include "tryage/util.hpp"

namespace tryage {

namespace {

constexpr std::uint64_t kSignBasis = 0x84222325cbf29ce4ULL;
constexpr std::string_view kFormatTag = "tryage-router";

static_assert(std::endian::native == std::endian::little, "router persistence assumes a little-endian host");

}  // namespace

void FeatureConfig::validate() const {
  if (ngram_min < 1 || ngram_max < ngram_min) throw RouterError("feature n-gram range must satisfy 1 <= min <= max");
  if (dim < 2) throw RouterError("feature dim must be >= 2");
  if (!std::has_single_bit(dim)) throw RouterError("feature dim must be a power of two");
  if (dim > (std::size_t{1} << 31)) throw RouterError("feature dim too large");
}

std::size_t feature_bucket(std::string_view gram, const FeatureConfig& config) {
  return static_cast<std::size_t>(fnv1a64(gram, kFnvOffsetBasis ^ config.hash_seed) % config.dim);
}

double feature_sign(std::string_view gram, const FeatureConfig& config) {
  return (fnv1a64(gram, kSignBasis ^ config.hash_seed) & 1U) ? -1.0 : 1.0;
}

std::vector<double> SparseVector::to_dense() const {
  std::vector<double> out(dim, 0.0);
  for (const auto& [i, v] : entries) out[i] = v;
  return out;
}

double SparseVector::norm() const {
  double s = 0.0;
  for (const auto& [i, v] : entries) s += v * v;
  return std::sqrt(s);
}

SparseVector featurize(std::string_view text, const FeatureConfig& config) {
  config.validate();
  const std::string lower = to_lower_ascii(text);
  std::unordered_map<std::uint32_t, double> acc;
  const std::string_view s(lower);
  for (int n = config.ngram_min; n <= config.ngram_max; ++n) {
    const auto len = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + len <= s.size(); ++i) {
      const std::string_view gram = s.substr(i, len);
      acc[static_cast<std::uint32_t>(feature_bucket(gram, config))] += feature_sign(gram, config);
    }
  }
  SparseVector out;
  out.dim = config.dim;
  for (const auto& [i, v] : acc) {
    if (v != 0.0) out.entries.emplace_back(i, v);
  }
  std::sort(out.entries.begin(), out.entries.end());
  if (config.normalize == Normalize::l2) {
    const double n = out.norm();
    if (n > 0.0) {
      for (auto& e : out.entries) e.second /= n;
    }
  }
  return out;
}

std::string divergence_name(DivergenceKind kind) {
  return kind == DivergenceKind::absolute_error ? "absolute_error" : "squared_error";
}

DivergenceKind divergence_from_name(std::string_view name) {
  if (name == "squared_error") return DivergenceKind::squared_error;
  if (name == "absolute_error") return DivergenceKind::absolute_error;
  throw RouterError("unknown divergence '" + std::string(name) + "'");
}

double divergence(std::span<const double> pred, std::span<const double> truth, DivergenceKind kind) {
  if (pred.size() != truth.size()) throw RouterError("divergence: length mismatch");
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = pred[k] - truth[k];
    s += kind == DivergenceKind::squared_error ? d * d : std::abs(d);
  }
  return s / static_cast<double>(pred.size());
}

namespace {

struct Shape {
  std::size_t dim, hidden, n;
};

template <typename T>
void hidden_pre(const RouterParams<T>& p, const Shape& sh, const SparseVector& x, std::vector<double>& pre) {
  pre.assign(sh.hidden, 0.0);
  for (std::size_t j = 0; j < sh.hidden; ++j) pre[j] = static_cast<double>(p.b1[j]);
  for (const auto& [i, v] : x.entries) {
    const T* row = p.w1.data() + static_cast<std::size_t>(i) * sh.hidden;
    for (std::size_t j = 0; j < sh.hidden; ++j) pre[j] += v * static_cast<double>(row[j]);
  }
}

template <typename T>
std::vector<double> output_from_hidden(const RouterParams<T>& p, const Shape& sh, const std::vector<double>& h) {
  std::vector<double> out(sh.n);
  for (std::size_t k = 0; k < sh.n; ++k) out[k] = static_cast<double>(p.b2[k]);
  for (std::size_t j = 0; j < sh.hidden; ++j) {
    if (h[j] == 0.0) continue;
    const T* row = p.w2.data() + j * sh.n;
    for (std::size_t k = 0; k < sh.n; ++k) out[k] += h[j] * static_cast<double>(row[k]);
  }
  return out;
}

template <typename T>
std::vector<double> forward_impl(const RouterParams<T>& p, const Shape& sh, const SparseVector& x) {
  std::vector<double> pre;
  hidden_pre(p, sh, x, pre);
  for (double& v : pre) v = v > 0.0 ? v : 0.0;
  return output_from_hidden(p, sh, pre);
}

double divergence_grad(double pred, double truth, DivergenceKind kind, std::size_t n) {
  const double d = pred - truth;
  if (kind == DivergenceKind::squared_error) return 2.0 * d / static_cast<double>(n);
  return (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / static_cast<double>(n);
}

// Adds scale * d(divergence)/d(params) into g. W1 gradients are written only
// for rows present in x. Returns the divergence.
template <typename T>
double accumulate_grad(const RouterParams<T>& p, const Shape& sh, const SparseVector& x,
                       std::span<const double> truth, DivergenceKind kind, double scale, RouterParams<double>& g) {
  std::vector<double> pre;
  hidden_pre(p, sh, x, pre);
  std::vector<double> h(sh.hidden);
  for (std::size_t j = 0; j < sh.hidden; ++j) h[j] = pre[j] > 0.0 ? pre[j] : 0.0;
  const std::vector<double> out = output_from_hidden(p, sh, h);
  const double value = divergence(out, truth, kind);

  std::vector<double> dout(sh.n);
  for (std::size_t k = 0; k < sh.n; ++k) dout[k] = scale * divergence_grad(out[k], truth[k], kind, sh.n);
  std::vector<double> dpre(sh.hidden, 0.0);
  for (std::size_t k = 0; k < sh.n; ++k) g.b2[k] += dout[k];
  for (std::size_t j = 0; j < sh.hidden; ++j) {
    const T* w2row = p.w2.data() + j * sh.n;
    double* g2row = g.w2.data() + j * sh.n;
    double dh = 0.0;
    for (std::size_t k = 0; k < sh.n; ++k) {
      g2row[k] += h[j] * dout[k];
      dh += static_cast<double>(w2row[k]) * dout[k];
    }
    dpre[j] = pre[j] > 0.0 ? dh : 0.0;
    g.b1[j] += dpre[j];
  }
  for (const auto& [i, v] : x.entries) {
    double* g1row = g.w1.data() + static_cast<std::size_t>(i) * sh.hidden;
    for (std::size_t j = 0; j < sh.hidden; ++j) g1row[j] += v * dpre[j];
  }
  return value;
}

template <typename T>
RouterParams<T> zero_params(const Shape& sh) {
  RouterParams<T> p;
  p.w1.assign(sh.dim * sh.hidden, T{});
  p.b1.assign(sh.hidden, T{});
  p.w2.assign(sh.hidden * sh.n, T{});
  p.b2.assign(sh.n, T{});
  return p;
}

template <typename T, typename F>
void for_each_block(RouterParams<T>& p, F&& f) {
  f(p.w1);
  f(p.b1);
  f(p.w2);
  f(p.b2);
}

template <typename T, typename F>
void for_each_block(const RouterParams<T>& p, F&& f) {
  f(p.w1);
  f(p.b1);
  f(p.w2);
  f(p.b2);
}

Shape shape_of(const RouterModel& m) { return {m.dim(), m.hidden_dim(), m.n_experts()}; }

void check_input(const RouterModel& m, const SparseVector& x) {
  if (x.dim != m.dim()) {
    throw RouterError("feature length " + std::to_string(x.dim) + " does not match router dim " +
                      std::to_string(m.dim()));
  }
}

}  // namespace

RouterModel::RouterModel(FeatureConfig features, std::vector<std::string> expert_ids, std::size_t hidden_dim)
    : features_(features), expert_ids_(std::move(expert_ids)), hidden_(hidden_dim) {
  features_.validate();
  if (expert_ids_.empty()) throw RouterError("router needs at least one expert");
  if (hidden_ < 1) throw RouterError("hidden_dim must be >= 1");
  params_ = zero_params<float>(shape_of(*this));
}

RouterModel RouterModel::initialized(FeatureConfig features, std::vector<std::string> expert_ids,
                                     std::size_t hidden_dim, std::uint64_t seed) {
  RouterModel m(features, std::move(expert_ids), hidden_dim);
  m.seed_ = seed;
  Rng rng(seed);
  auto fill = [&rng](std::vector<float>& w, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (float& v : w) v = static_cast<float>(rng.uniform(-a, a));
  };
  fill(m.params_.w1, m.dim(), m.hidden_dim());
  fill(m.params_.w2, m.hidden_dim(), m.n_experts());
  return m;
}

std::size_t RouterModel::n_params() const {
  return params_.w1.size() + params_.b1.size() + params_.w2.size() + params_.b2.size();
}

std::vector<double> RouterModel::forward(const SparseVector& x) const {
  check_input(*this, x);
  return forward_impl(params_, shape_of(*this), x);
}

std::vector<double> RouterModel::embed(const SparseVector& x) const {
  check_input(*this, x);
  std::vector<double> pre;
  hidden_pre(params_, shape_of(*this), x, pre);
  for (double& v : pre) v = v > 0.0 ? v : 0.0;
  return pre;
}

bool RouterModel::all_finite() const {
  bool ok = true;
  for_each_block(params_, [&ok](const std::vector<float>& b) {
    for (float v : b) ok = ok && std::isfinite(v);
  });
  return ok;
}

std::string RouterModel::serialize() const {
  nlohmann::ordered_json h;
  h["format"] = kFormatTag;
  h["version"] = 1;
  h["features"] = {{"ngram_min", features_.ngram_min},
                   {"ngram_max", features_.ngram_max},
                   {"dim", features_.dim},
                   {"hash_seed", features_.hash_seed},
                   {"normalize", features_.normalize == Normalize::l2 ? "l2" : "none"}};
  h["expert_ids"] = expert_ids_;
  h["hidden_dim"] = hidden_;
  h["seed"] = seed_;
  std::string out = h.dump() + "\n";
  for_each_block(params_, [&out](const std::vector<float>& b) {
    const std::size_t off = out.size();
    out.resize(off + b.size() * sizeof(float));
    std::memcpy(out.data() + off, b.data(), b.size() * sizeof(float));
  });
  return out;
}

RouterModel RouterModel::deserialize(std::string_view bytes) {
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw RouterError("router file has no header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw RouterError(std::string("bad router header: ") + e.what());
  }
  if (h.value("format", std::string()) != kFormatTag) throw RouterError("not a router file");
  FeatureConfig fc;
  const auto& f = h.at("features");
  fc.ngram_min = f.at("ngram_min").get<int>();
  fc.ngram_max = f.at("ngram_max").get<int>();
  fc.dim = f.at("dim").get<std::size_t>();
  fc.hash_seed = f.at("hash_seed").get<std::uint64_t>();
  fc.normalize = f.at("normalize").get<std::string>() == "none" ? Normalize::none : Normalize::l2;
  RouterModel m(fc, h.at("expert_ids").get<std::vector<std::string>>(), h.at("hidden_dim").get<std::size_t>());
  m.seed_ = h.value("seed", std::uint64_t{0});
  std::size_t off = nl + 1;
  const std::size_t expected = off + m.n_params() * sizeof(float);
  if (bytes.size() != expected) {
    throw RouterError("router file has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected));
  }
  for_each_block(m.params_, [&](std::vector<float>& b) {
    std::memcpy(b.data(), bytes.data() + off, b.size() * sizeof(float));
    off += b.size() * sizeof(float);
  });
  if (!m.all_finite()) throw RouterError("router file contains non-finite parameters");
  return m;
}

void RouterModel::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

RouterModel RouterModel::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::string RouterModel::fingerprint() const { return hex64(fnv1a64(serialize())); }

bool RouterModel::operator==(const RouterModel& other) const { return serialize() == other.serialize(); }

std::vector<double> router_forward(const RouterModel& model, const SparseVector& x) { return model.forward(x); }

std::vector<double> router_embed(const RouterModel& model, const SparseVector& x) { return model.embed(x); }

RouterGradients router_gradients(const RouterModel& model, const SparseVector& x, std::span<const double> truth,
                                 DivergenceKind kind) {
  check_input(model, x);
  if (truth.size() != model.n_experts()) throw RouterError("truth length does not match expert count");
  const Shape sh = shape_of(model);
  RouterGradients out;
  out.grad = zero_params<double>(sh);
  out.value = accumulate_grad(model.params(), sh, x, truth, kind, 1.0, out.grad);
  return out;
}

double gradient_check(const RouterModel& model, const SparseVector& x, std::span<const double> truth,
                      DivergenceKind kind) {
  check_input(model, x);
  if (model.n_params() > 10000) throw RouterError("gradient_check needs a model with at most 1e4 parameters");
  if (truth.size() != model.n_experts()) throw RouterError("truth length does not match expert count");
  const Shape sh = shape_of(model);
  RouterParams<double> p;
  auto widen = [](const std::vector<float>& v) { return std::vector<double>(v.begin(), v.end()); };
  p.w1 = widen(model.params().w1);
  p.b1 = widen(model.params().b1);
  p.w2 = widen(model.params().w2);
  p.b2 = widen(model.params().b2);

  RouterParams<double> g = zero_params<double>(sh);
  accumulate_grad(p, sh, x, truth, kind, 1.0, g);

  auto value = [&]() { return divergence(forward_impl(p, sh, x), truth, kind); };
  std::vector<std::vector<double>*> blocks = {&p.w1, &p.b1, &p.w2, &p.b2};
  std::vector<const std::vector<double>*> grads = {&g.w1, &g.b1, &g.w2, &g.b2};
  double worst = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& block = *blocks[b];
    for (std::size_t i = 0; i < block.size(); ++i) {
      const double orig = block[i];
      const double h = 1e-5 * std::max(std::abs(orig), 1.0);
      block[i] = orig + h;
      const double up = value();
      block[i] = orig - h;
      const double down = value();
      block[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = (*grads[b])[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

RouterOptimizer::RouterOptimizer(const RouterModel& model, double weight_decay) : weight_decay_(weight_decay) {
  const Shape sh = shape_of(model);
  m_ = zero_params<double>(sh);
  v_ = zero_params<double>(sh);
  g_ = zero_params<double>(sh);
}

double RouterOptimizer::step(RouterModel& model, std::span<const SparseVector* const> xs,
                             std::span<const std::vector<double>> truths, DivergenceKind kind,
                             double learning_rate) {
  if (xs.size() != truths.size()) throw RouterError("batch features and targets differ in length");
  if (xs.empty()) return 0.0;
  const Shape sh = shape_of(model);
  if (m_.b2.size() != sh.n || m_.w1.size() != sh.dim * sh.hidden) {
    throw RouterError("optimizer state does not match the model shape");
  }
  for (std::size_t b = 0; b < xs.size(); ++b) {
    check_input(model, *xs[b]);
    if (truths[b].size() != sh.n) throw RouterError("target length does not match expert count");
  }
  auto& g = g_;
  const double scale = 1.0 / static_cast<double>(xs.size());
  double total = 0.0;
  for (std::size_t b = 0; b < xs.size(); ++b) {
    total += accumulate_grad(model.params(), sh, *xs[b], truths[b], kind, scale, g);
  }
  const double mean = total / static_cast<double>(xs.size());
  if (!std::isfinite(mean)) {
    g_ = zero_params<double>(sh);
    throw RouterError("non-finite divergence at optimizer step " + std::to_string(t_));
  }

  ++t_;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = learning_rate * weight_decay_;
  auto update = [&](std::vector<float>& w, std::vector<double>& gb, std::vector<double>& m, std::vector<double>& v) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = gb[i];
      gb[i] = 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      const double wi = static_cast<double>(w[i]);
      w[i] = static_cast<float>(wi - learning_rate * mh / (std::sqrt(vh) + eps) - decay * wi);
    }
  };
  auto& p = model.params();
  update(p.w1, g.w1, m_.w1, v_.w1);
  update(p.b1, g.b1, m_.b1, v_.b1);
  update(p.w2, g.w2, m_.w2, v_.w2);
  update(p.b2, g.b2, m_.b2, v_.b2);
  return mean;
}

}  // namespace tryage
