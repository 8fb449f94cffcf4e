#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "tryage/corpus.hpp"
#include "tryage/util.hpp"

namespace tryage {

namespace {

constexpr std::string_view kConsonants = "bcdfghjklmnprstvwz";
constexpr std::string_view kVowels = "aeiou";

std::vector<std::string> make_words(std::size_t count, Rng& rng) {
  std::vector<std::string> words;
  std::set<std::string> seen;
  while (words.size() < count) {
    const std::size_t len = 3 + rng.uniform_index(6);
    const bool start_vowel = rng.bernoulli(0.3);
    std::string w;
    for (std::size_t i = 0; i < len; ++i) {
      const bool vowel = (i % 2 == 0) == start_vowel;
      std::string_view alphabet = vowel ? kVowels : kConsonants;
      w += alphabet[rng.uniform_index(alphabet.size())];
    }
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

// A pool of words with a fixed header and a circulant successor graph over
// the remaining words, so every body word is visited equally often.
struct WordGraph {
  std::string header;
  std::vector<std::string> body;
  std::vector<std::vector<std::size_t>> successors;  // indices into body
  std::vector<std::size_t> header_successors;

  WordGraph(std::vector<std::string> words, std::size_t branching, Rng& rng) {
    header = words.front();
    body.assign(words.begin() + 1, words.end());
    rng.shuffle(body);
    const std::size_t m = body.size();
    std::vector<std::size_t> steps = {1};
    std::vector<std::size_t> candidates;
    for (std::size_t s = 2; s < m; ++s) candidates.push_back(s);
    rng.shuffle(candidates);
    for (std::size_t i = 0; steps.size() < branching; ++i) steps.push_back(candidates.at(i));
    successors.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t s : steps) successors[i].push_back((i + s) % m);
    }
    std::vector<std::size_t> all(m);
    for (std::size_t i = 0; i < m; ++i) all[i] = i;
    rng.shuffle(all);
    header_successors.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(branching));
  }

  std::string walk(std::size_t length, Rng& rng) const {
    std::string text = header;
    std::size_t cur = header_successors[rng.uniform_index(header_successors.size())];
    for (std::size_t i = 1; i < length; ++i) {
      text += ' ';
      text += body[cur];
      const auto& next = successors[cur];
      cur = next[rng.uniform_index(next.size())];
    }
    return text;
  }
};

}  // namespace

std::string domain_name(std::size_t index) { return "domain" + std::to_string(index); }

std::vector<PromptRecord> synth_corpus(const SynthConfig& config) {
  if (!(config.overlap >= 0.0 && config.overlap <= 1.0)) {
    throw std::invalid_argument("overlap must lie in [0, 1]");
  }
  if (config.n_domains < 1) throw std::invalid_argument("n_domains must be >= 1");
  if (config.branching < 1) throw std::invalid_argument("branching must be >= 1");
  if (config.min_length < 2 || config.max_length < config.min_length) {
    throw std::invalid_argument("prompt lengths must satisfy 2 <= min_length <= max_length");
  }

  const std::size_t min_pool = config.branching + 2;
  std::size_t n_shared = static_cast<std::size_t>(std::llround(config.overlap * static_cast<double>(config.vocab_size)));
  if (config.overlap >= 1.0) n_shared = config.vocab_size;
  const std::size_t specific_total = config.vocab_size - n_shared;

  std::vector<std::size_t> pool_sizes(config.n_domains, 0);
  if (config.overlap < 1.0) {
    std::size_t weight_sum = 0;
    for (std::size_t d = 0; d < config.n_domains; ++d) weight_sum += (d % 2 == 0) ? 1 : 3;
    const std::size_t unit = specific_total / weight_sum;
    std::size_t used = 0;
    for (std::size_t d = 0; d < config.n_domains; ++d) {
      pool_sizes[d] = unit * ((d % 2 == 0) ? 1 : 3);
      used += pool_sizes[d];
      if (pool_sizes[d] < min_pool) throw std::invalid_argument("vocab_size too small for the domain count");
    }
    // Rounding leftovers join the shared pool so lean domains stay equal in size.
    if (config.overlap > 0.0) n_shared += specific_total - used;
  }
  if (config.overlap > 0.0 && n_shared < min_pool) {
    throw std::invalid_argument("shared vocabulary too small for the requested overlap");
  }

  Rng word_rng = Rng::substream(config.seed, "synth/words");
  std::vector<std::string> words = make_words(config.vocab_size, word_rng);
  std::size_t cursor = 0;
  auto take = [&](std::size_t n) {
    std::vector<std::string> out(words.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 words.begin() + static_cast<std::ptrdiff_t>(cursor + n));
    cursor += n;
    return out;
  };

  Rng graph_rng = Rng::substream(config.seed, "synth/graphs");
  std::vector<WordGraph> pools;
  for (std::size_t d = 0; d < config.n_domains; ++d) {
    if (pool_sizes[d] > 0) {
      pools.emplace_back(take(pool_sizes[d]), config.branching, graph_rng);
    }
  }
  std::optional<WordGraph> shared;
  if (config.overlap > 0.0) shared.emplace(take(n_shared), config.branching, graph_rng);

  std::vector<PromptRecord> records;
  records.reserve(config.n_domains * config.prompts_per_domain);
  const std::size_t width = std::to_string(config.prompts_per_domain).size();
  for (std::size_t d = 0; d < config.n_domains; ++d) {
    Rng rng = Rng::substream(config.seed, "synth/prompts/" + std::to_string(d));
    for (std::size_t i = 0; i < config.prompts_per_domain; ++i) {
      const bool use_shared = config.overlap >= 1.0 || (config.overlap > 0.0 && rng.bernoulli(config.overlap));
      const std::size_t length =
          config.min_length + rng.uniform_index(config.max_length - config.min_length + 1);
      const WordGraph& graph = use_shared ? *shared : pools[d];
      std::string idx = std::to_string(i);
      PromptRecord r;
      r.id = domain_name(d) + "-" + std::string(width - idx.size(), '0') + idx;
      r.text = graph.walk(length, rng);
      r.domain = domain_name(d);
      records.push_back(std::move(r));
    }
  }
  return records;
}

}  // namespace tryage
