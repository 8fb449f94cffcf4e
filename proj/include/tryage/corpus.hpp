#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tryage {

inline constexpr std::string_view kMaskToken = "[MASK]";
inline constexpr std::size_t kMaxSequenceTokens = 512;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PromptRecord {
  std::string id;
  std::string text;
  std::optional<std::string> domain;
  std::vector<std::string> raw_flags;
};

struct MlmInstance {
  std::string prompt_id;
  std::vector<std::string> tokens;  // tokens[mask_index] == kMaskToken
  std::size_t mask_index = 0;
  std::string target;
  std::optional<std::string> domain;

  // "<prompt_id>:<mask_index>", unique across a corpus.
  std::string id() const;
  // Tokens joined by single spaces; this is what the router sees.
  std::string masked_text() const;
  std::vector<std::string> restored_tokens() const;
};

enum class CorpusFormat { jsonl, dir_of_labeled_txt };

struct LoadOptions {
  bool strict = false;
};

struct CorpusLoad {
  std::vector<PromptRecord> records;
  std::size_t skipped = 0;            // empty texts
  std::vector<std::string> warnings;  // malformed lines, reserved symbols
};

// JSONL: one {"id","text","domain"?,"flags"?} object per line.
// Directory: every regular file under <path>/<domain>/ is one record.
CorpusLoad load_corpus(const std::filesystem::path& path, CorpusFormat format,
                       const LoadOptions& options = {});

void write_corpus_jsonl(const std::filesystem::path& path, std::span<const PromptRecord> records);

// Lowercased; whitespace separates; every ASCII punctuation byte is its own token.
std::vector<std::string> tokenize(std::string_view text);
// Same as tokenize() but keeps the literal "[MASK]" as a single token.
std::vector<std::string> tokenize_masked(std::string_view text);

struct MlmBuild {
  std::vector<MlmInstance> instances;
  std::size_t skipped_records = 0;  // records with fewer than two tokens
};

MlmBuild make_mlm_instances(std::span<const PromptRecord> records, std::size_t masks_per_record,
                            std::uint64_t seed);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  std::vector<MlmInstance> train;
  std::vector<MlmInstance> val;
  std::vector<MlmInstance> test;
  std::uint64_t seed = 0;
  SplitFractions fractions;
};

// Splits by prompt_id so that every instance of a prompt lands in one split.
CorpusSplit split_corpus(std::span<const MlmInstance> instances, SplitFractions fractions,
                         std::uint64_t seed);

// Synthetic multi-domain corpus. Each domain owns a pool of pseudo-words;
// a shared pool is common to every domain. A prompt is a walk over a sparse
// successor graph that starts at the pool's header word; with probability
// `overlap` the walk uses the shared pool instead of the domain pool, so
// `overlap` is the fraction of each domain's token mass that is shared.
// Even-indexed domains get lean pools, odd-indexed domains pools three
// times larger, which yields experts of two different sizes.
struct SynthConfig {
  std::size_t n_domains = 5;
  std::size_t prompts_per_domain = 400;
  std::size_t vocab_size = 500;
  double overlap = 0.2;
  std::uint64_t seed = 42;
  std::size_t min_length = 500;
  std::size_t max_length = 500;
  std::size_t branching = 4;  // successors per word, chosen uniformly
};

std::vector<PromptRecord> synth_corpus(const SynthConfig& config);

std::string domain_name(std::size_t index);

}  // namespace tryage
