#include "tryage/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "tryage/util.hpp"

namespace tryage {

namespace fs = std::filesystem;
using nlohmann::json;

std::string MlmInstance::id() const { return prompt_id + ":" + std::to_string(mask_index); }

std::string MlmInstance::masked_text() const { return join(tokens, " "); }

std::vector<std::string> MlmInstance::restored_tokens() const {
  std::vector<std::string> out = tokens;
  out.at(mask_index) = target;
  return out;
}

namespace {

bool is_punct_byte(unsigned char c) { return c < 0x80 && std::ispunct(c); }
bool is_space_byte(unsigned char c) { return c < 0x80 && std::isspace(c); }

void tokenize_into(std::string_view text, std::vector<std::string>& out) {
  std::string cur;
  for (unsigned char c : text) {
    if (is_space_byte(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else if (is_punct_byte(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
}

PromptRecord record_from_json(const json& j) {
  PromptRecord r;
  if (!j.is_object()) throw CorpusError("record is not a JSON object");
  if (!j.contains("id") || !j["id"].is_string()) throw CorpusError("missing string field 'id'");
  if (!j.contains("text") || !j["text"].is_string()) throw CorpusError("missing string field 'text'");
  r.id = j["id"].get<std::string>();
  r.text = j["text"].get<std::string>();
  if (j.contains("domain") && !j["domain"].is_null()) {
    if (!j["domain"].is_string()) throw CorpusError("field 'domain' must be a string");
    r.domain = j["domain"].get<std::string>();
  }
  if (j.contains("flags")) {
    if (!j["flags"].is_array()) throw CorpusError("field 'flags' must be a list of strings");
    for (const auto& f : j["flags"]) {
      if (!f.is_string()) throw CorpusError("field 'flags' must be a list of strings");
      r.raw_flags.push_back(f.get<std::string>());
    }
  }
  return r;
}

// Returns false when the record is skipped.
bool admit(PromptRecord record, const std::string& where, const LoadOptions& options,
           std::unordered_set<std::string>& ids, CorpusLoad& result) {
  if (trim(record.text).empty() || tokenize(record.text).empty()) {
    ++result.skipped;
    return false;
  }
  if (record.text.find(kMaskToken) != std::string::npos) {
    std::string msg = where + ": text contains the reserved mask symbol";
    if (options.strict) throw CorpusError(msg);
    result.warnings.push_back(msg);
  }
  if (!ids.insert(record.id).second) {
    std::string msg = where + ": duplicate id '" + record.id + "'";
    if (options.strict) throw CorpusError(msg);
    result.warnings.push_back(msg + " (skipped)");
    ++result.skipped;
    return false;
  }
  result.records.push_back(std::move(record));
  return true;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  tokenize_into(text, out);
  return out;
}

std::vector<std::string> tokenize_masked(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t hit = text.find(kMaskToken, pos);
    if (hit == std::string_view::npos) {
      tokenize_into(text.substr(pos), out);
      break;
    }
    tokenize_into(text.substr(pos, hit - pos), out);
    out.emplace_back(kMaskToken);
    pos = hit + kMaskToken.size();
  }
  return out;
}

CorpusLoad load_corpus(const fs::path& path, CorpusFormat format, const LoadOptions& options) {
  CorpusLoad result;
  std::unordered_set<std::string> ids;
  if (format == CorpusFormat::jsonl) {
    std::ifstream in(path);
    if (!in || fs::is_directory(path)) throw CorpusError("cannot read corpus file " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) {
        ++result.skipped;
        continue;
      }
      const std::string where = path.filename().string() + ":" + std::to_string(line_no);
      PromptRecord record;
      try {
        record = record_from_json(json::parse(line));
      } catch (const std::exception& e) {
        std::string msg = where + ": malformed record: " + e.what();
        if (options.strict) throw CorpusError(msg);
        result.warnings.push_back(msg);
        continue;
      }
      admit(std::move(record), where, options, ids, result);
    }
    return result;
  }

  if (!fs::is_directory(path)) throw CorpusError("not a directory: " + path.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    fs::path rel = fs::relative(file, path);
    PromptRecord record;
    record.id = rel.generic_string();
    record.text = read_file(file);
    if (rel.has_parent_path()) record.domain = rel.parent_path().filename().string();
    admit(std::move(record), rel.generic_string(), options, ids, result);
  }
  return result;
}

void write_corpus_jsonl(const fs::path& path, std::span<const PromptRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["text"] = r.text;
    if (r.domain) j["domain"] = *r.domain;
    if (!r.raw_flags.empty()) j["flags"] = r.raw_flags;
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

MlmBuild make_mlm_instances(std::span<const PromptRecord> records, std::size_t masks_per_record,
                            std::uint64_t seed) {
  if (masks_per_record < 1) throw std::invalid_argument("masks_per_record must be >= 1");
  MlmBuild build;
  Rng rng(seed);
  for (const auto& record : records) {
    std::vector<std::string> tokens = tokenize(record.text);
    if (tokens.size() > kMaxSequenceTokens) tokens.resize(kMaxSequenceTokens);
    if (tokens.size() < 2) {
      ++build.skipped_records;
      continue;
    }
    // Partial Fisher-Yates over positions.
    std::vector<std::size_t> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    const std::size_t n_masks = std::min(masks_per_record, tokens.size());
    for (std::size_t i = 0; i < n_masks; ++i) {
      std::size_t j = i + rng.uniform_index(positions.size() - i);
      std::swap(positions[i], positions[j]);
    }
    std::vector<std::size_t> chosen(positions.begin(), positions.begin() + n_masks);
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t pos : chosen) {
      MlmInstance inst;
      inst.prompt_id = record.id;
      inst.tokens = tokens;
      inst.mask_index = pos;
      inst.target = tokens[pos];
      inst.tokens[pos] = std::string(kMaskToken);
      inst.domain = record.domain;
      build.instances.push_back(std::move(inst));
    }
  }
  return build;
}

CorpusSplit split_corpus(std::span<const MlmInstance> instances, SplitFractions fractions,
                         std::uint64_t seed) {
  const double f[3] = {fractions.train, fractions.val, fractions.test};
  for (double x : f) {
    if (!(x >= 0.0)) throw std::invalid_argument("split fractions must be non-negative");
  }
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must sum to 1");
  }

  std::vector<std::string> prompts;
  std::unordered_map<std::string, std::size_t> prompt_index;
  for (const auto& inst : instances) {
    if (prompt_index.emplace(inst.prompt_id, prompts.size()).second) prompts.push_back(inst.prompt_id);
  }
  const std::size_t n = prompts.size();
  const std::size_t nonzero = static_cast<std::size_t>(std::count_if(f, f + 3, [](double x) { return x > 0; }));
  if (n < nonzero) throw std::invalid_argument("fewer prompts than non-empty splits");

  // Largest-remainder apportionment, then guarantee one prompt per non-empty split.
  std::size_t counts[3];
  double exact[3];
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    exact[k] = f[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact[k] + 1e-9));
    assigned += counts[k];
  }
  while (assigned < n) {
    int best = 0;
    double best_rem = -1.0;
    for (int k = 0; k < 3; ++k) {
      double rem = exact[k] - static_cast<double>(counts[k]);
      if (f[k] > 0 && rem > best_rem) best_rem = rem, best = k;
    }
    ++counts[best];
    ++assigned;
  }
  for (int k = 0; k < 3; ++k) {
    if (f[k] > 0 && counts[k] == 0) {
      int donor = 0;
      double surplus = -1e300;
      for (int d = 0; d < 3; ++d) {
        double s = static_cast<double>(counts[d]) - exact[d];
        if (counts[d] > 1 && s > surplus) surplus = s, donor = d;
      }
      --counts[donor];
      ++counts[k];
    }
  }

  Rng rng = Rng::substream(seed, "split");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<int> which(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    which[order[i]] = i < counts[0] ? 0 : (i < counts[0] + counts[1] ? 1 : 2);
  }

  CorpusSplit split;
  split.seed = seed;
  split.fractions = fractions;
  for (const auto& inst : instances) {
    switch (which[prompt_index.at(inst.prompt_id)]) {
      case 0: split.train.push_back(inst); break;
      case 1: split.val.push_back(inst); break;
      default: split.test.push_back(inst); break;
    }
  }
  return split;
}

}  // namespace tryage
