#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "evade/error.hpp"
#include "evade/rng.hpp"
#include "evade/unicode.hpp"

namespace evade {

enum class Label { human, ai };

inline const char* to_string(Label l) { return l == Label::human ? "human" : "ai"; }

inline std::optional<Label> parse_label(std::string_view s) {
  if (s == "human") return Label::human;
  if (s == "ai") return Label::ai;
  return std::nullopt;
}

struct TextSample {
  std::string id;
  Label label = Label::ai;
  std::string text;
  std::optional<std::string> source_tag;

  bool operator==(const TextSample&) const = default;
};

// Maps the corpus record fields onto JSON keys; MAGE derivatives disagree on
// naming.
struct FieldMap {
  std::string id = "id";
  std::string label = "label";
  std::string text = "text";
  std::string source = "source";
};

class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<TextSample> samples, std::size_t token_min = 0, std::size_t token_max = 0)
      : samples_(std::move(samples)), token_min_(token_min), token_max_(token_max) {}

  const std::vector<TextSample>& samples() const noexcept { return samples_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const TextSample& operator[](std::size_t i) const { return samples_[i]; }
  auto begin() const noexcept { return samples_.begin(); }
  auto end() const noexcept { return samples_.end(); }

  // 0/0 means no window has been applied.
  std::size_t token_min() const noexcept { return token_min_; }
  std::size_t token_max() const noexcept { return token_max_; }

  std::size_t count(Label l) const {
    return static_cast<std::size_t>(
        std::count_if(samples_.begin(), samples_.end(), [l](const TextSample& s) { return s.label == l; }));
  }

  Corpus only(Label l) const {
    std::vector<TextSample> out;
    for (const auto& s : samples_)
      if (s.label == l) out.push_back(s);
    return Corpus(std::move(out), token_min_, token_max_);
  }

  const TextSample* find(std::string_view id) const {
    for (const auto& s : samples_)
      if (s.id == id) return &s;
    return nullptr;
  }

  bool operator==(const Corpus&) const = default;

 private:
  std::vector<TextSample> samples_;
  std::size_t token_min_ = 0;
  std::size_t token_max_ = 0;
};

struct CorpusIssue {
  std::size_t line;  // 1-based
  std::string kind;  // parse | schema | label | duplicate | empty_text
  std::string message;
};

class CorpusValidationError : public ValidationError {
 public:
  explicit CorpusValidationError(std::vector<CorpusIssue> issues)
      : ValidationError(summarize(issues)), issues_(std::move(issues)) {}

  const std::vector<CorpusIssue>& issues() const noexcept { return issues_; }

  nlohmann::json report() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& i : issues_) arr.push_back({{"line", i.line}, {"kind", i.kind}, {"message", i.message}});
    return {{"valid", false}, {"issues", arr}};
  }

 private:
  static std::string summarize(const std::vector<CorpusIssue>& issues) {
    std::ostringstream ss;
    ss << issues.size() << " invalid corpus record(s)";
    for (std::size_t i = 0; i < issues.size() && i < 5; ++i)
      ss << "; line " << issues[i].line << ": " << issues[i].message;
    return ss.str();
  }

  std::vector<CorpusIssue> issues_;
};

namespace detail {

inline std::optional<std::string> json_id(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  return std::nullopt;
}

}  // namespace detail

// Parses JSON-lines text. Every invalid record is collected; if there is at
// least one, CorpusValidationError is thrown carrying all of them.
inline Corpus parse_jsonl(std::istream& in, const FieldMap& fields = {}) {
  std::vector<TextSample> samples;
  std::vector<CorpusIssue> issues;
  std::unordered_map<std::string, std::size_t> first_line_of;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      issues.push_back({lineno, "parse", std::string("malformed JSON: ") + e.what()});
      continue;
    }
    if (!obj.is_object()) {
      issues.push_back({lineno, "parse", "line is not a JSON object"});
      continue;
    }
    auto field = [&](const std::string& key) -> const nlohmann::json* {
      auto it = obj.find(key);
      return it == obj.end() ? nullptr : &*it;
    };
    const auto* id_v = field(fields.id);
    const auto* label_v = field(fields.label);
    const auto* text_v = field(fields.text);
    if (!id_v || !label_v || !text_v) {
      issues.push_back({lineno, "schema", "missing one of the mapped fields '" + fields.id + "', '" + fields.label +
                                              "', '" + fields.text + "'"});
      continue;
    }
    auto id = detail::json_id(*id_v);
    if (!id || id->empty()) {
      issues.push_back({lineno, "schema", "id must be a non-empty string or integer"});
      continue;
    }
    if (!label_v->is_string()) {
      issues.push_back({lineno, "label", "label must be a string"});
      continue;
    }
    auto label = parse_label(label_v->get<std::string>());
    if (!label) {
      issues.push_back({lineno, "label", "unknown label \"" + label_v->get<std::string>() + "\" (expected human|ai)"});
      continue;
    }
    if (!text_v->is_string()) {
      issues.push_back({lineno, "schema", "text must be a string"});
      continue;
    }
    auto text = text_v->get<std::string>();
    if (unicode::nfc(text).empty()) {
      issues.push_back({lineno, "empty_text", "text is empty after NFC normalization"});
      continue;
    }
    if (auto it = first_line_of.find(*id); it != first_line_of.end()) {
      issues.push_back({lineno, "duplicate",
                        "duplicate id \"" + *id + "\" on lines " + std::to_string(it->second) + " and " +
                            std::to_string(lineno)});
      continue;
    }
    first_line_of.emplace(*id, lineno);
    TextSample s{*id, *label, std::move(text), std::nullopt};
    if (const auto* src = field(fields.source); src && src->is_string()) s.source_tag = src->get<std::string>();
    samples.push_back(std::move(s));
  }
  if (!issues.empty()) throw CorpusValidationError(std::move(issues));
  return Corpus(std::move(samples));
}

inline Corpus load_jsonl(const std::filesystem::path& path, const FieldMap& fields = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("corpus file not found: " + path.string());
  return parse_jsonl(in, fields);
}

inline std::string to_jsonl(const Corpus& corpus, const FieldMap& fields = {}) {
  std::string out;
  for (const auto& s : corpus) {
    nlohmann::ordered_json obj;
    obj[fields.id] = s.id;
    obj[fields.label] = to_string(s.label);
    obj[fields.text] = s.text;
    if (s.source_tag) obj[fields.source] = *s.source_tag;
    out += obj.dump();
    out.push_back('\n');
  }
  return out;
}

struct FilterStats {
  std::size_t kept = 0;
  std::size_t too_short = 0;
  std::size_t too_long = 0;
  bool empty_result = false;
};

inline Corpus filter_token_window(const Corpus& corpus, std::size_t min_tokens, std::size_t max_tokens,
                                  FilterStats* stats = nullptr) {
  if (min_tokens < 1 || max_tokens < min_tokens)
    throw PreconditionError("token window requires 1 <= min <= max");
  FilterStats st;
  std::vector<TextSample> kept;
  for (const auto& s : corpus) {
    const auto n = unicode::token_count(s.text);
    if (n < min_tokens) {
      ++st.too_short;
    } else if (n > max_tokens) {
      ++st.too_long;
    } else {
      kept.push_back(s);
    }
  }
  st.kept = kept.size();
  st.empty_result = kept.empty();
  if (stats) *stats = st;
  return Corpus(std::move(kept), min_tokens, max_tokens);
}

struct SplitSpec {
  std::size_t train_ai = 10000;
  std::size_t eval_human = 1000;
  std::size_t eval_ai = 1000;
};

struct Split {
  Corpus train;
  Corpus eval;
};

// Train receives AI text only. Members are drawn by a seeded shuffle of each
// label's indices; both outputs keep the corpus order.
inline Split split(const Corpus& corpus, const SplitSpec& spec, std::uint64_t seed) {
  std::vector<std::size_t> human, ai;
  for (std::size_t i = 0; i < corpus.size(); ++i) (corpus[i].label == Label::human ? human : ai).push_back(i);
  const std::size_t need_ai = spec.train_ai + spec.eval_ai;
  if (human.size() < spec.eval_human || ai.size() < need_ai) {
    std::ostringstream ss;
    ss << "insufficient samples for split: requested human=" << spec.eval_human << " ai=" << need_ai
       << ", available human=" << human.size() << " ai=" << ai.size();
    throw ValidationError(ss.str());
  }
  Rng rng_h(derive_seed(seed, "split/human"));
  Rng rng_a(derive_seed(seed, "split/ai"));
  rng_h.shuffle(human);
  rng_a.shuffle(ai);

  std::vector<std::size_t> train_idx(ai.begin(), ai.begin() + static_cast<std::ptrdiff_t>(spec.train_ai));
  std::vector<std::size_t> eval_idx(ai.begin() + static_cast<std::ptrdiff_t>(spec.train_ai),
                                    ai.begin() + static_cast<std::ptrdiff_t>(need_ai));
  eval_idx.insert(eval_idx.end(), human.begin(), human.begin() + static_cast<std::ptrdiff_t>(spec.eval_human));
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(eval_idx.begin(), eval_idx.end());

  auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<TextSample> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(corpus[i]);
    return Corpus(std::move(out), corpus.token_min(), corpus.token_max());
  };
  return {gather(train_idx), gather(eval_idx)};
}

}  // namespace evade
