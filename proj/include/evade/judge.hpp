#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evade/attack.hpp"
#include "evade/error.hpp"
#include "evade/hash.hpp"
#include "evade/parallel.hpp"
#include "evade/reward.hpp"
#include "evade/rng.hpp"
#include "evade/transport.hpp"

namespace evade {

inline constexpr std::string_view kJudgeTemplate =
    "You are an expert evaluator of text quality. You will be given an original text and a paraphrased version. "
    "Rate the paraphrase on two dimensions using a 1-5 Likert scale.\n"
    "\n"
    "Original text: {source_text}\n"
    "\n"
    "Paraphrased text: {paraphrase_text}\n"
    "\n"
    "Rate on:\n"
    "1. QUALITY (1-5): How fluent, grammatical, and natural is the paraphrase? (1=incoherent, 5=perfectly natural)\n"
    "2. SIMILARITY (1-5): How well does the paraphrase preserve the meaning of the original? (1=completely different, "
    "5=identical meaning)\n"
    "\n"
    "Respond in JSON format: {\"quality\": <int>, \"similarity\": <int>, \"quality_justification\": \"<str>\", "
    "\"similarity_justification\": \"<str>\"}";

// Single left-to-right pass over the template, so braces or placeholder
// names inside the user texts are copied verbatim.
inline std::string build_judge_prompt(std::string_view source, std::string_view paraphrase) {
  if (source.empty() || paraphrase.empty()) throw PreconditionError("judge prompt needs non-empty texts");
  static constexpr std::string_view kSource = "{source_text}";
  static constexpr std::string_view kPara = "{paraphrase_text}";
  std::string out;
  out.reserve(kJudgeTemplate.size() + source.size() + paraphrase.size());
  std::size_t i = 0;
  while (i < kJudgeTemplate.size()) {
    if (kJudgeTemplate.compare(i, kSource.size(), kSource) == 0) {
      out.append(source);
      i += kSource.size();
    } else if (kJudgeTemplate.compare(i, kPara.size(), kPara) == 0) {
      out.append(paraphrase);
      i += kPara.size();
    } else {
      out.push_back(kJudgeTemplate[i++]);
    }
  }
  return out;
}

struct VerdictScores {
  int quality = 0;
  int similarity = 0;
  std::string quality_justification;
  std::string similarity_justification;
};

struct JudgeVerdict {
  std::string sample_id;
  std::string method_id;
  VerdictScores scores;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["sample_id"] = sample_id;
    j["method_id"] = method_id;
    j["quality"] = scores.quality;
    j["similarity"] = scores.similarity;
    j["quality_justification"] = scores.quality_justification;
    j["similarity_justification"] = scores.similarity_justification;
    return j;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Trims whitespace; if the result opens with ``` the opening line (with any
// language tag) is dropped, and a closing ``` at the end is dropped.
inline std::string strip_code_fences(std::string_view response) {
  auto s = detail::trim(response);
  if (s.substr(0, 3) != "```") return std::string(s);
  const auto nl = s.find('\n');
  s = nl == std::string_view::npos ? std::string_view{} : s.substr(nl + 1);
  s = detail::trim(s);
  if (s.size() >= 3 && s.substr(s.size() - 3) == "```") s = s.substr(0, s.size() - 3);
  return std::string(detail::trim(s));
}

inline VerdictScores parse_verdict(std::string_view response) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(strip_code_fences(response));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("judge response is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("judge response is not a JSON object");
  auto likert = [&](const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(std::string("judge response lacks \"") + key + "\"");
    if (!it->is_number_integer()) throw SchemaError(std::string("\"") + key + "\" must be an integer");
    const auto v = it->get<long long>();
    if (v < 1 || v > 5) throw RangeError(std::string("\"") + key + "\" = " + std::to_string(v) + " outside 1..5");
    return static_cast<int>(v);
  };
  auto text = [&](const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(std::string("judge response lacks \"") + key + "\"");
    if (!it->is_string()) throw SchemaError(std::string("\"") + key + "\" must be a string");
    return it->get<std::string>();
  };
  return {likert("quality"), likert("similarity"), text("quality_justification"), text("similarity_justification")};
}

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual std::string complete(const std::string& prompt) const = 0;
};

// POST {"prompt"} -> {"text"}.
class HttpJudge final : public JudgeClient {
 public:
  HttpJudge(std::string url, TransportLimits limits, std::string auth_env = {})
      : transport_(std::move(url), limits, std::move(auth_env)) {}

  std::string complete(const std::string& prompt) const override {
    auto res = transport_.post({{"prompt", prompt}});
    auto it = res.body.find("text");
    if (it == res.body.end() || !it->is_string()) throw ProtocolError("judge response lacks a string \"text\"");
    return it->get<std::string>();
  }

 private:
  HttpTransport transport_;
};

// Deterministic in-process judge: similarity from the hashed-n-gram cosine,
// quality penalized for mixed-script words.
class OfflineJudge final : public JudgeClient {
 public:
  std::string complete(const std::string& prompt) const override {
    const auto src = between(prompt, "Original text: ", "\n\nParaphrased text: ");
    const auto para = between(prompt, "\n\nParaphrased text: ", "\n\nRate on:");
    const double cos = std::max(0.0, semantic_reward(src, para, embedder_));
    const int similarity = 1 + static_cast<int>(std::lround(4.0 * cos));
    std::size_t non_ascii_letters = 0;
    for (char32_t cp : unicode::decode(para))
      if (cp >= 0x370 && cp < 0x530) ++non_ascii_letters;
    const int quality = non_ascii_letters == 0 ? 4 : (non_ascii_letters < 10 ? 3 : 2);
    return nlohmann::json{{"quality", quality},
                          {"similarity", similarity},
                          {"quality_justification", "offline heuristic"},
                          {"similarity_justification", "hashed n-gram cosine"}}
        .dump();
  }

 private:
  static std::string between(const std::string& s, std::string_view open, std::string_view close) {
    const auto b = s.find(open);
    if (b == std::string::npos) throw ProtocolError("offline judge: unexpected prompt layout");
    const auto start = b + open.size();
    const auto e = s.find(close, start);
    if (e == std::string::npos) throw ProtocolError("offline judge: unexpected prompt layout");
    return s.substr(start, e - start);
  }

  HashedNgramEmbedder embedder_;
};

// On-disk response cache keyed by sha256(prompt).
class JudgeCache {
 public:
  explicit JudgeCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::optional<std::string> get(const std::string& prompt) const {
    if (dir_.empty()) return std::nullopt;
    const auto p = path_for(prompt);
    if (!std::filesystem::exists(p)) return std::nullopt;
    return read_file(p);
  }

  void put(const std::string& prompt, const std::string& response) const {
    if (dir_.empty()) return;
    write_file_atomic(path_for(prompt), response);
  }

 private:
  std::filesystem::path path_for(const std::string& prompt) const { return dir_ / (sha256_hex(prompt) + ".txt"); }
  std::filesystem::path dir_;
};

struct JudgePlan {
  std::vector<std::string> sample_ids;
  std::vector<std::string> methods;
  std::size_t concurrency = 4;
  int reasks = 1;           // extra asks after an unparseable verdict
  int abort_after = 3;      // consecutive transport failures that abort the run
};

using OutputStore = std::map<std::string, std::map<std::string, AttackOutput>>;  // method -> id -> output

// Picks `subset` ids present for every method, by a seeded shuffle of the
// shared ids, and returns them in sorted order.
inline JudgePlan make_judge_plan(const OutputStore& outputs, const std::vector<std::string>& methods, std::size_t subset,
                                 std::uint64_t seed) {
  std::vector<std::string> shared;
  bool first = true;
  for (const auto& m : methods) {
    auto it = outputs.find(m);
    if (it == outputs.end()) throw ValidationError("judge plan: no outputs for method " + m);
    std::vector<std::string> ids;
    for (const auto& [id, _] : it->second) ids.push_back(id);
    if (first) {
      shared = ids;
      first = false;
    } else {
      std::vector<std::string> keep;
      std::set_intersection(shared.begin(), shared.end(), ids.begin(), ids.end(), std::back_inserter(keep));
      shared = std::move(keep);
    }
  }
  Rng rng(derive_seed(seed, "judge/subset"));
  rng.shuffle(shared);
  if (shared.size() > subset) shared.resize(subset);
  std::sort(shared.begin(), shared.end());
  return {shared, methods};
}

inline void validate_plan(const JudgePlan& plan, const OutputStore& outputs) {
  if (plan.methods.empty()) throw ValidationError("judge plan lists no methods");
  std::set<std::string> ids(plan.sample_ids.begin(), plan.sample_ids.end());
  if (ids.size() != plan.sample_ids.size()) throw ValidationError("judge plan repeats a sample id");
  for (const auto& m : plan.methods) {
    auto it = outputs.find(m);
    if (it == outputs.end()) throw ValidationError("judge plan: no outputs for method " + m);
    for (const auto& id : plan.sample_ids)
      if (!it->second.count(id))
        throw ValidationError("judge plan: method " + m + " has no paraphrase for sample " + id +
                              " (sample ids must match across methods)");
  }
}

struct MethodSummary {
  double mean_quality = 0.0;
  double mean_similarity = 0.0;
  std::size_t judged = 0;
  std::size_t missing = 0;
};

struct JudgeReport {
  std::vector<JudgeVerdict> verdicts;  // plan order: methods outer, ids inner
  std::map<std::string, MethodSummary> per_method;
  std::size_t requests = 0;
  std::size_t cache_hits = 0;
  bool aborted = false;

  nlohmann::ordered_json summary_json() const {
    nlohmann::ordered_json j;
    for (const auto& [m, s] : per_method) {
      j["methods"][m] = {{"mean_quality", s.mean_quality},
                         {"mean_similarity", s.mean_similarity},
                         {"judged", s.judged},
                         {"missing", s.missing}};
    }
    j["requests"] = requests;
    j["cache_hits"] = cache_hits;
    j["aborted"] = aborted;
    return j;
  }
};

inline std::map<std::string, MethodSummary> summarize_verdicts(const std::vector<JudgeVerdict>& verdicts,
                                                               const std::vector<std::string>& methods,
                                                               std::size_t ids_per_method) {
  std::map<std::string, MethodSummary> out;
  for (const auto& m : methods) out[m];
  for (const auto& v : verdicts) {
    auto& s = out[v.method_id];
    s.mean_quality += v.scores.quality;
    s.mean_similarity += v.scores.similarity;
    ++s.judged;
  }
  for (auto& [m, s] : out) {
    if (s.judged) {
      s.mean_quality /= static_cast<double>(s.judged);
      s.mean_similarity /= static_cast<double>(s.judged);
    }
    s.missing = ids_per_method - std::min(ids_per_method, s.judged);
  }
  return out;
}

inline std::string verdicts_jsonl(const std::vector<JudgeVerdict>& verdicts) {
  std::string out;
  for (const auto& v : verdicts) out += v.to_json().dump() + "\n";
  return out;
}

inline std::vector<JudgeVerdict> parse_verdicts_jsonl(std::string_view text) {
  std::vector<JudgeVerdict> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    if (detail::trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("sample_id").get<std::string>(),
                   j.at("method_id").get<std::string>(),
                   {j.at("quality").get<int>(), j.at("similarity").get<int>(),
                    j.at("quality_justification").get<std::string>(), j.at("similarity_justification").get<std::string>()}});
  }
  return out;
}

// One request per (method, id) not already cached. Verdicts are persisted to
// `verdicts_path` (if given) even when the run aborts.
inline JudgeReport run_judging(const JudgePlan& plan, const OutputStore& outputs,
                               const std::map<std::string, std::string>& sources, const JudgeClient& client,
                               const JudgeCache& cache, const std::filesystem::path& verdicts_path = {}) {
  validate_plan(plan, outputs);
  struct Job {
    std::string method, id, prompt;
  };
  std::vector<Job> jobs;
  for (const auto& m : plan.methods) {
    for (const auto& id : plan.sample_ids) {
      auto src = sources.find(id);
      if (src == sources.end()) throw ValidationError("judge: no source text for sample " + id);
      jobs.push_back({m, id, build_judge_prompt(src->second, outputs.at(m).at(id).paraphrase)});
    }
  }

  std::vector<std::optional<VerdictScores>> results(jobs.size());
  std::atomic<std::size_t> requests{0}, hits{0};
  std::atomic<int> consecutive_transport{0};
  std::atomic<bool> aborted{false};
  parallel_for(jobs.size(), plan.concurrency, [&](std::size_t i) {
    if (aborted.load()) return;
    const auto& job = jobs[i];
    if (auto cached = cache.get(job.prompt)) {
      try {
        results[i] = parse_verdict(*cached);
        hits.fetch_add(1);
        return;
      } catch (const ValidationError&) {
        // stale or corrupt cache entry: ask again
      }
    }
    for (int ask = 0; ask <= plan.reasks; ++ask) {
      std::string response;
      try {
        requests.fetch_add(1);
        response = client.complete(job.prompt);
        consecutive_transport.store(0);
      } catch (const TransportError&) {
        if (consecutive_transport.fetch_add(1) + 1 >= plan.abort_after) aborted.store(true);
        return;
      }
      try {
        results[i] = parse_verdict(response);
        cache.put(job.prompt, response);
        return;
      } catch (const ValidationError&) {
      }
    }
  });

  JudgeReport report;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (results[i]) report.verdicts.push_back({jobs[i].id, jobs[i].method, *results[i]});
  report.per_method = summarize_verdicts(report.verdicts, plan.methods, plan.sample_ids.size());
  report.requests = requests.load();
  report.cache_hits = hits.load();
  report.aborted = aborted.load();
  if (!verdicts_path.empty()) write_file_atomic(verdicts_path, verdicts_jsonl(report.verdicts));
  if (report.aborted)
    throw TransportError("judge endpoint unavailable; partial verdicts persisted (" +
                             std::to_string(report.verdicts.size()) + " of " + std::to_string(jobs.size()) + ")",
                         plan.abort_after);
  return report;
}

}  // namespace evade
