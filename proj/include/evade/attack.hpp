#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "evade/corpus.hpp"
#include "evade/detect.hpp"
#include "evade/error.hpp"
#include "evade/rng.hpp"
#include "evade/rules.hpp"
#include "evade/transport.hpp"
#include "evade/unicode.hpp"

namespace evade {

enum class Method { M0, M1, M2, M3, M4, M5 };

inline const char* to_string(Method m) {
  static constexpr std::array<const char*, 6> names{"M0", "M1", "M2", "M3", "M4", "M5"};
  return names[static_cast<std::size_t>(m)];
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (int i = 0; i < 6; ++i)
    if (s == to_string(static_cast<Method>(i))) return static_cast<Method>(i);
  return std::nullopt;
}

struct AttackOutput {
  std::string sample_id;
  Method method = Method::M0;
  std::string paraphrase;
  std::size_t candidate_count = 1;
  nlohmann::json aux = nlohmann::json::object();

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["sample_id"] = sample_id;
    j["method"] = to_string(method);
    j["paraphrase"] = paraphrase;
    j["candidate_count"] = candidate_count;
    j["aux"] = aux;
    return j;
  }

  static AttackOutput from_json(const nlohmann::json& j) {
    AttackOutput o;
    o.sample_id = j.at("sample_id").get<std::string>();
    auto m = parse_method(j.at("method").get<std::string>());
    if (!m) throw ValidationError("unknown method id in attack output");
    o.method = *m;
    o.paraphrase = j.at("paraphrase").get<std::string>();
    o.candidate_count = j.value("candidate_count", std::size_t{1});
    o.aux = j.value("aux", nlohmann::json::object());
    if (o.paraphrase.empty()) throw ValidationError("attack output for " + o.sample_id + " has an empty paraphrase");
    return o;
  }
};

// ---------------------------------------------------------------------------
// M0

inline AttackOutput identity_attack(const TextSample& sample) {
  return {sample.id, Method::M0, sample.text, 1, {{"query_count", 0}}};
}

// ---------------------------------------------------------------------------
// Trace sampling shared by the rule paraphraser and the trained policy.

using ChoiceProbs = std::array<double, kChoicesPerSite>;

// Inverse-CDF draw: one uniform per site.
inline std::uint8_t sample_choice(const ChoiceProbs& p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t c = 0; c + 1 < p.size(); ++c) {
    acc += p[c];
    if (u < acc) return static_cast<std::uint8_t>(c);
  }
  return static_cast<std::uint8_t>(p.size() - 1);
}

template <typename ProbFn>
std::vector<std::uint8_t> sample_trace(const RewriteSpace& space, ProbFn&& probs, Rng& rng) {
  std::vector<std::uint8_t> trace(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) trace[i] = sample_choice(probs(space.sites()[i].cls), rng);
  return trace;
}

// As sample_trace, but an all-keep trace (which would reproduce the input) is
// redrawn; after 64 identity draws the first site is forced to apply.
template <typename ProbFn>
std::vector<std::uint8_t> sample_rewrite_trace(const RewriteSpace& space, ProbFn&& probs, Rng& rng) {
  if (space.empty()) return {};
  for (int attempt = 0; attempt < 64; ++attempt) {
    auto trace = sample_trace(space, probs, rng);
    if (std::any_of(trace.begin(), trace.end(), [](auto c) { return c != 0; })) return trace;
  }
  std::vector<std::uint8_t> trace(space.size(), 0);
  trace[0] = 1;
  return trace;
}

inline ChoiceProbs uniform_choice(RuleClass) { return {0.5, 0.5}; }

struct RuleCandidates {
  std::vector<std::string> texts;
  std::vector<std::vector<std::uint8_t>> traces;
  bool no_sites = false;
};

// Candidate i is drawn from the substream (seed, i), so the first m
// candidates do not depend on n.
inline RuleCandidates rule_paraphrase(std::string_view text, const RuleSet& rules, std::uint64_t seed, std::size_t n) {
  if (n < 1) throw PreconditionError("rule_paraphrase needs n >= 1");
  RewriteSpace space(rules, std::string(text));
  RuleCandidates out;
  out.no_sites = space.empty();
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    auto trace = sample_rewrite_trace(space, uniform_choice, rng);
    out.texts.push_back(space.render(trace));
    out.traces.push_back(std::move(trace));
  }
  return out;
}

inline RuleCandidates rule_paraphrase(const TextSample& sample, const RuleSet& rules, std::uint64_t seed, std::size_t n) {
  return rule_paraphrase(sample.text, rules, seed, n);
}

// Seed used for a given input text under a root attack seed; shared by the
// offline paraphraser and the M3 candidate generator so M1's output is M3's
// candidate 0.
inline std::uint64_t text_seed(std::uint64_t root, std::string_view text) { return derive_seed(root, fnv1a64(text)); }

// ---------------------------------------------------------------------------
// M1: single-pass external paraphrase.

inline constexpr std::string_view kParaphrasePrompt = "Paraphrase the following text while preserving its meaning: ";

inline std::string paraphrase_prompt(std::string_view text) {
  std::string p(kParaphrasePrompt);
  p.append(text);
  return p;
}

struct DecodingParams {
  double temperature = 1.0;
  double top_p = 0.9;
  int max_tokens = 512;
};

struct ParaphraseRequest {
  std::string prompt;
  DecodingParams decoding;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["prompt"] = prompt;
    j["temperature"] = decoding.temperature;
    j["top_p"] = decoding.top_p;
    j["max_tokens"] = decoding.max_tokens;
    return j;
  }
};

class ParaphraseClient {
 public:
  virtual ~ParaphraseClient() = default;
  virtual std::string complete(const ParaphraseRequest& request) const = 0;
};

// POST {"prompt","temperature","top_p","max_tokens"} -> {"text"}.
class HttpParaphraser final : public ParaphraseClient {
 public:
  HttpParaphraser(std::string url, TransportLimits limits, std::string auth_env = {})
      : transport_(std::move(url), limits, std::move(auth_env)) {}

  std::string complete(const ParaphraseRequest& request) const override {
    auto res = transport_.post(nlohmann::json(request.to_json()));
    auto it = res.body.find("text");
    if (it == res.body.end() || !it->is_string()) throw ProtocolError("paraphraser response lacks a string \"text\"");
    return it->get<std::string>();
  }

 private:
  HttpTransport transport_;
};

// In-process stand-in for the paraphrasing LLM: recovers the text from the
// prompt and returns one rule-based rewrite.
class OfflineParaphraser final : public ParaphraseClient {
 public:
  OfflineParaphraser(RuleSet rules, std::uint64_t seed) : rules_(std::move(rules)), seed_(seed) {}

  std::string complete(const ParaphraseRequest& request) const override {
    std::string_view prompt(request.prompt);
    if (prompt.substr(0, kParaphrasePrompt.size()) != kParaphrasePrompt)
      throw ProtocolError("offline paraphraser received an unexpected prompt");
    const auto text = prompt.substr(kParaphrasePrompt.size());
    return rule_paraphrase(text, rules_, text_seed(seed_, text), 1).texts.front();
  }

 private:
  RuleSet rules_;
  std::uint64_t seed_;
};

inline AttackOutput external_paraphrase(const TextSample& sample, const ParaphraseClient& client,
                                        const DecodingParams& decoding = {}) {
  const ParaphraseRequest req{paraphrase_prompt(sample.text), decoding};
  auto text = client.complete(req);
  if (text.empty()) throw ProtocolError("paraphraser returned empty text for " + sample.id);
  return {sample.id, Method::M1, std::move(text), 1, {{"query_count", 0}}};
}

// ---------------------------------------------------------------------------
// M3: detector-guided candidate selection.

using CandidateGenerator = std::function<std::vector<std::string>(const TextSample&, std::size_t k)>;

inline CandidateGenerator rule_candidate_generator(RuleSet rules, std::uint64_t seed) {
  return [rules = std::move(rules), seed](const TextSample& s, std::size_t k) {
    return rule_paraphrase(s.text, rules, text_seed(seed, s.text), k).texts;
  };
}

inline AttackOutput candidate_selection_attack(const TextSample& sample, const CandidateGenerator& generator,
                                               std::size_t k, const EnsembleConfig& ensemble,
                                               const DetectorRegistry& registry) {
  if (k < 1) throw PreconditionError("candidate selection needs k >= 1");
  registry.validate(ensemble);
  auto candidates = generator(sample, k);
  if (candidates.size() != k)
    throw Error("candidate generator produced " + std::to_string(candidates.size()) + " candidates, expected " +
                std::to_string(k));
  std::vector<double> scores;
  scores.reserve(k);
  std::size_t best = 0;
  for (std::size_t i = 0; i < k; ++i) {
    scores.push_back(registry.score_ensemble(ensemble, candidates[i]));
    if (scores[i] < scores[best]) best = i;
  }
  nlohmann::json aux{{"scores", scores},
                     {"selected_index", best},
                     {"query_count", k * ensemble.members.size()}};
  return {sample.id, Method::M3, std::move(candidates[best]), k, std::move(aux)};
}

// ---------------------------------------------------------------------------
// M5: homoglyph substitution.

class HomoglyphTable {
 public:
  HomoglyphTable(std::vector<std::pair<char32_t, char32_t>> pairs, double rate) : pairs_(std::move(pairs)), rate_(rate) {
    if (!(rate_ >= 0.0 && rate_ <= 1.0)) throw ValidationError("substitution rate must lie in [0,1]");
    for (const auto& [src, dst] : pairs_) {
      if (src == dst) throw ValidationError("homoglyph pair maps a character to itself");
      if (!forward_.emplace(src, dst).second) throw ValidationError("homoglyph table maps a source twice");
      if (!inverse_.emplace(dst, src).second) throw ValidationError("homoglyph table is not injective");
    }
    for (const auto& [dst, src] : inverse_)
      if (forward_.count(dst)) throw ValidationError("homoglyph target is also a source; inversion would be ambiguous");
  }

  // About thirty Latin -> Cyrillic/Greek confusables.
  static std::vector<std::pair<char32_t, char32_t>> default_pairs() {
    return {{U'a', U'а'}, {U'c', U'с'}, {U'e', U'е'}, {U'o', U'о'}, {U'p', U'р'},
            {U'x', U'х'}, {U'y', U'у'}, {U'i', U'і'}, {U'j', U'ј'}, {U's', U'ѕ'},
            {U'h', U'һ'}, {U'd', U'ԁ'}, {U'q', U'ԛ'}, {U'w', U'ԝ'}, {U'l', U'ӏ'},
            {U'v', U'ν'}, {U'A', U'А'}, {U'B', U'В'}, {U'C', U'С'}, {U'E', U'Е'},
            {U'H', U'Н'}, {U'I', U'І'}, {U'J', U'Ј'}, {U'K', U'К'}, {U'M', U'М'},
            {U'N', U'Ν'}, {U'O', U'О'}, {U'P', U'Р'}, {U'S', U'Ѕ'}, {U'T', U'Т'},
            {U'X', U'Х'}, {U'Y', U'Ү'}, {U'Z', U'Ζ'}};
  }

  static HomoglyphTable defaults(double rate = 0.1) { return HomoglyphTable(default_pairs(), rate); }

  // Two columns per line (the characters themselves or U+XXXX), '#' comments.
  static HomoglyphTable from_file(const std::filesystem::path& path, double rate) {
    std::ifstream in(path);
    if (!in) throw ValidationError("homoglyph table not found: " + path.string());
    std::vector<std::pair<char32_t, char32_t>> pairs;
    std::string line;
    std::size_t lineno = 0;
    auto parse_cell = [&](const std::string& cell) -> char32_t {
      if (cell.size() > 2 && (cell.rfind("U+", 0) == 0 || cell.rfind("u+", 0) == 0))
        return static_cast<char32_t>(std::stoul(cell.substr(2), nullptr, 16));
      const auto cps = unicode::decode(cell);
      if (cps.size() != 1) throw ParseError("homoglyph table line " + std::to_string(lineno) + ": expected one character", lineno);
      return cps[0];
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      std::istringstream ss(line);
      std::string a, b, extra;
      if (!(ss >> a)) continue;
      if (!(ss >> b) || (ss >> extra))
        throw ParseError("homoglyph table line " + std::to_string(lineno) + ": expected two columns", lineno);
      pairs.emplace_back(parse_cell(a), parse_cell(b));
    }
    return HomoglyphTable(std::move(pairs), rate);
  }

  double rate() const noexcept { return rate_; }
  HomoglyphTable with_rate(double rate) const { return HomoglyphTable(pairs_, rate); }
  const std::vector<std::pair<char32_t, char32_t>>& pairs() const noexcept { return pairs_; }

  std::optional<char32_t> forward(char32_t c) const {
    auto it = forward_.find(c);
    return it == forward_.end() ? std::nullopt : std::optional<char32_t>(it->second);
  }
  std::optional<char32_t> inverse(char32_t c) const {
    auto it = inverse_.find(c);
    return it == inverse_.end() ? std::nullopt : std::optional<char32_t>(it->second);
  }

 private:
  std::vector<std::pair<char32_t, char32_t>> pairs_;
  double rate_;
  std::unordered_map<char32_t, char32_t> forward_;
  std::unordered_map<char32_t, char32_t> inverse_;
};

struct HomoglyphResult {
  std::string text;
  std::size_t replacements = 0;
  std::size_t mappable = 0;
};

// One uniform draw per mappable character, in order.
inline HomoglyphResult homoglyph_substitute(std::string_view text, const HomoglyphTable& table, std::uint64_t seed) {
  Rng rng(seed);
  auto cps = unicode::decode(text);
  HomoglyphResult r;
  for (auto& cp : cps) {
    if (auto dst = table.forward(cp)) {
      ++r.mappable;
      if (rng.bernoulli(table.rate())) {
        cp = *dst;
        ++r.replacements;
      }
    }
  }
  r.text = unicode::encode(cps);
  return r;
}

inline AttackOutput homoglyph_attack(const TextSample& sample, const HomoglyphTable& table, std::uint64_t seed) {
  auto r = homoglyph_substitute(sample.text, table, seed);
  return {sample.id, Method::M5, std::move(r.text), 1,
          {{"replacements", r.replacements}, {"mappable", r.mappable}, {"rate", table.rate()}, {"query_count", 0}}};
}

// Exact inverse for text that contained no table targets before the attack.
inline std::string homoglyph_invert(std::string_view text, const HomoglyphTable& table) {
  auto cps = unicode::decode(text);
  for (auto& cp : cps)
    if (auto src = table.inverse(cp)) cp = *src;
  return unicode::encode(cps);
}

}  // namespace evade
