#pragma once

// Synthetic two-register corpus. "AI" text leans on formal synonyms, expanded
// negations and semicolon joins; "human" text leans the other way. Both draw
// from the same clause templates, so the registers are separable by
// character n-gram statistics while the rewrite rules can move text from one
// register towards the other.

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "evade/corpus.hpp"
#include "evade/rng.hpp"
#include "evade/rules.hpp"

namespace evade::synth {

struct Register {
  double formal = 0.5;
  double expanded = 0.5;
  double semicolon = 0.1;
  double compound = 0.35;
  double opener = 0.1;
  std::vector<std::string> openers;
};

inline Register ai_register() { return {0.75, 0.8, 0.3, 0.35, 0.12, {"Overall, ", "Notably, ", "In summary, "}}; }
inline Register human_register() { return {0.2, 0.3, 0.05, 0.35, 0.12, {"Honestly, ", "Well, ", "To be fair, "}}; }

struct Options {
  std::size_t n_human = 200;
  std::size_t n_ai = 200;
  std::uint64_t seed = 1;
  std::string id_prefix = "s";
  std::size_t min_sentences = 11;
  std::size_t max_sentences = 16;
};

namespace detail {

// [w] synonym slot (formal form), <x> contraction slot (expanded form),
// {S} subject, {O} topic, {P} place, {N} number word.
inline const std::vector<std::string_view>& clause_templates() {
  static const std::vector<std::string_view> t = {
      "{S} [frequently] [utilize] {O} to [examine] {O}",
      "<it is> [crucial] to [comprehend] how {O} changes over time",
      "{S} <do not> always [obtain] [sufficient] support for {O}",
      "{S} [require] [substantial] help from {S}",
      "the [initial] results [demonstrate] a [significant] shift in {O}",
      "[numerous] [individuals] [purchase] {O} near {P}",
      "<they are> trying to [enhance] the [methodology] used for {O}",
      "the [objective] <is not> to [terminate] {O} but to [enhance] it",
      "{S} [commence] work at [approximately] {N} in the morning",
      "<that is> a [fundamental] part of any [optimal] plan for {O}",
      "{S} [endeavor] to [assist] {S} whenever they can",
      "<there is> a [substantial] gap between {O} and {O}",
      "it [subsequently] became clear that {O} <cannot> be ignored",
      "{S} <did not> [comprehend] why {O} mattered so much",
      "<let us> [examine] the data from {P}",
      "<I am> not sure whether {O} will [enhance] daily life",
      "a [residence] near {P} <was not> easy to find",
      "{S} [frequently] talk about {O} with {S}",
      "<you are> likely to [obtain] better results with a [fundamental] review of {O}",
      "[additionally] {S} [inquire] about {O} every week",
      "<we are> still learning how {O} affects {S}",
      "{S} <does not> [require] a [significant] budget",
      "the plan <will not> be [beneficial] unless {S} take part",
      "{S} <are not> convinced that {O} is [optimal]",
  };
  return t;
}

inline constexpr std::array<std::string_view, 12> kSubjects{
    "researchers", "students",      "local farmers", "many teachers", "city planners",   "engineers",
    "small shops", "doctors",       "volunteers",    "parents",       "young workers",   "community groups"};
inline constexpr std::array<std::string_view, 12> kTopics{
    "renewable energy", "public transport", "online learning", "water quality", "housing costs", "local schools",
    "digital tools",    "food prices",      "air pollution",   "job training",  "health care",   "social media"};
inline constexpr std::array<std::string_view, 6> kPlaces{"the city center", "rural areas", "the coast",
                                                         "the old market",  "the north side", "the river"};
inline constexpr std::array<std::string_view, 4> kNumbers{"six", "seven", "eight", "nine"};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& a, Rng& rng) {
  return a[rng.below(N)];
}

class Builder {
 public:
  explicit Builder(const RuleSet& rules) {
    for (const auto& [formal, plain] : rules.synonyms) synonyms_.emplace(formal, plain);
    for (const auto& [expanded, contracted] : rules.contractions) contractions_.emplace(expanded, contracted);
  }

  std::string clause(std::string_view tpl, const Register& reg, Rng& rng) const {
    std::string out;
    for (std::size_t i = 0; i < tpl.size();) {
      const char c = tpl[i];
      if (c == '[' || c == '<') {
        const char close = c == '[' ? ']' : '>';
        const auto end = tpl.find(close, i);
        const std::string key(tpl.substr(i + 1, end - i - 1));
        if (c == '[') {
          out += rng.bernoulli(reg.formal) ? key : synonyms_.at(key);
        } else {
          out += rng.bernoulli(reg.expanded) ? key : contractions_.at(key);
        }
        i = end + 1;
      } else if (c == '{') {
        const char slot = tpl[i + 1];
        switch (slot) {
          case 'S': out += pick(kSubjects, rng); break;
          case 'O': out += pick(kTopics, rng); break;
          case 'P': out += pick(kPlaces, rng); break;
          default: out += pick(kNumbers, rng); break;
        }
        i += 3;
      } else {
        out.push_back(c);
        ++i;
      }
    }
    return out;
  }

  std::string text(const Register& reg, const Options& opt, Rng& rng) const {
    const auto& templates = clause_templates();
    const auto sentences = opt.min_sentences + rng.below(opt.max_sentences - opt.min_sentences + 1);
    std::string out;
    bool continue_sentence = false;
    for (std::size_t s = 0; s < sentences; ++s) {
      std::string sentence = clause(templates[rng.below(templates.size())], reg, rng);
      if (rng.bernoulli(reg.compound)) sentence += ", and " + clause(templates[rng.below(templates.size())], reg, rng);
      if (!continue_sentence) {
        if (rng.bernoulli(reg.opener)) {
          sentence = std::string(reg.openers[rng.below(reg.openers.size())]) + sentence;
        } else {
          sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
        }
        if (!out.empty()) out.push_back(' ');
      }
      out += sentence;
      const bool last = s + 1 == sentences;
      continue_sentence = !last && rng.bernoulli(reg.semicolon);
      out += continue_sentence ? "; " : ".";
    }
    return out;
  }

 private:
  std::unordered_map<std::string, std::string> synonyms_;
  std::unordered_map<std::string, std::string> contractions_;
};

}  // namespace detail

inline Corpus generate(const Options& opt, const RuleSet& rules = RuleSet::defaults()) {
  detail::Builder builder(rules);
  std::vector<TextSample> samples;
  samples.reserve(opt.n_human + opt.n_ai);
  Rng rng(derive_seed(opt.seed, "synth"));
  const auto human = human_register();
  const auto ai = ai_register();
  std::size_t h = 0, a = 0;
  // Interleave labels so file order does not group by class.
  while (h < opt.n_human || a < opt.n_ai) {
    const bool take_ai = h >= opt.n_human || (a < opt.n_ai && rng.bernoulli(0.5));
    char id[64];
    if (take_ai) {
      std::snprintf(id, sizeof id, "%s-ai-%05zu", opt.id_prefix.c_str(), a++);
      samples.push_back({id, Label::ai, builder.text(ai, opt, rng), "synthetic/ai"});
    } else {
      std::snprintf(id, sizeof id, "%s-human-%05zu", opt.id_prefix.c_str(), h++);
      samples.push_back({id, Label::human, builder.text(human, opt, rng), "synthetic/human"});
    }
  }
  return Corpus(std::move(samples));
}

}  // namespace evade::synth
