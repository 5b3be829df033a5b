#pragma once

// Rewrite-rule machinery shared by the offline paraphraser and the trainable
// policy. A text is scanned once into a list of non-overlapping rewrite
// sites; every site offers two choices (keep or apply) and a trace of
// choices renders deterministically to a paraphrase.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "evade/error.hpp"
#include "evade/hash.hpp"

namespace evade {

enum class RuleClass : std::uint8_t {
  synonym_plain = 0,   // formal word -> plain synonym
  synonym_formal = 1,  // plain word -> formal synonym
  contract = 2,        // "do not" -> "don't"
  expand = 3,          // "don't" -> "do not"
  punct = 4,           // "; " -> ", "
  clause_flip = 5,     // "A, and B." -> "B, and a."
};

inline constexpr std::size_t kRuleClassCount = 6;
inline constexpr std::size_t kChoicesPerSite = 2;  // 0 = keep, 1 = apply

inline const char* to_string(RuleClass c) {
  static constexpr std::array<const char*, kRuleClassCount> names{"synonym_plain", "synonym_formal", "contract",
                                                                  "expand",        "punct",          "clause_flip"};
  return names[static_cast<std::size_t>(c)];
}

struct RuleSet {
  std::vector<std::pair<std::string, std::string>> synonyms;      // (formal, plain)
  std::vector<std::pair<std::string, std::string>> contractions;  // (expanded, contracted)

  static RuleSet defaults() {
    RuleSet r;
    r.synonyms = {{"utilize", "use"},         {"demonstrate", "show"},   {"commence", "start"},
                  {"assist", "help"},         {"obtain", "get"},         {"numerous", "many"},
                  {"approximately", "about"}, {"subsequently", "later"}, {"individuals", "people"},
                  {"sufficient", "enough"},   {"endeavor", "try"},       {"purchase", "buy"},
                  {"require", "need"},        {"inquire", "ask"},        {"additionally", "also"},
                  {"significant", "big"},     {"crucial", "key"},        {"substantial", "large"},
                  {"comprehend", "understand"}, {"examine", "check"},    {"residence", "home"},
                  {"frequently", "often"},    {"objective", "goal"},     {"methodology", "method"},
                  {"enhance", "improve"},     {"terminate", "end"},      {"fundamental", "basic"},
                  {"optimal", "best"},        {"beneficial", "helpful"}, {"initial", "first"}};
    r.contractions = {{"do not", "don't"},     {"does not", "doesn't"}, {"did not", "didn't"},
                      {"is not", "isn't"},     {"are not", "aren't"},   {"was not", "wasn't"},
                      {"it is", "it's"},       {"that is", "that's"},   {"they are", "they're"},
                      {"we are", "we're"},     {"you are", "you're"},   {"cannot", "can't"},
                      {"will not", "won't"},   {"there is", "there's"}, {"let us", "let's"},
                      {"I am", "I'm"}};
    return r;
  }

  // Tab-separated lines: "synonym<TAB>formal<TAB>plain" or
  // "contraction<TAB>expanded<TAB>contracted"; '#' starts a comment.
  static RuleSet from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("rule file not found: " + path.string());
    RuleSet r;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      std::string col;
      while (std::getline(ss, col, '\t')) cols.push_back(col);
      if (cols.size() != 3) throw ParseError("rule file line " + std::to_string(lineno) + ": expected 3 columns", lineno);
      if (cols[0] == "synonym") {
        r.synonyms.emplace_back(cols[1], cols[2]);
      } else if (cols[0] == "contraction") {
        r.contractions.emplace_back(cols[1], cols[2]);
      } else {
        throw ParseError("rule file line " + std::to_string(lineno) + ": unknown rule kind " + cols[0], lineno);
      }
    }
    return r;
  }

  std::string canonical() const {
    std::string s;
    for (const auto& [a, b] : synonyms) s += "synonym\t" + a + "\t" + b + "\n";
    for (const auto& [a, b] : contractions) s += "contraction\t" + a + "\t" + b + "\n";
    return s;
  }

  std::string hash() const { return sha256_hex(canonical()); }
};

struct RewriteSite {
  RuleClass cls;
  std::size_t begin;
  std::size_t end;
  std::string replacement;  // unused for clause_flip
  std::size_t split = 0;    // clause_flip: offset of ", and "
};

namespace detail {

inline bool is_word_char(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '\''; }

inline char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }
inline char upper(char c) { return static_cast<char>(std::toupper(static_cast<unsigned char>(c))); }

// Lowercases the first character only; the rest must already match.
inline std::string fold_first(std::string_view s) {
  std::string out(s);
  if (!out.empty()) out[0] = lower(out[0]);
  return out;
}

inline bool starts_upper(std::string_view s) { return !s.empty() && std::isupper(static_cast<unsigned char>(s[0])); }

inline std::string with_case_of(std::string_view original, std::string repl) {
  if (!repl.empty() && starts_upper(original)) repl[0] = upper(repl[0]);
  return repl;
}

inline std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = upper(s[0]);
  return s;
}

inline std::string decapitalize(std::string s) {
  const bool pronoun_i = s.size() >= 1 && s[0] == 'I' && (s.size() == 1 || !std::isalpha(static_cast<unsigned char>(s[1])));
  if (!s.empty() && !pronoun_i) s[0] = lower(s[0]);
  return s;
}

inline constexpr std::string_view kClauseJoin = ", and ";

}  // namespace detail

class RewriteSpace {
 public:
  RewriteSpace(const RuleSet& rules, std::string text) : text_(std::move(text)) { scan(rules); }

  const std::string& text() const noexcept { return text_; }
  const std::vector<RewriteSite>& sites() const noexcept { return sites_; }
  std::size_t size() const noexcept { return sites_.size(); }
  bool empty() const noexcept { return sites_.empty(); }

  // trace[i] is the choice at sites()[i]; 0 keeps the original span.
  std::string render(const std::vector<std::uint8_t>& trace) const {
    if (trace.size() != sites_.size()) throw PreconditionError("trace length does not match site count");
    std::string out;
    out.reserve(text_.size() + 16);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < sites_.size(); ++i) {
      const auto& s = sites_[i];
      if (s.cls != RuleClass::clause_flip) continue;
      out += render_range(cursor, s.begin, trace);
      if (trace[i]) {
        auto first = render_range(s.begin, s.split, trace);
        auto second = render_range(s.split + detail::kClauseJoin.size(), s.end, trace);
        out += detail::capitalize(std::move(second));
        out += detail::kClauseJoin;
        out += detail::decapitalize(std::move(first));
      } else {
        out += render_range(s.begin, s.end, trace);
      }
      cursor = s.end;
    }
    out += render_range(cursor, text_.size(), trace);
    return out;
  }

 private:
  std::string render_range(std::size_t b, std::size_t e, const std::vector<std::uint8_t>& trace) const {
    std::string out;
    std::size_t cursor = b;
    for (std::size_t i = 0; i < sites_.size(); ++i) {
      const auto& s = sites_[i];
      if (s.cls == RuleClass::clause_flip || s.begin < b || s.end > e) continue;
      out.append(text_, cursor, s.begin - cursor);
      if (trace[i]) {
        out += s.replacement;
      } else {
        out.append(text_, s.begin, s.end - s.begin);
      }
      cursor = s.end;
    }
    out.append(text_, cursor, e - cursor);
    return out;
  }

  void scan(const RuleSet& rules) {
    std::unordered_map<std::string, std::pair<RuleClass, std::string>> single;
    std::unordered_map<std::string, std::string> two_word;
    for (const auto& [formal, plain] : rules.synonyms) {
      single.emplace(detail::fold_first(formal), std::make_pair(RuleClass::synonym_plain, plain));
      single.emplace(detail::fold_first(plain), std::make_pair(RuleClass::synonym_formal, formal));
    }
    for (const auto& [expanded, contracted] : rules.contractions) {
      single.emplace(detail::fold_first(contracted), std::make_pair(RuleClass::expand, expanded));
      if (expanded.find(' ') == std::string::npos) {
        single.emplace(detail::fold_first(expanded), std::make_pair(RuleClass::contract, contracted));
      } else {
        two_word.emplace(detail::fold_first(expanded), contracted);
      }
    }

    struct Word {
      std::size_t b, e;
    };
    std::vector<Word> words;
    for (std::size_t i = 0; i < text_.size();) {
      if (std::isalpha(static_cast<unsigned char>(text_[i]))) {
        std::size_t j = i;
        while (j < text_.size() && detail::is_word_char(text_[j])) ++j;
        while (j > i && text_[j - 1] == '\'') --j;  // trailing quote is punctuation
        words.push_back({i, j});
        i = j == i ? i + 1 : j;
      } else {
        ++i;
      }
    }

    std::vector<RewriteSite> token_sites;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const std::string_view word(text_.data() + words[w].b, words[w].e - words[w].b);
      if (w + 1 < words.size() && words[w + 1].b == words[w].e + 1 && text_[words[w].e] == ' ') {
        const std::string_view next(text_.data() + words[w + 1].b, words[w + 1].e - words[w + 1].b);
        std::string pair = detail::fold_first(word);
        pair.push_back(' ');
        pair.append(next);
        if (auto it = two_word.find(pair); it != two_word.end()) {
          token_sites.push_back({RuleClass::contract, words[w].b, words[w + 1].e, detail::with_case_of(word, it->second)});
          ++w;
          continue;
        }
      }
      if (auto it = single.find(detail::fold_first(word)); it != single.end()) {
        token_sites.push_back({it->second.first, words[w].b, words[w].e, detail::with_case_of(word, it->second.second)});
      }
    }
    for (std::size_t p = text_.find("; "); p != std::string::npos; p = text_.find("; ", p + 2)) {
      token_sites.push_back({RuleClass::punct, p, p + 2, ", "});
    }

    std::vector<RewriteSite> flips;
    std::size_t start = 0;
    while (start < text_.size()) {
      while (start < text_.size() && std::isspace(static_cast<unsigned char>(text_[start]))) ++start;
      if (start >= text_.size()) break;
      std::size_t end = text_.find_first_of(".!?\n", start);
      if (end == std::string::npos) end = text_.size();
      const bool closes = end < text_.size() && text_[end] == '.' &&
                          (end + 1 == text_.size() || std::isspace(static_cast<unsigned char>(text_[end + 1])));
      if (closes) {
        const std::string_view body(text_.data() + start, end - start);
        const auto join = body.find(detail::kClauseJoin);
        const bool single_join = join != std::string_view::npos && join > 0 &&
                                 body.find(detail::kClauseJoin, join + 1) == std::string_view::npos &&
                                 join + detail::kClauseJoin.size() < body.size();
        if (single_join && body.find(';') == std::string_view::npos &&
            std::isalpha(static_cast<unsigned char>(body[join + detail::kClauseJoin.size()]))) {
          flips.push_back({RuleClass::clause_flip, start, end, {}, start + join});
        }
      }
      start = end + 1;
    }

    std::sort(token_sites.begin(), token_sites.end(), [](const auto& a, const auto& b) { return a.begin < b.begin; });
    // Flip sites precede the token sites they contain.
    std::size_t t = 0;
    for (auto& f : flips) {
      while (t < token_sites.size() && token_sites[t].begin < f.begin) sites_.push_back(std::move(token_sites[t++]));
      sites_.push_back(std::move(f));
    }
    while (t < token_sites.size()) sites_.push_back(std::move(token_sites[t++]));
  }

  std::string text_;
  std::vector<RewriteSite> sites_;
};

}  // namespace evade
