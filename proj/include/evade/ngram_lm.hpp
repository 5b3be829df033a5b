#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "evade/error.hpp"
#include "evade/unicode.hpp"

namespace evade {

// Character-level n-gram language model with add-k smoothing:
//
//   P(c | h) = (count(h, c) + k) / (count(h) + k * V)
//
// where h is the previous order-1 symbols (padded with BOS at the start of
// each text) and V is the vocabulary size including the unknown symbol.
class NgramLm {
 public:
  static constexpr char32_t kBos = 0x110000;
  static constexpr char32_t kUnk = 0x110001;

  NgramLm() = default;

  static NgramLm train(std::span<const std::string> texts, int order, double k) {
    if (order < 1) throw PreconditionError("n-gram order must be >= 1");
    if (!(k >= 0.0) || !std::isfinite(k)) throw PreconditionError("smoothing k must be finite and >= 0");
    NgramLm lm;
    lm.order_ = order;
    lm.k_ = k;
    std::size_t total = 0;
    std::vector<std::u32string> decoded;
    decoded.reserve(texts.size());
    for (const auto& t : texts) {
      decoded.push_back(unicode::decode(t));
      total += decoded.back().size();
      for (char32_t cp : decoded.back()) lm.vocab_.insert(cp);
    }
    if (total < static_cast<std::size_t>(order))
      throw ValidationError("reference corpus too small for n-gram order " + std::to_string(order) + " (" +
                            std::to_string(total) + " characters)");
    for (const auto& cps : decoded) {
      const auto seq = lm.padded(cps);
      for (std::size_t i = static_cast<std::size_t>(order - 1); i < seq.size(); ++i) {
        const auto gram = seq.substr(i + 1 - order, static_cast<std::size_t>(order));
        ++lm.joint_[gram];
        ++lm.context_[gram.substr(0, gram.size() - 1)];
      }
    }
    return lm;
  }

  int order() const noexcept { return order_; }
  double smoothing() const noexcept { return k_; }
  std::size_t vocab_size() const noexcept { return vocab_.size() + 1; }

  // Natural-log probability of `c` after `context`; the context is the
  // already-mapped order-1 preceding symbols.
  double log_prob(std::u32string_view context, char32_t c) const {
    std::u32string gram(context);
    gram.push_back(map(c));
    const double num = lookup(joint_, gram) + k_;
    const double den = lookup(context_, context) + k_ * static_cast<double>(vocab_size());
    if (den == 0.0) return -std::log(static_cast<double>(vocab_size()));
    if (num == 0.0) return -std::numeric_limits<double>::infinity();
    return std::log(num / den);
  }

  // Per-character log-probabilities of `text`.
  std::vector<double> log_probs(std::string_view text) const {
    const auto seq = padded(unicode::decode(text));
    std::vector<double> out;
    const auto ctx = static_cast<std::size_t>(order_ - 1);
    out.reserve(seq.size() - ctx);
    for (std::size_t i = ctx; i < seq.size(); ++i) out.push_back(log_prob(std::u32string_view(seq).substr(i - ctx, ctx), seq[i]));
    return out;
  }

  // Mean surprisal (cross-entropy) in nats per character.
  double mean_surprisal(std::string_view text) const {
    if (text.empty()) throw PreconditionError("cannot score empty text");
    const auto lp = log_probs(text);
    double s = 0.0;
    for (double v : lp) s -= v;
    return s / static_cast<double>(lp.size());
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["order"] = order_;
    j["k"] = k_;
    std::vector<std::uint32_t> vocab(vocab_.begin(), vocab_.end());
    std::sort(vocab.begin(), vocab.end());
    j["vocab"] = vocab;
    // Sorted so the snapshot is byte-stable.
    std::vector<std::pair<std::vector<std::uint32_t>, std::uint64_t>> grams;
    grams.reserve(joint_.size());
    for (const auto& [g, c] : joint_) grams.emplace_back(std::vector<std::uint32_t>(g.begin(), g.end()), c);
    std::sort(grams.begin(), grams.end());
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [g, c] : grams) arr.push_back({g, c});
    j["grams"] = std::move(arr);
    return j;
  }

  static NgramLm from_json(const nlohmann::json& j) {
    NgramLm lm;
    lm.order_ = j.at("order").get<int>();
    lm.k_ = j.at("k").get<double>();
    for (auto cp : j.at("vocab").get<std::vector<std::uint32_t>>()) lm.vocab_.insert(static_cast<char32_t>(cp));
    for (const auto& e : j.at("grams")) {
      const auto g = e.at(0).get<std::vector<std::uint32_t>>();
      std::u32string gram(g.begin(), g.end());
      const auto c = e.at(1).get<std::uint64_t>();
      lm.joint_[gram] += c;
      lm.context_[gram.substr(0, gram.size() - 1)] += c;
    }
    return lm;
  }

 private:
  char32_t map(char32_t c) const { return vocab_.count(c) ? c : kUnk; }

  std::u32string padded(const std::u32string& cps) const {
    std::u32string seq(static_cast<std::size_t>(order_ - 1), kBos);
    seq.reserve(seq.size() + cps.size());
    for (char32_t cp : cps) seq.push_back(map(cp));
    return seq;
  }

  template <typename Map>
  static double lookup(const Map& m, std::u32string_view key) {
    auto it = m.find(std::u32string(key));
    return it == m.end() ? 0.0 : static_cast<double>(it->second);
  }

  int order_ = 1;
  double k_ = 0.0;
  std::unordered_set<char32_t> vocab_;
  std::unordered_map<std::u32string, std::uint64_t> joint_;
  std::unordered_map<std::u32string, std::uint64_t> context_;
};

}  // namespace evade
