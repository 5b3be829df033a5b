#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "evade/error.hpp"
#include "evade/parallel.hpp"
#include "evade/rng.hpp"

namespace evade {

struct ScoreSet {
  std::vector<double> human_scores;
  std::vector<double> ai_scores;
  std::string detector_id;
  std::string method_id;

  void validate() const {
    for (const auto* v : {&human_scores, &ai_scores})
      for (double s : *v)
        if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("score outside [0,1] in score set " + detector_id + "/" + method_id);
  }
};

// Mann-Whitney AUROC via mid-ranks: P(ai > human) + 0.5 P(ai == human).
inline double auroc(const std::vector<double>& human, const std::vector<double>& ai) {
  if (human.empty() || ai.empty()) throw PreconditionError("AUROC needs both classes non-empty");
  struct Item {
    double v;
    bool is_ai;
  };
  std::vector<Item> all;
  all.reserve(human.size() + ai.size());
  for (double v : human) all.push_back({v, false});
  for (double v : ai) all.push_back({v, true});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
  // Count pairs exactly in integers: below-count for each AI item plus half
  // the tied human items.
  std::uint64_t wins2 = 0;  // twice the U statistic
  std::uint64_t humans_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t h = 0, a = 0;
    while (j < all.size() && all[j].v == all[i].v) {
      (all[j].is_ai ? a : h) += 1;
      ++j;
    }
    wins2 += a * (2 * humans_below + h);
    humans_below += h;
    i = j;
  }
  return static_cast<double>(wins2) / (2.0 * static_cast<double>(human.size()) * static_cast<double>(ai.size()));
}

inline double auroc(const ScoreSet& s) { return auroc(s.human_scores, s.ai_scores); }

// Smallest observed human score s with |{h >= s}| / N <= target; when no
// observed score qualifies, the next representable value above max(human).
inline double calibrate_threshold(const std::vector<double>& human, double target_fpr) {
  if (human.empty()) throw PreconditionError("threshold calibration needs human scores");
  if (!(target_fpr > 0.0 && target_fpr < 1.0)) throw PreconditionError("target FPR must lie in (0,1)");
  auto sorted = human;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i > 0 && sorted[i] == sorted[i - 1]) continue;
    const double at_or_above = static_cast<double>(sorted.size() - i);
    if (at_or_above / n <= target_fpr) return sorted[i];
  }
  return std::nextafter(sorted.back(), std::numeric_limits<double>::infinity());
}

inline double fraction_at_or_above(const std::vector<double>& scores, double threshold) {
  if (scores.empty()) throw PreconditionError("rate over an empty score list");
  const auto hits = std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= threshold; });
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

inline double tpr_at(double threshold, const std::vector<double>& ai) { return fraction_at_or_above(ai, threshold); }
inline double asr_at(double threshold, const std::vector<double>& ai) { return 1.0 - tpr_at(threshold, ai); }

struct OperatingPoint {
  double target_fpr = 0.01;
  double threshold = 0.0;
  double achieved_fpr = 0.0;
  double tpr = 0.0;
  double asr = 1.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["target_fpr"] = target_fpr;
    j["threshold"] = threshold;
    j["achieved_fpr"] = achieved_fpr;
    j["tpr"] = tpr;
    j["asr"] = asr;
    return j;
  }
};

inline OperatingPoint operating_point(const ScoreSet& s, double target_fpr) {
  OperatingPoint op;
  op.target_fpr = target_fpr;
  op.threshold = calibrate_threshold(s.human_scores, target_fpr);
  op.achieved_fpr = fraction_at_or_above(s.human_scores, op.threshold);
  op.tpr = tpr_at(op.threshold, s.ai_scores);
  op.asr = 1.0 - op.tpr;
  return op;
}

using Statistic = std::function<double(const ScoreSet&)>;

inline Statistic auroc_statistic() {
  return [](const ScoreSet& s) { return auroc(s); };
}
inline Statistic tpr_statistic(double target_fpr) {
  return [target_fpr](const ScoreSet& s) { return operating_point(s, target_fpr).tpr; };
}
inline Statistic asr_statistic(double target_fpr) {
  return [target_fpr](const ScoreSet& s) { return operating_point(s, target_fpr).asr; };
}

struct ConfidenceInterval {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t iterations = 500;
  std::uint64_t seed = 42;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["point"] = point;
    j["lo"] = lo;
    j["hi"] = hi;
    j["iterations"] = iterations;
    j["seed"] = seed;
    return j;
  }
};

// Linear-interpolated empirical quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw PreconditionError("quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline ScoreSet resample(const ScoreSet& s, Rng& rng) {
  ScoreSet r;
  r.detector_id = s.detector_id;
  r.method_id = s.method_id;
  r.human_scores.reserve(s.human_scores.size());
  r.ai_scores.reserve(s.ai_scores.size());
  for (std::size_t i = 0; i < s.human_scores.size(); ++i) r.human_scores.push_back(s.human_scores[rng.below(s.human_scores.size())]);
  for (std::size_t i = 0; i < s.ai_scores.size(); ++i) r.ai_scores.push_back(s.ai_scores[rng.below(s.ai_scores.size())]);
  return r;
}

// Stratified percentile bootstrap. Iteration i draws from substream
// (seed, i), so results do not depend on how iterations are scheduled. The
// reported interval is widened to contain the point estimate when the
// percentile interval misses it.
inline ConfidenceInterval bootstrap_ci(const Statistic& statistic, const ScoreSet& s, std::size_t iterations = 500,
                                       std::uint64_t seed = 42, std::size_t workers = 1, int max_redraws = 10) {
  if (iterations < 1) throw PreconditionError("bootstrap needs at least one iteration");
  ConfidenceInterval ci;
  ci.iterations = iterations;
  ci.seed = seed;
  ci.point = statistic(s);
  std::vector<double> stats(iterations);
  parallel_for(iterations, workers, [&](std::size_t i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    for (int attempt = 0;; ++attempt) {
      try {
        const double v = statistic(resample(s, rng));
        if (!std::isfinite(v)) throw NumericError("non-finite bootstrap statistic");
        stats[i] = v;
        return;
      } catch (const Error&) {
        if (attempt >= max_redraws) throw;
      }
    }
  });
  std::sort(stats.begin(), stats.end());
  ci.lo = std::min(quantile_sorted(stats, 0.025), ci.point);
  ci.hi = std::max(quantile_sorted(stats, 0.975), ci.point);
  return ci;
}

struct Histogram {
  std::size_t bins = 0;
  std::vector<std::size_t> human;
  std::vector<std::size_t> ai;
  double threshold = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["bins"] = bins;
    j["human"] = human;
    j["ai"] = ai;
    j["threshold"] = threshold;
    return j;
  }
};

inline std::size_t histogram_bin(double score, std::size_t bins) {
  const auto b = static_cast<std::size_t>(std::floor(score * static_cast<double>(bins)));
  return std::min(b, bins - 1);
}

// Equal-width bins over [0,1]; a score of exactly 1.0 lands in the last bin.
inline Histogram score_histogram(const ScoreSet& s, std::size_t bins, double threshold = 0.0) {
  if (bins < 1) throw PreconditionError("histogram needs at least one bin");
  Histogram h{bins, std::vector<std::size_t>(bins, 0), std::vector<std::size_t>(bins, 0), threshold};
  for (double v : s.human_scores) ++h.human[histogram_bin(v, bins)];
  for (double v : s.ai_scores) ++h.ai[histogram_bin(v, bins)];
  return h;
}

}  // namespace evade
