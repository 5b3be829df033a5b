#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evade/detect.hpp"
#include "evade/error.hpp"
#include "evade/features.hpp"
#include "evade/transport.hpp"

namespace evade {

struct RewardWeights {
  double alpha = 1.0;
  double beta = 0.1;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ValidationError("reward weights must be >= 0");
  }
};

struct RewardBreakdown {
  double r_det = 0.0;
  double r_sem = 0.0;
  double total = 0.0;

  nlohmann::json to_json() const { return {{"r_det", r_det}, {"r_sem", r_sem}, {"total", total}}; }
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  // Unit L2 norm, or empty when the text yields no features.
  virtual SparseVector embed(std::string_view text) const = 0;
};

// Hashed character n-gram counts, L2-normalized.
class HashedNgramEmbedder final : public Embedder {
 public:
  explicit HashedNgramEmbedder(std::vector<int> orders = {3, 4, 5}, std::uint32_t dimension = 1u << 16)
      : orders_(std::move(orders)), dimension_(dimension) {
    if (!is_power_of_two(dimension_)) throw ValidationError("embedding dimension must be a power of two");
  }

  SparseVector embed(std::string_view text) const override {
    auto v = hashed_ngram_counts(text, orders_, dimension_);
    v.normalize();
    return v;
  }

  const std::vector<int>& orders() const noexcept { return orders_; }
  std::uint32_t dimension() const noexcept { return dimension_; }

 private:
  std::vector<int> orders_;
  std::uint32_t dimension_;
};

// POST {"text"} -> {"vector": [...]}; vectors are re-normalized on receipt.
class RemoteEmbedder final : public Embedder {
 public:
  RemoteEmbedder(std::string url, TransportLimits limits, std::string auth_env = {})
      : transport_(std::move(url), limits, std::move(auth_env)) {}

  SparseVector embed(std::string_view text) const override {
    auto res = transport_.post({{"text", std::string(text)}});
    auto it = res.body.find("vector");
    if (it == res.body.end() || !it->is_array()) throw ProtocolError("embedder response lacks a \"vector\" array");
    SparseVector v;
    std::uint32_t i = 0;
    for (const auto& x : *it) {
      if (!x.is_number()) throw ProtocolError("embedder vector holds a non-number");
      const double d = x.get<double>();
      if (!std::isfinite(d)) throw ProtocolError("embedder vector holds a non-finite value");
      if (d != 0.0) v.entries.emplace_back(i, d);
      ++i;
    }
    v.normalize();
    return v;
  }

 private:
  HttpTransport transport_;
};

inline double detector_reward(double p_ens) {
  if (!(p_ens >= 0.0 && p_ens <= 1.0)) throw PreconditionError("ensemble probability outside [0,1]");
  return 1.0 - p_ens;
}

// Texts with no n-grams count here; their similarity is defined as 0.
inline std::atomic<std::uint64_t>& degenerate_embedding_count() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

inline double cosine_of_unit(const SparseVector& a, const SparseVector& b) {
  if (a.empty() || b.empty()) {
    degenerate_embedding_count().fetch_add(1);
    return 0.0;
  }
  return std::clamp(dot(a, b), -1.0, 1.0);
}

inline double semantic_reward(std::string_view x, std::string_view y, const Embedder& e) {
  if (x.empty() || y.empty()) throw PreconditionError("semantic reward needs non-empty texts");
  return cosine_of_unit(e.embed(x), e.embed(y));
}

inline RewardBreakdown combine_reward(double p_ens, double r_sem, const RewardWeights& w) {
  RewardBreakdown r;
  r.r_det = detector_reward(p_ens);
  r.r_sem = r_sem;
  r.total = w.alpha * r.r_det + w.beta * r.r_sem;
  return r;
}

// Composite reward bound to an ensemble, a registry and an
// embedder. Held-out detectors are rejected at construction.
class RewardModel {
 public:
  RewardModel(const DetectorRegistry& registry, EnsembleConfig ensemble, std::shared_ptr<const Embedder> embedder,
              RewardWeights weights)
      : registry_(&registry), ensemble_(std::move(ensemble)), embedder_(std::move(embedder)), weights_(weights) {
    registry_->validate(ensemble_);
    weights_.validate();
  }

  const EnsembleConfig& ensemble() const noexcept { return ensemble_; }
  const RewardWeights& weights() const noexcept { return weights_; }
  const Embedder& embedder() const noexcept { return *embedder_; }
  const DetectorRegistry& registry() const noexcept { return *registry_; }

  double ensemble_probability(std::string_view y) const { return registry_->score_ensemble(ensemble_, y); }

  RewardBreakdown evaluate(std::string_view x, std::string_view y) const {
    return combine_reward(ensemble_probability(y), semantic_reward(x, y, *embedder_), weights_);
  }

  // Same as evaluate() with the source embedding computed once.
  RewardBreakdown evaluate(const SparseVector& x_embedding, std::string_view y) const {
    if (y.empty()) throw PreconditionError("semantic reward needs non-empty texts");
    return combine_reward(ensemble_probability(y), cosine_of_unit(x_embedding, embedder_->embed(y)), weights_);
  }

 private:
  const DetectorRegistry* registry_;
  EnsembleConfig ensemble_;
  std::shared_ptr<const Embedder> embedder_;
  RewardWeights weights_;
};

}  // namespace evade
