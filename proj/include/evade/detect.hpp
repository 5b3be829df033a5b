#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evade/corpus.hpp"
#include "evade/error.hpp"
#include "evade/features.hpp"
#include "evade/hash.hpp"
#include "evade/ngram_lm.hpp"
#include "evade/rng.hpp"
#include "evade/transport.hpp"

namespace evade {

// Higher value means "more likely AI-generated", for every detector.
struct DetectorScore {
  double value = 0.0;
  std::string detector_id;
};

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

class Detector {
 public:
  virtual ~Detector() = default;
  virtual const std::string& id() const = 0;
  virtual DetectorScore score(std::string_view text) const = 0;
  // In-process detectors are pure functions of their build inputs.
  virtual bool in_process() const { return true; }
  // Serializable state; remote detectors have none.
  virtual nlohmann::json snapshot() const { throw StateError("detector '" + id() + "' has no snapshot form"); }

 protected:
  static void require_text(std::string_view text) {
    if (text.empty()) throw PreconditionError("detector input text must be non-empty");
  }
};

using DetectorPtr = std::shared_ptr<const Detector>;

// Monotone map from a raw detector statistic onto [0,1]:
//   p = logistic(a * (s - b))
struct Calibration {
  double a = 1.0;
  double b = 0.0;

  double apply(double s) const {
    if (std::isinf(s)) return (s > 0) == (a > 0) ? 1.0 : 0.0;
    return sigmoid(a * (s - b));
  }

  nlohmann::json to_json() const { return {{"a", a}, {"b", b}}; }
  static Calibration from_json(const nlohmann::json& j) { return {j.at("a").get<double>(), j.at("b").get<double>()}; }
};

// Ridge-penalized 1-D logistic regression by Newton's method. The statistic
// is standardized first; `ridge` penalizes the standardized slope, which
// keeps (a, b) finite on separable calibration sets.
inline Calibration fit_calibration(const std::vector<double>& stats, const std::vector<int>& is_ai, double ridge = 1.0) {
  if (stats.size() != is_ai.size() || stats.empty()) throw PreconditionError("calibration needs matched, non-empty inputs");
  const auto has = [&](int v) { return std::find(is_ai.begin(), is_ai.end(), v) != is_ai.end(); };
  if (!has(0) || !has(1)) throw ValidationError("calibration split must contain both labels");
  const auto n = static_cast<double>(stats.size());
  double mean = 0.0;
  for (double s : stats) {
    if (!std::isfinite(s)) throw NumericError("non-finite detector statistic in calibration split");
    mean += s;
  }
  mean /= n;
  double var = 0.0;
  for (double s : stats) var += (s - mean) * (s - mean);
  const double sd = std::sqrt(var / n) > 0 ? std::sqrt(var / n) : 1.0;

  double w = 0.0, c = 0.0;
  for (int iter = 0; iter < 100; ++iter) {
    double gw = -ridge * w, gc = 0.0, hww = ridge, hwc = 0.0, hcc = 0.0;
    for (std::size_t i = 0; i < stats.size(); ++i) {
      const double z = (stats[i] - mean) / sd;
      const double p = sigmoid(w * z + c);
      const double r = is_ai[i] - p;
      gw += r * z;
      gc += r;
      const double q = p * (1 - p);
      hww += q * z * z;
      hwc += q * z;
      hcc += q;
    }
    const double det = hww * hcc - hwc * hwc;
    if (det <= 0) break;
    const double dw = (hcc * gw - hwc * gc) / det;
    const double dc = (hww * gc - hwc * gw) / det;
    w += dw;
    c += dc;
    if (std::abs(dw) + std::abs(dc) < 1e-12) break;
  }
  Calibration cal;
  cal.a = w / sd;
  cal.b = (w != 0.0) ? mean - c * sd / w : mean;
  return cal;
}

// ---------------------------------------------------------------------------
// Supervised classifier: logistic regression over hashed character n-grams.

struct ClassifierHyper {
  std::vector<int> ngram_orders{1, 2, 3, 4};
  std::uint32_t feature_buckets = 1u << 18;
  double l2 = 1e-4;
  int epochs = 20;
  double learning_rate = 0.5;
  std::uint64_t seed = 42;

  nlohmann::json to_json() const {
    return {{"ngram_orders", ngram_orders}, {"feature_buckets", feature_buckets}, {"l2", l2},
            {"epochs", epochs},             {"learning_rate", learning_rate},     {"seed", seed}};
  }
  static ClassifierHyper from_json(const nlohmann::json& j) {
    ClassifierHyper h;
    h.ngram_orders = j.value("ngram_orders", h.ngram_orders);
    h.feature_buckets = j.value("feature_buckets", h.feature_buckets);
    h.l2 = j.value("l2", h.l2);
    h.epochs = j.value("epochs", h.epochs);
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.seed = j.value("seed", h.seed);
    return h;
  }
};

class ClassifierDetector final : public Detector {
 public:
  ClassifierDetector(std::string id, ClassifierHyper hyper, std::vector<double> weights, double bias, double train_loss)
      : id_(std::move(id)), hyper_(std::move(hyper)), weights_(std::move(weights)), bias_(bias), train_loss_(train_loss) {}

  const std::string& id() const override { return id_; }

  SparseVector features(std::string_view text) const {
    auto v = hashed_ngram_counts(text, hyper_.ngram_orders, hyper_.feature_buckets);
    v.normalize();
    return v;
  }

  double logit(std::string_view text) const { return dot(features(text), weights_) + bias_; }

  DetectorScore score(std::string_view text) const override {
    require_text(text);
    return {sigmoid(logit(text)), id_};
  }

  double train_loss() const noexcept { return train_loss_; }
  double bias() const noexcept { return bias_; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  nlohmann::json snapshot() const override {
    nlohmann::json w = nlohmann::json::array();
    for (std::size_t i = 0; i < weights_.size(); ++i)
      if (weights_[i] != 0.0) w.push_back({i, weights_[i]});
    return {{"kind", "classifier"}, {"id", id_},     {"hyper", hyper_.to_json()},
            {"bias", bias_},        {"weights", w}, {"train_loss", train_loss_}};
  }

  static std::shared_ptr<ClassifierDetector> from_snapshot(const nlohmann::json& j) {
    auto hyper = ClassifierHyper::from_json(j.at("hyper"));
    std::vector<double> w(hyper.feature_buckets, 0.0);
    for (const auto& e : j.at("weights")) w.at(e.at(0).get<std::size_t>()) = e.at(1).get<double>();
    return std::make_shared<ClassifierDetector>(j.at("id").get<std::string>(), hyper, std::move(w),
                                                j.at("bias").get<double>(), j.at("train_loss").get<double>());
  }

 private:
  std::string id_;
  ClassifierHyper hyper_;
  std::vector<double> weights_;
  double bias_;
  double train_loss_;
};

// Plain SGD on L2-regularized log-loss; sample order reshuffled every epoch
// from (seed, epoch).
inline std::shared_ptr<ClassifierDetector> build_classifier_detector(const Corpus& train, const ClassifierHyper& hyper,
                                                                    std::string id = "classifier") {
  if (train.count(Label::human) == 0 || train.count(Label::ai) == 0)
    throw ValidationError("classifier training corpus must contain both human and ai samples");
  if (!is_power_of_two(hyper.feature_buckets)) throw ValidationError("feature_buckets must be a power of two");
  if (hyper.epochs < 0 || hyper.learning_rate <= 0 || hyper.l2 < 0)
    throw ValidationError("classifier hyperparameters out of range");

  std::vector<SparseVector> xs;
  std::vector<double> ys;
  xs.reserve(train.size());
  for (const auto& s : train) {
    auto v = hashed_ngram_counts(s.text, hyper.ngram_orders, hyper.feature_buckets);
    v.normalize();
    xs.push_back(std::move(v));
    ys.push_back(s.label == Label::ai ? 1.0 : 0.0);
  }
  std::vector<double> w(hyper.feature_buckets, 0.0);
  double b = 0.0;
  std::vector<std::size_t> order(xs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    Rng rng(derive_seed(hyper.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (auto i : order) {
      const double p = sigmoid(dot(xs[i], w) + b);
      const double g = p - ys[i];
      for (const auto& [k, v] : xs[i].entries) w[k] -= hyper.learning_rate * (g * v + hyper.l2 * w[k]);
      b -= hyper.learning_rate * g;
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double p = std::clamp(sigmoid(dot(xs[i], w) + b), 1e-15, 1.0 - 1e-15);
    loss -= ys[i] * std::log(p) + (1 - ys[i]) * std::log(1 - p);
  }
  loss /= static_cast<double>(xs.size());
  return std::make_shared<ClassifierDetector>(std::move(id), hyper, std::move(w), b, loss);
}

// ---------------------------------------------------------------------------
// Zero-shot statistical family: mean surprisal under a human-text LM.

struct LmHyper {
  int order = 3;
  int order_large = 5;  // paired detector only
  double smoothing = 0.1;
  double calibration_ridge = 1.0;

  nlohmann::json to_json() const {
    return {{"order", order}, {"order_large", order_large}, {"smoothing", smoothing}, {"calibration_ridge", calibration_ridge}};
  }
  static LmHyper from_json(const nlohmann::json& j) {
    LmHyper h;
    h.order = j.value("order", h.order);
    h.order_large = j.value("order_large", h.order_large);
    h.smoothing = j.value("smoothing", h.smoothing);
    h.calibration_ridge = j.value("calibration_ridge", h.calibration_ridge);
    return h;
  }
};

class SurprisalDetector final : public Detector {
 public:
  SurprisalDetector(std::string id, NgramLm lm, Calibration cal)
      : id_(std::move(id)), lm_(std::move(lm)), cal_(cal) {}

  const std::string& id() const override { return id_; }
  double statistic(std::string_view text) const { return lm_.mean_surprisal(text); }

  DetectorScore score(std::string_view text) const override {
    require_text(text);
    return {cal_.apply(statistic(text)), id_};
  }

  const NgramLm& lm() const noexcept { return lm_; }
  const Calibration& calibration() const noexcept { return cal_; }

  nlohmann::json snapshot() const override {
    return {{"kind", "surprisal"}, {"id", id_}, {"calibration", cal_.to_json()}, {"lm", lm_.to_json()}};
  }
  static std::shared_ptr<SurprisalDetector> from_snapshot(const nlohmann::json& j) {
    return std::make_shared<SurprisalDetector>(j.at("id").get<std::string>(), NgramLm::from_json(j.at("lm")),
                                               Calibration::from_json(j.at("calibration")));
  }

 private:
  std::string id_;
  NgramLm lm_;
  Calibration cal_;
};

namespace detail {

inline std::vector<std::string> texts_of(const Corpus& c) {
  std::vector<std::string> out;
  out.reserve(c.size());
  for (const auto& s : c) out.push_back(s.text);
  return out;
}

inline void require_human_only(const Corpus& reference) {
  if (reference.empty()) throw ValidationError("reference corpus is empty");
  if (reference.count(Label::ai) != 0) throw ValidationError("reference corpus must contain human text only");
}

template <typename StatFn>
Calibration calibrate_on(const Corpus& calibration, double ridge, StatFn&& stat) {
  std::vector<double> stats;
  std::vector<int> labels;
  for (const auto& s : calibration) {
    stats.push_back(stat(s.text));
    labels.push_back(s.label == Label::ai ? 1 : 0);
  }
  return fit_calibration(stats, labels, ridge);
}

}  // namespace detail

inline std::shared_ptr<SurprisalDetector> build_surprisal_detector(const Corpus& reference, const Corpus& calibration,
                                                                  const LmHyper& hyper, std::string id = "surprisal") {
  detail::require_human_only(reference);
  const auto texts = detail::texts_of(reference);
  auto lm = NgramLm::train(texts, hyper.order, hyper.smoothing);
  const auto cal =
      detail::calibrate_on(calibration, hyper.calibration_ridge, [&](const std::string& t) { return lm.mean_surprisal(t); });
  return std::make_shared<SurprisalDetector>(std::move(id), std::move(lm), cal);
}

// ---------------------------------------------------------------------------
// Paired-LM family: log ratio of cross-entropies under two LMs of different
// orders trained on the same human reference text.

class PairedLmDetector final : public Detector {
 public:
  PairedLmDetector(std::string id, NgramLm small, NgramLm large, Calibration cal)
      : id_(std::move(id)), small_(std::move(small)), large_(std::move(large)), cal_(cal) {}

  const std::string& id() const override { return id_; }

  // ln(CE_large / CE_small); 0 when the two models agree.
  double statistic(std::string_view text) const {
    return std::log(large_.mean_surprisal(text) / small_.mean_surprisal(text));
  }

  DetectorScore score(std::string_view text) const override {
    require_text(text);
    return {cal_.apply(statistic(text)), id_};
  }

  const NgramLm& small_lm() const noexcept { return small_; }
  const NgramLm& large_lm() const noexcept { return large_; }
  const Calibration& calibration() const noexcept { return cal_; }

  nlohmann::json snapshot() const override {
    return {{"kind", "paired_lm"},  {"id", id_},  {"calibration", cal_.to_json()},
            {"small", small_.to_json()}, {"large", large_.to_json()}};
  }
  static std::shared_ptr<PairedLmDetector> from_snapshot(const nlohmann::json& j) {
    return std::make_shared<PairedLmDetector>(j.at("id").get<std::string>(), NgramLm::from_json(j.at("small")),
                                              NgramLm::from_json(j.at("large")),
                                              Calibration::from_json(j.at("calibration")));
  }

 private:
  std::string id_;
  NgramLm small_;
  NgramLm large_;
  Calibration cal_;
};

inline std::shared_ptr<PairedLmDetector> build_paired_lm_detector(const Corpus& reference, const Corpus& calibration,
                                                                 const LmHyper& hyper, std::string id = "paired_lm") {
  if (hyper.order >= hyper.order_large) throw ValidationError("paired-LM detector requires order < order_large");
  detail::require_human_only(reference);
  const auto texts = detail::texts_of(reference);
  auto small = NgramLm::train(texts, hyper.order, hyper.smoothing);
  auto large = NgramLm::train(texts, hyper.order_large, hyper.smoothing);
  PairedLmDetector probe("probe", small, large, Calibration{});
  const auto cal = detail::calibrate_on(calibration, hyper.calibration_ridge,
                                        [&](const std::string& t) { return probe.statistic(t); });
  return std::make_shared<PairedLmDetector>(std::move(id), std::move(small), std::move(large), cal);
}

// ---------------------------------------------------------------------------
// Remote black-box detector: POST {"text"} -> {"score"}.

struct RemoteScore {
  DetectorScore score;
  int attempts = 0;
};

class RemoteDetector final : public Detector {
 public:
  RemoteDetector(std::string id, std::string url, TransportLimits limits, std::string auth_env = {})
      : id_(std::move(id)), transport_(std::move(url), limits, std::move(auth_env)) {}

  const std::string& id() const override { return id_; }
  bool in_process() const override { return false; }

  RemoteScore query(std::string_view text) const {
    require_text(text);
    auto res = transport_.post({{"text", std::string(text)}});
    const auto it = res.body.find("score");
    if (it == res.body.end() || !it->is_number())
      throw ProtocolError(id_ + ": response lacks a numeric \"score\"");
    const double v = it->get<double>();
    if (!(v >= 0.0 && v <= 1.0)) throw ProtocolError(id_ + ": score " + std::to_string(v) + " outside [0,1]");
    return {{v, id_}, res.attempts};
  }

  DetectorScore score(std::string_view text) const override { return query(text).score; }

 private:
  std::string id_;
  HttpTransport transport_;
};

inline std::shared_ptr<RemoteDetector> remote_detector(std::string id, std::string url, TransportLimits limits,
                                                       std::string auth_env = {}) {
  return std::make_shared<RemoteDetector>(std::move(id), std::move(url), limits, std::move(auth_env));
}

// Adapts any scoring callable; used for scripted stubs.
class CallbackDetector final : public Detector {
 public:
  CallbackDetector(std::string id, std::function<double(std::string_view)> fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  const std::string& id() const override { return id_; }
  DetectorScore score(std::string_view text) const override {
    require_text(text);
    const double v = fn_(text);
    if (!(v >= 0.0 && v <= 1.0)) throw ProtocolError(id_ + ": score outside [0,1]");
    return {v, id_};
  }

 private:
  std::string id_;
  std::function<double(std::string_view)> fn_;
};

// ---------------------------------------------------------------------------
// Snapshots.

inline constexpr int kDetectorSnapshotVersion = 1;

inline nlohmann::json detector_snapshot(const Detector& d) {
  auto j = d.snapshot();
  j["format"] = "evade.detector";
  j["version"] = kDetectorSnapshotVersion;
  return j;
}

inline DetectorPtr detector_from_snapshot(const nlohmann::json& j) {
  if (j.value("format", "") != "evade.detector") throw ValidationError("not a detector snapshot");
  if (j.value("version", 0) != kDetectorSnapshotVersion)
    throw ValidationError("unsupported detector snapshot version " + std::to_string(j.value("version", 0)));
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "classifier") return ClassifierDetector::from_snapshot(j);
  if (kind == "surprisal") return SurprisalDetector::from_snapshot(j);
  if (kind == "paired_lm") return PairedLmDetector::from_snapshot(j);
  throw ValidationError("unknown detector kind: " + kind);
}

inline void save_detector(const Detector& d, const std::filesystem::path& path) {
  write_file_atomic(path, detector_snapshot(d).dump());
}

inline DetectorPtr load_detector(const std::filesystem::path& path) {
  try {
    return detector_from_snapshot(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed detector snapshot " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Ensemble and registry.

struct EnsembleMember {
  std::string detector_id;
  double weight = 0.0;
};

struct EnsembleConfig {
  std::vector<EnsembleMember> members;

  void validate() const {
    if (members.empty()) throw RegistryError("ensemble needs at least one member");
    double sum = 0.0;
    std::set<std::string> seen;
    for (const auto& m : members) {
      if (!(m.weight >= 0.0)) throw RegistryError("ensemble weight for '" + m.detector_id + "' must be >= 0");
      if (!seen.insert(m.detector_id).second) throw RegistryError("duplicate ensemble member '" + m.detector_id + "'");
      sum += m.weight;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw RegistryError("ensemble weights must sum to 1 (got " + std::to_string(sum) + ")");
  }

  // Members in canonical (id) order, so summation does not depend on the
  // order the config listed them.
  std::vector<EnsembleMember> canonical() const {
    auto m = members;
    std::sort(m.begin(), m.end(), [](const auto& a, const auto& b) { return a.detector_id < b.detector_id; });
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : members) arr.push_back({{"detector", m.detector_id}, {"weight", m.weight}});
    return arr;
  }
  static EnsembleConfig from_json(const nlohmann::json& j) {
    EnsembleConfig cfg;
    for (const auto& e : j) cfg.members.push_back({e.at("detector").get<std::string>(), e.at("weight").get<double>()});
    return cfg;
  }
};

inline double ensemble_score(const EnsembleConfig& cfg, const std::map<std::string, DetectorScore>& scores) {
  double total = 0.0;
  for (const auto& m : cfg.canonical()) {
    auto it = scores.find(m.detector_id);
    if (it == scores.end()) throw ValidationError("missing score for ensemble member '" + m.detector_id + "'");
    total += m.weight * it->second.value;
  }
  return std::clamp(total, 0.0, 1.0);
}

class DetectorRegistry {
 public:
  void add(DetectorPtr d, bool held_out = false) {
    const auto id = d->id();
    detectors_[id] = std::move(d);
    if (held_out) {
      held_out_.insert(id);
    } else {
      held_out_.erase(id);
    }
  }

  bool contains(const std::string& id) const { return detectors_.count(id) != 0; }
  bool is_held_out(const std::string& id) const { return held_out_.count(id) != 0; }
  const std::set<std::string>& held_out_ids() const noexcept { return held_out_; }

  const Detector& get(const std::string& id) const {
    auto it = detectors_.find(id);
    if (it == detectors_.end()) throw RegistryError("unknown detector '" + id + "'");
    return *it->second;
  }

  // Ids in deterministic order.
  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, d] : detectors_) out.push_back(id);
    return out;
  }

  void validate(const EnsembleConfig& cfg) const {
    cfg.validate();
    for (const auto& m : cfg.members) {
      if (!contains(m.detector_id)) throw RegistryError("ensemble member '" + m.detector_id + "' is not registered");
      if (is_held_out(m.detector_id))
        throw RegistryError("ensemble member '" + m.detector_id + "' is held out and may not be queried in training");
    }
  }

  std::map<std::string, DetectorScore> score_members(const EnsembleConfig& cfg, std::string_view text) const {
    validate(cfg);
    std::map<std::string, DetectorScore> out;
    for (const auto& m : cfg.canonical()) out.emplace(m.detector_id, get(m.detector_id).score(text));
    return out;
  }

  double score_ensemble(const EnsembleConfig& cfg, std::string_view text) const {
    return ensemble_score(cfg, score_members(cfg, text));
  }

 private:
  std::map<std::string, DetectorPtr> detectors_;
  std::set<std::string> held_out_;
};

}  // namespace evade
