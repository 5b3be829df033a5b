#pragma once

// Group-relative policy optimization over the rewrite policy.
//
// The policy is a softmax over {keep, apply} per rule class, shared by every
// site of that class, so the log-probability of a sampled rewrite is a sum
// over sites and its gradient is available in closed form:
//
//   d log pi(trace) / d theta[c][j] = n[c][j] - N[c] * p_c(j)
//
// with n[c][j] the number of class-c sites that chose j and N[c] the number
// of class-c sites. The update maximizes
//
//   J = mean_i min(r_i A_i, clip(r_i, 1 - eps, 1 + eps) A_i) - lambda * mean_i k3_i
//   r_i  = exp(logp_theta(i) - logp_old(i))
//   k3_i = exp(logp_ref(i) - logp_theta(i)) - (logp_ref(i) - logp_theta(i)) - 1
//
// with one plain gradient-ascent step per batch.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evade/attack.hpp"
#include "evade/corpus.hpp"
#include "evade/error.hpp"
#include "evade/hash.hpp"
#include "evade/parallel.hpp"
#include "evade/reward.hpp"
#include "evade/rng.hpp"
#include "evade/rules.hpp"

namespace evade {

inline constexpr std::size_t kPolicyParams = kRuleClassCount * kChoicesPerSite;

using ActionCounts = std::array<std::array<std::uint32_t, kChoicesPerSite>, kRuleClassCount>;

class RewritePolicy {
 public:
  RewritePolicy() : RewritePolicy(RuleSet::defaults()) {}
  explicit RewritePolicy(RuleSet rules) : rules_(std::move(rules)), theta_(kPolicyParams, 0.0) {}
  RewritePolicy(RuleSet rules, std::vector<double> theta) : rules_(std::move(rules)), theta_(std::move(theta)) {
    if (theta_.size() != kPolicyParams) throw ValidationError("policy parameter vector has the wrong size");
  }

  const RuleSet& rules() const noexcept { return rules_; }
  const std::vector<double>& theta() const noexcept { return theta_; }
  std::vector<double>& theta() noexcept { return theta_; }

  static std::size_t index(RuleClass c, std::size_t choice) {
    return static_cast<std::size_t>(c) * kChoicesPerSite + choice;
  }

  ChoiceProbs probs(RuleClass c) const { return probs_for(theta_, c); }

  static ChoiceProbs probs_for(const std::vector<double>& theta, RuleClass c) {
    const auto base = index(c, 0);
    double m = theta[base];
    for (std::size_t j = 1; j < kChoicesPerSite; ++j) m = std::max(m, theta[base + j]);
    ChoiceProbs p{};
    double z = 0.0;
    for (std::size_t j = 0; j < kChoicesPerSite; ++j) {
      p[j] = std::exp(theta[base + j] - m);
      z += p[j];
    }
    for (auto& v : p) v /= z;
    return p;
  }

  static double log_prob(const std::vector<double>& theta, const ActionCounts& n) {
    double lp = 0.0;
    for (std::size_t c = 0; c < kRuleClassCount; ++c) {
      std::uint32_t total = 0;
      for (auto k : n[c]) total += k;
      if (total == 0) continue;
      const auto base = c * kChoicesPerSite;
      double m = theta[base];
      for (std::size_t j = 1; j < kChoicesPerSite; ++j) m = std::max(m, theta[base + j]);
      double z = 0.0;
      for (std::size_t j = 0; j < kChoicesPerSite; ++j) z += std::exp(theta[base + j] - m);
      const double log_z = m + std::log(z);
      for (std::size_t j = 0; j < kChoicesPerSite; ++j) lp += n[c][j] * (theta[base + j] - log_z);
    }
    return lp;
  }

  double log_prob(const ActionCounts& n) const { return log_prob(theta_, n); }

  // Adds scale * d log pi / d theta into grad.
  static void accumulate_grad_log_prob(const std::vector<double>& theta, const ActionCounts& n, double scale,
                                       std::vector<double>& grad) {
    if (scale == 0.0) return;
    for (std::size_t c = 0; c < kRuleClassCount; ++c) {
      std::uint32_t total = 0;
      for (auto k : n[c]) total += k;
      if (total == 0) continue;
      const auto p = probs_for(theta, static_cast<RuleClass>(c));
      for (std::size_t j = 0; j < kChoicesPerSite; ++j)
        grad[c * kChoicesPerSite + j] += scale * (static_cast<double>(n[c][j]) - total * p[j]);
    }
  }

  std::string hash() const {
    std::ostringstream ss;
    ss.precision(17);
    for (double t : theta_) ss << t << ',';
    return sha256_hex(rules_.hash() + ss.str());
  }

 private:
  RuleSet rules_;
  std::vector<double> theta_;
};

inline ActionCounts count_actions(const RewriteSpace& space, const std::vector<std::uint8_t>& trace) {
  ActionCounts n{};
  for (std::size_t i = 0; i < trace.size(); ++i) ++n[static_cast<std::size_t>(space.sites()[i].cls)][trace[i]];
  return n;
}

struct TrainerConfig {
  std::size_t group_size = 8;
  std::size_t batch_size = 16;
  std::size_t epochs = 3;
  double learning_rate = 1e-2;
  double kl_coefficient = 0.05;
  double clip_epsilon = 0.2;
  double advantage_epsilon = 1e-8;
  std::uint64_t seed = 42;
  std::size_t max_updates = 0;  // 0 = run every epoch to completion
  int reward_retries = 1;
  std::size_t workers = 1;

  void validate() const {
    if (group_size < 2) throw ValidationError("group_size must be >= 2");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(learning_rate > 0) || !(kl_coefficient > 0) || !(clip_epsilon > 0) || !(advantage_epsilon > 0))
      throw ValidationError("trainer rates must be > 0");
    if (reward_retries < 0) throw ValidationError("reward_retries must be >= 0");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["group_size"] = group_size;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["learning_rate"] = learning_rate;
    j["kl_coefficient"] = kl_coefficient;
    j["clip_epsilon"] = clip_epsilon;
    j["advantage_epsilon"] = advantage_epsilon;
    j["seed"] = seed;
    j["max_updates"] = max_updates;
    j["reward_retries"] = reward_retries;
    j["workers"] = workers;
    return j;
  }

  static TrainerConfig from_json(const nlohmann::json& j) {
    TrainerConfig c;
    c.group_size = j.value("group_size", c.group_size);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.kl_coefficient = j.value("kl_coefficient", c.kl_coefficient);
    c.clip_epsilon = j.value("clip_epsilon", c.clip_epsilon);
    c.advantage_epsilon = j.value("advantage_epsilon", c.advantage_epsilon);
    c.seed = j.value("seed", c.seed);
    c.max_updates = j.value("max_updates", c.max_updates);
    c.reward_retries = j.value("reward_retries", c.reward_retries);
    c.workers = j.value("workers", c.workers);
    return c;
  }
};

struct Candidate {
  std::string text;
  std::vector<std::uint8_t> trace;
  ActionCounts counts{};
  double logprob_policy = 0.0;  // at sampling time; doubles as the old-policy log-prob
  double logprob_ref = 0.0;
  std::optional<RewardBreakdown> reward;
  double advantage = 0.0;
};

struct GroupRollout {
  std::string input_id;
  std::string source;
  std::vector<Candidate> candidates;
  bool degenerate = false;  // no rewrite sites: every candidate equals the source

  std::size_t group_size() const noexcept { return candidates.size(); }
};

inline GroupRollout sample_group(const RewritePolicy& policy, const RewritePolicy& reference, const TextSample& x,
                                 std::size_t group_size, std::uint64_t seed) {
  if (group_size < 2) throw PreconditionError("group size must be >= 2");
  RewriteSpace space(policy.rules(), x.text);
  GroupRollout g;
  g.input_id = x.id;
  g.source = x.text;
  g.degenerate = space.empty();
  g.candidates.reserve(group_size);
  auto probs = [&](RuleClass c) { return policy.probs(c); };
  for (std::size_t i = 0; i < group_size; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    Candidate c;
    c.trace = sample_trace(space, probs, rng);
    c.text = space.render(c.trace);
    c.counts = count_actions(space, c.trace);
    c.logprob_policy = policy.log_prob(c.counts);
    c.logprob_ref = reference.log_prob(c.counts);
    g.candidates.push_back(std::move(c));
  }
  return g;
}

inline std::vector<double> normalize_advantages(const std::vector<double>& rewards, double epsilon = 1e-8) {
  if (rewards.size() < 2) throw PreconditionError("advantage normalization needs at least two rewards");
  const auto n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd <= epsilon) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std::max(sd, epsilon);
  return out;
}

// Scores every candidate and fills group-normalized advantages. A transport
// error aborts the group; the whole group is re-evaluated up to `retries`
// more times.
inline void fill_rewards(GroupRollout& group, const RewardModel& reward, int retries = 0, std::size_t workers = 1,
                         double epsilon = 1e-8) {
  reward.registry().validate(reward.ensemble());
  const auto source_embedding = reward.embedder().embed(group.source);
  for (int attempt = 0;; ++attempt) {
    try {
      std::vector<RewardBreakdown> out(group.candidates.size());
      parallel_for(group.candidates.size(), workers,
                   [&](std::size_t i) { out[i] = reward.evaluate(source_embedding, group.candidates[i].text); });
      std::vector<double> totals;
      for (std::size_t i = 0; i < out.size(); ++i) {
        group.candidates[i].reward = out[i];
        totals.push_back(out[i].total);
      }
      const auto adv = normalize_advantages(totals, epsilon);
      for (std::size_t i = 0; i < adv.size(); ++i) group.candidates[i].advantage = adv[i];
      return;
    } catch (const TransportError&) {
      if (attempt >= retries) throw;
    }
  }
}

struct UpdateDiagnostics {
  double mean_reward = 0.0;
  double kl_estimate = 0.0;
  double grad_norm = 0.0;
  double clip_fraction = 0.0;
  double mean_r_det = 0.0;
  double mean_r_sem = 0.0;
};

struct ObjectiveTerms {
  double value = 0.0;
  std::vector<double> grad;
  double kl = 0.0;
  double clip_fraction = 0.0;
};

// Clipped surrogate minus the k3 KL penalty, and its analytic gradient,
// averaged over every candidate in the batch.
inline ObjectiveTerms grpo_objective(const std::vector<double>& theta, const std::vector<GroupRollout>& batch,
                                     double clip_epsilon, double kl_coefficient) {
  ObjectiveTerms t;
  t.grad.assign(theta.size(), 0.0);
  std::size_t n = 0, clipped = 0;
  double surrogate = 0.0;
  for (const auto& g : batch) {
    for (const auto& c : g.candidates) {
      ++n;
      const double lp = RewritePolicy::log_prob(theta, c.counts);
      const double ratio = std::exp(lp - c.logprob_policy);
      const double a = c.advantage;
      const double clipped_ratio = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
      const double unclipped_term = ratio * a;
      const double clipped_term = clipped_ratio * a;
      double coef = 0.0;
      if (unclipped_term <= clipped_term) {
        surrogate += unclipped_term;
        coef = a * ratio;
      } else {
        surrogate += clipped_term;
        ++clipped;
      }
      const double d = c.logprob_ref - lp;
      const double ed = std::exp(d);
      t.kl += ed - d - 1.0;
      coef -= kl_coefficient * (1.0 - ed);
      RewritePolicy::accumulate_grad_log_prob(theta, c.counts, coef, t.grad);
    }
  }
  if (n == 0) return t;
  const auto dn = static_cast<double>(n);
  for (auto& v : t.grad) v /= dn;
  t.kl /= dn;
  t.value = surrogate / dn - kl_coefficient * t.kl;
  t.clip_fraction = static_cast<double>(clipped) / dn;
  return t;
}

inline UpdateDiagnostics policy_update(RewritePolicy& policy, const std::vector<GroupRollout>& batch,
                                       const TrainerConfig& cfg) {
  UpdateDiagnostics d;
  std::size_t n = 0;
  for (const auto& g : batch) {
    for (const auto& c : g.candidates) {
      if (!c.reward) throw PreconditionError("policy_update called before rewards were filled");
      d.mean_reward += c.reward->total;
      d.mean_r_det += c.reward->r_det;
      d.mean_r_sem += c.reward->r_sem;
      ++n;
    }
  }
  if (n == 0) return d;
  d.mean_reward /= static_cast<double>(n);
  d.mean_r_det /= static_cast<double>(n);
  d.mean_r_sem /= static_cast<double>(n);

  auto terms = grpo_objective(policy.theta(), batch, cfg.clip_epsilon, cfg.kl_coefficient);
  double sq = 0.0;
  for (double g : terms.grad) sq += g * g;
  d.grad_norm = std::sqrt(sq);
  d.kl_estimate = terms.kl;
  d.clip_fraction = terms.clip_fraction;
  if (!std::isfinite(d.grad_norm)) {
    std::ostringstream ss;
    ss << "non-finite policy gradient; theta=[";
    for (double v : policy.theta()) ss << v << ' ';
    ss << "] grad=[";
    for (double v : terms.grad) ss << v << ' ';
    ss << "] kl=" << terms.kl;
    throw NumericError(ss.str());
  }
  for (std::size_t i = 0; i < terms.grad.size(); ++i) policy.theta()[i] += cfg.learning_rate * terms.grad[i];
  return d;
}

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  UpdateDiagnostics diag;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["epoch"] = epoch;
    j["mean_reward"] = diag.mean_reward;
    j["kl_estimate"] = diag.kl_estimate;
    j["grad_norm"] = diag.grad_norm;
    j["clip_fraction"] = diag.clip_fraction;
    j["mean_r_det"] = diag.mean_r_det;
    j["mean_r_sem"] = diag.mean_r_sem;
    return j;
  }
};

struct TrainResult {
  RewritePolicy policy;
  std::size_t steps_completed = 0;
  std::vector<StepLog> log;
};

inline std::uint64_t step_seed(std::uint64_t seed, std::size_t step, std::size_t slot) {
  return derive_seed(derive_seed(derive_seed(seed, "trainer/step"), static_cast<std::uint64_t>(step)),
                     static_cast<std::uint64_t>(slot));
}

// Runs the training loop from `start` (a policy at update `start_step`). All
// randomness is a function of (cfg.seed, epoch, step), so resuming from a
// snapshot replays the same batches.
inline TrainResult train(const Corpus& train_corpus, const RewardModel& reward, const TrainerConfig& cfg,
                         const RewritePolicy& reference, RewritePolicy start, std::size_t start_step = 0,
                         const std::function<void(const StepLog&, const RewritePolicy&)>& on_step = {}) {
  cfg.validate();
  if (train_corpus.count(Label::human) != 0) throw ValidationError("training corpus must contain AI-labeled text only");
  TrainResult result{std::move(start), start_step, {}};
  if (train_corpus.empty()) return result;
  std::size_t step = 0;
  std::vector<std::size_t> order(train_corpus.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(cfg.seed, "trainer/epoch"), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++step) {
      if (cfg.max_updates && step >= cfg.max_updates) return result;
      if (step < start_step) continue;
      const auto end = std::min(order.size(), b + cfg.batch_size);
      std::vector<GroupRollout> batch;
      batch.reserve(end - b);
      for (std::size_t k = b; k < end; ++k) {
        batch.push_back(sample_group(result.policy, reference, train_corpus[order[k]], cfg.group_size,
                                     step_seed(cfg.seed, step, k - b)));
        fill_rewards(batch.back(), reward, cfg.reward_retries, cfg.workers, cfg.advantage_epsilon);
      }
      StepLog log{step, epoch, policy_update(result.policy, batch, cfg)};
      if (on_step) on_step(log, result.policy);
      result.log.push_back(log);
      result.steps_completed = step + 1;
    }
  }
  return result;
}

// M2/M4 inference: one sampled rewrite, with the same draw pattern as
// rule_paraphrase(text, rules, seed, 1).
inline AttackOutput policy_attack(const TextSample& sample, const RewritePolicy& policy, std::uint64_t seed,
                                  Method method = Method::M2) {
  RewriteSpace space(policy.rules(), sample.text);
  Rng rng(derive_seed(seed, std::uint64_t{0}));
  auto trace = sample_rewrite_trace(space, [&](RuleClass c) { return policy.probs(c); }, rng);
  auto text = space.render(trace);
  const auto applied = static_cast<std::size_t>(std::count(trace.begin(), trace.end(), std::uint8_t{1}));
  return {sample.id, method, std::move(text), 1,
          {{"sites", space.size()}, {"applied", applied}, {"no_sites", space.empty()}, {"query_count", 0}}};
}

// ---------------------------------------------------------------------------
// Snapshots.

inline constexpr int kPolicySnapshotVersion = 1;

struct PolicySnapshot {
  RewritePolicy policy;
  RewritePolicy reference;
  std::size_t step = 0;
  std::string config_hash;
};

inline nlohmann::ordered_json policy_snapshot_json(const PolicySnapshot& s) {
  nlohmann::ordered_json j;
  j["format"] = "evade.policy";
  j["version"] = kPolicySnapshotVersion;
  j["rule_set_hash"] = s.policy.rules().hash();
  std::vector<std::string> params;
  for (std::size_t c = 0; c < kRuleClassCount; ++c)
    for (const char* choice : {"keep", "apply"})
      params.push_back(std::string(to_string(static_cast<RuleClass>(c))) + "/" + choice);
  j["parameters"] = params;
  j["theta"] = s.policy.theta();
  j["reference_theta"] = s.reference.theta();
  j["step"] = s.step;
  j["config_hash"] = s.config_hash;
  return j;
}

inline void save_policy(const PolicySnapshot& s, const std::filesystem::path& path) {
  write_file_atomic(path, policy_snapshot_json(s).dump(2) + "\n");
}

inline PolicySnapshot load_policy(const std::filesystem::path& path, const RuleSet& rules) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("malformed policy snapshot " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "evade.policy" || j.value("version", 0) != kPolicySnapshotVersion)
    throw ValidationError("not a supported policy snapshot: " + path.string());
  if (j.at("rule_set_hash").get<std::string>() != rules.hash())
    throw ValidationError("policy snapshot was trained with a different rule set");
  return {RewritePolicy(rules, j.at("theta").get<std::vector<double>>()),
          RewritePolicy(rules, j.at("reference_theta").get<std::vector<double>>()), j.at("step").get<std::size_t>(),
          j.value("config_hash", std::string{})};
}

}  // namespace evade
