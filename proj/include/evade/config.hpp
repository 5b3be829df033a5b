#pragma once

// Declarative run configuration. Key names follow the hyperparameter table
// of the original protocol so a config file can be checked against it line by
// line; relative paths resolve against the config file's directory.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evade/attack.hpp"
#include "evade/corpus.hpp"
#include "evade/detect.hpp"
#include "evade/error.hpp"
#include "evade/grpo.hpp"
#include "evade/hash.hpp"
#include "evade/reward.hpp"
#include "evade/transport.hpp"

namespace evade {

struct RemoteEndpoint {
  std::string url;
  std::string auth_env;
  TransportLimits limits;

  static RemoteEndpoint from_json(const nlohmann::json& j) {
    RemoteEndpoint e;
    e.url = j.at("url").get<std::string>();
    e.auth_env = j.value("auth_env", std::string{});
    e.limits.timeout_seconds = j.value("timeout_seconds", e.limits.timeout_seconds);
    e.limits.max_inflight = j.value("max_inflight", e.limits.max_inflight);
    e.limits.retries = j.value("retries", e.limits.retries);
    e.limits.backoff_initial_seconds = j.value("backoff_initial_seconds", e.limits.backoff_initial_seconds);
    e.limits.backoff_max_seconds = j.value("backoff_max_seconds", e.limits.backoff_max_seconds);
    return e;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["url"] = url;
    j["auth_env"] = auth_env;
    j["timeout_seconds"] = limits.timeout_seconds;
    j["max_inflight"] = limits.max_inflight;
    j["retries"] = limits.retries;
    j["backoff_initial_seconds"] = limits.backoff_initial_seconds;
    j["backoff_max_seconds"] = limits.backoff_max_seconds;
    return j;
  }
};

struct RemoteDetectorConfig {
  std::string id;
  RemoteEndpoint endpoint;
  bool held_out = false;
};

struct RunConfig {
  std::filesystem::path base_dir = ".";
  std::uint64_t seed = 42;

  // corpus
  std::filesystem::path corpus_path;
  std::filesystem::path detector_corpus_path;
  FieldMap fields;
  std::size_t token_min = 100;
  std::size_t token_max = 500;
  SplitSpec split;

  // detectors
  ClassifierHyper classifier;
  LmHyper surprisal{3, 5, 0.1, 1.0};
  LmHyper paired_lm{2, 4, 0.1, 1.0};
  double reference_fraction = 0.6;  // human share of the detector corpus used as LM reference text
  std::vector<std::string> held_out{"paired_lm"};
  std::vector<RemoteDetectorConfig> remote_detectors;
  EnsembleConfig ensemble{{{"classifier", 0.6}, {"surprisal", 0.4}}};
  EnsembleConfig m4_ensemble{{{"classifier", 1.0}}};

  // attacks
  std::size_t candidates_k = 8;
  double homoglyph_rate = 0.1;
  std::filesystem::path homoglyph_table;
  std::filesystem::path rules_file;
  DecodingParams decoding;
  std::optional<RemoteEndpoint> paraphraser;

  // reward
  RewardWeights reward;
  double similarity_threshold = 0.7;
  std::vector<int> embedder_orders{3, 4, 5};
  std::uint32_t embedder_dimension = 1u << 16;
  std::optional<RemoteEndpoint> embedder;

  // trainer
  TrainerConfig trainer;
  double lora_learning_rate = 2.8e-4;  // full-scale value, recorded only

  // metrics
  double target_fpr = 0.01;
  std::size_t bootstrap_iterations = 500;
  std::uint64_t bootstrap_seed = 42;
  std::size_t histogram_bins = 20;
  std::size_t workers = 1;

  // judge
  std::size_t judge_subset = 200;
  std::size_t judge_concurrency = 4;
  double judge_temperature = 0.0;
  int judge_reasks = 1;
  std::optional<RemoteEndpoint> judge;

  std::filesystem::path output_dir = "runs/default";

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    if (p.empty() || p.is_absolute()) return p;
    return base_dir / p;
  }

  RuleSet rules() const { return rules_file.empty() ? RuleSet::defaults() : RuleSet::from_file(resolve(rules_file)); }

  HomoglyphTable homoglyphs() const {
    return homoglyph_table.empty() ? HomoglyphTable::defaults(homoglyph_rate)
                                   : HomoglyphTable::from_file(resolve(homoglyph_table), homoglyph_rate);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    auto& c = j["corpus"];
    c["path"] = corpus_path.string();
    c["detector_path"] = detector_corpus_path.string();
    c["fields"] = {{"id", fields.id}, {"label", fields.label}, {"text", fields.text}, {"source", fields.source}};
    c["token_min"] = token_min;
    c["token_max"] = token_max;
    j["split"] = {{"train_ai", split.train_ai}, {"eval_human", split.eval_human}, {"eval_ai", split.eval_ai}};

    auto& d = j["detectors"];
    d["classifier"] = classifier.to_json();
    d["surprisal"] = surprisal.to_json();
    d["paired_lm"] = paired_lm.to_json();
    d["reference_fraction"] = reference_fraction;
    d["held_out"] = held_out;
    d["remote"] = nlohmann::ordered_json::array();
    for (const auto& r : remote_detectors) {
      auto e = r.endpoint.to_json();
      e["id"] = r.id;
      e["held_out"] = r.held_out;
      d["remote"].push_back(e);
    }
    j["ensemble"] = ensemble.to_json();
    j["m4_ensemble"] = m4_ensemble.to_json();

    auto& a = j["attacks"];
    a["candidates_k"] = candidates_k;
    a["homoglyph_rate"] = homoglyph_rate;
    a["homoglyph_table"] = homoglyph_table.string();
    a["rules_file"] = rules_file.string();
    a["temperature"] = decoding.temperature;
    a["top_p"] = decoding.top_p;
    a["max_tokens"] = decoding.max_tokens;
    a["paraphraser"] = paraphraser ? nlohmann::ordered_json(paraphraser->to_json()) : nlohmann::ordered_json(nullptr);

    auto& r = j["reward"];
    r["alpha"] = reward.alpha;
    r["beta"] = reward.beta;
    r["similarity_threshold"] = similarity_threshold;
    r["embedder"] = {{"orders", embedder_orders}, {"dimension", embedder_dimension}};
    r["embedder"]["remote"] = embedder ? nlohmann::ordered_json(embedder->to_json()) : nlohmann::ordered_json(nullptr);

    j["trainer"] = trainer.to_json();
    j["trainer"].erase("seed");  // derived from the root seed at run time
    j["trainer"]["lora_learning_rate"] = lora_learning_rate;

    j["metrics"] = {{"target_fpr", target_fpr},
                    {"bootstrap_iterations", bootstrap_iterations},
                    {"bootstrap_seed", bootstrap_seed},
                    {"histogram_bins", histogram_bins},
                    {"workers", workers}};
    auto& jd = j["judge"];
    jd["subset"] = judge_subset;
    jd["concurrency"] = judge_concurrency;
    jd["temperature"] = judge_temperature;
    jd["reasks"] = judge_reasks;
    jd["remote"] = judge ? nlohmann::ordered_json(judge->to_json()) : nlohmann::ordered_json(nullptr);
    j["output_dir"] = output_dir.string();
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j, std::filesystem::path base_dir = ".") {
    RunConfig cfg;
    cfg.base_dir = std::move(base_dir);
    try {
      cfg.seed = j.value("seed", cfg.seed);
      if (auto c = j.find("corpus"); c != j.end()) {
        cfg.corpus_path = c->value("path", std::string{});
        cfg.detector_corpus_path = c->value("detector_path", std::string{});
        if (auto f = c->find("fields"); f != c->end()) {
          cfg.fields.id = f->value("id", cfg.fields.id);
          cfg.fields.label = f->value("label", cfg.fields.label);
          cfg.fields.text = f->value("text", cfg.fields.text);
          cfg.fields.source = f->value("source", cfg.fields.source);
        }
        cfg.token_min = c->value("token_min", cfg.token_min);
        cfg.token_max = c->value("token_max", cfg.token_max);
      }
      if (auto s = j.find("split"); s != j.end()) {
        cfg.split.train_ai = s->value("train_ai", cfg.split.train_ai);
        cfg.split.eval_human = s->value("eval_human", cfg.split.eval_human);
        cfg.split.eval_ai = s->value("eval_ai", cfg.split.eval_ai);
      }
      if (auto d = j.find("detectors"); d != j.end()) {
        if (d->contains("classifier")) cfg.classifier = ClassifierHyper::from_json(d->at("classifier"));
        if (d->contains("surprisal")) cfg.surprisal = LmHyper::from_json(d->at("surprisal"));
        if (d->contains("paired_lm")) cfg.paired_lm = LmHyper::from_json(d->at("paired_lm"));
        cfg.reference_fraction = d->value("reference_fraction", cfg.reference_fraction);
        cfg.held_out = d->value("held_out", cfg.held_out);
        if (auto r = d->find("remote"); r != d->end()) {
          for (const auto& e : *r)
            cfg.remote_detectors.push_back(
                {e.at("id").get<std::string>(), RemoteEndpoint::from_json(e), e.value("held_out", false)});
        }
      }
      if (j.contains("ensemble")) cfg.ensemble = EnsembleConfig::from_json(j.at("ensemble"));
      if (j.contains("m4_ensemble")) cfg.m4_ensemble = EnsembleConfig::from_json(j.at("m4_ensemble"));
      if (auto a = j.find("attacks"); a != j.end()) {
        cfg.candidates_k = a->value("candidates_k", cfg.candidates_k);
        cfg.homoglyph_rate = a->value("homoglyph_rate", cfg.homoglyph_rate);
        cfg.homoglyph_table = a->value("homoglyph_table", std::string{});
        cfg.rules_file = a->value("rules_file", std::string{});
        cfg.decoding.temperature = a->value("temperature", cfg.decoding.temperature);
        cfg.decoding.top_p = a->value("top_p", cfg.decoding.top_p);
        cfg.decoding.max_tokens = a->value("max_tokens", cfg.decoding.max_tokens);
        if (auto p = a->find("paraphraser"); p != a->end() && !p->is_null()) cfg.paraphraser = RemoteEndpoint::from_json(*p);
      }
      if (auto r = j.find("reward"); r != j.end()) {
        cfg.reward.alpha = r->value("alpha", cfg.reward.alpha);
        cfg.reward.beta = r->value("beta", cfg.reward.beta);
        cfg.similarity_threshold = r->value("similarity_threshold", cfg.similarity_threshold);
        if (auto e = r->find("embedder"); e != r->end()) {
          cfg.embedder_orders = e->value("orders", cfg.embedder_orders);
          cfg.embedder_dimension = e->value("dimension", cfg.embedder_dimension);
          if (auto rem = e->find("remote"); rem != e->end() && !rem->is_null()) cfg.embedder = RemoteEndpoint::from_json(*rem);
        }
      }
      if (auto t = j.find("trainer"); t != j.end()) {
        cfg.trainer = TrainerConfig::from_json(*t);
        cfg.lora_learning_rate = t->value("lora_learning_rate", cfg.lora_learning_rate);
      }
      if (auto m = j.find("metrics"); m != j.end()) {
        cfg.target_fpr = m->value("target_fpr", cfg.target_fpr);
        cfg.bootstrap_iterations = m->value("bootstrap_iterations", cfg.bootstrap_iterations);
        cfg.bootstrap_seed = m->value("bootstrap_seed", cfg.bootstrap_seed);
        cfg.histogram_bins = m->value("histogram_bins", cfg.histogram_bins);
        cfg.workers = m->value("workers", cfg.workers);
      }
      if (auto jd = j.find("judge"); jd != j.end()) {
        cfg.judge_subset = jd->value("subset", cfg.judge_subset);
        cfg.judge_concurrency = jd->value("concurrency", cfg.judge_concurrency);
        cfg.judge_temperature = jd->value("temperature", cfg.judge_temperature);
        cfg.judge_reasks = jd->value("reasks", cfg.judge_reasks);
        if (auto rem = jd->find("remote"); rem != jd->end() && !rem->is_null()) cfg.judge = RemoteEndpoint::from_json(*rem);
      }
      cfg.output_dir = j.value("output_dir", cfg.output_dir.string());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
  }

  // Content hash of the effective configuration (paths as written).
  std::string hash() const { return sha256_hex(to_json().dump()); }

  bool is_held_out(const std::string& id) const {
    if (std::find(held_out.begin(), held_out.end(), id) != held_out.end()) return true;
    for (const auto& r : remote_detectors)
      if (r.id == id && r.held_out) return true;
    return false;
  }

  // Whole-config validation; collects every problem into one error.
  void validate(bool require_corpora = true) const {
    std::vector<std::string> problems;
    auto check = [&](bool ok, const std::string& msg) {
      if (!ok) problems.push_back(msg);
    };
    if (require_corpora) {
      check(!corpus_path.empty() && std::filesystem::exists(resolve(corpus_path)),
            "corpus.path does not exist: " + resolve(corpus_path).string());
      check(!detector_corpus_path.empty() && std::filesystem::exists(resolve(detector_corpus_path)),
            "corpus.detector_path does not exist: " + resolve(detector_corpus_path).string());
    }
    check(token_min >= 1 && token_max >= token_min, "corpus token window must satisfy 1 <= token_min <= token_max");
    check(reference_fraction > 0.0 && reference_fraction < 1.0, "detectors.reference_fraction must lie in (0,1)");
    check(paired_lm.order < paired_lm.order_large, "detectors.paired_lm.order must be < order_large");
    for (const auto* e : {&ensemble, &m4_ensemble}) {
      try {
        e->validate();
      } catch (const Error& err) {
        problems.push_back(err.what());
      }
      for (const auto& m : e->members) {
        check(!is_held_out(m.detector_id), "held-out detector '" + m.detector_id + "' named in a training ensemble");
        const bool known = m.detector_id == "classifier" || m.detector_id == "surprisal" || m.detector_id == "paired_lm" ||
                           std::any_of(remote_detectors.begin(), remote_detectors.end(),
                                       [&](const auto& r) { return r.id == m.detector_id; });
        check(known, "ensemble member '" + m.detector_id + "' is not a configured detector");
      }
    }
    check(candidates_k >= 1, "attacks.candidates_k must be >= 1");
    check(homoglyph_rate >= 0.0 && homoglyph_rate <= 1.0, "attacks.homoglyph_rate must lie in [0,1]");
    check(decoding.temperature > 0.0 && decoding.top_p > 0.0 && decoding.top_p <= 1.0 && decoding.max_tokens > 0,
          "attacks decoding parameters out of range");
    check(reward.alpha >= 0.0 && reward.beta >= 0.0, "reward weights must be >= 0");
    check(embedder_dimension != 0 && (embedder_dimension & (embedder_dimension - 1)) == 0,
          "reward.embedder.dimension must be a power of two");
    try {
      trainer.validate();
    } catch (const Error& err) {
      problems.push_back(err.what());
    }
    check(target_fpr > 0.0 && target_fpr < 1.0, "metrics.target_fpr must lie in (0,1)");
    check(bootstrap_iterations >= 1, "metrics.bootstrap_iterations must be >= 1");
    check(histogram_bins >= 1, "metrics.histogram_bins must be >= 1");
    check(judge_subset >= 1, "judge.subset must be >= 1");
    if (!homoglyph_table.empty()) check(std::filesystem::exists(resolve(homoglyph_table)), "attacks.homoglyph_table not found");
    if (!rules_file.empty()) check(std::filesystem::exists(resolve(rules_file)), "attacks.rules_file not found");
    if (!problems.empty()) {
      std::string msg = "invalid configuration:";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ValidationError(msg);
    }
  }
};

}  // namespace evade
