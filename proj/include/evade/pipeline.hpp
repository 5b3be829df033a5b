#pragma once

// Command implementations behind the CLI. Each command reads the run config,
// checks the manifest for a cached result with the same input key, and
// otherwise recomputes and records its artifacts with content hashes.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evade/attack.hpp"
#include "evade/config.hpp"
#include "evade/corpus.hpp"
#include "evade/detect.hpp"
#include "evade/grpo.hpp"
#include "evade/hash.hpp"
#include "evade/judge.hpp"
#include "evade/metrics.hpp"
#include "evade/parallel.hpp"
#include "evade/reward.hpp"
#include "evade/transport.hpp"

namespace evade {

inline constexpr std::string_view kToolVersion = "0.1.0";

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Manifest

struct ArtifactRecord {
  std::string sha256;
  std::string written_at;
};

struct StepRecord {
  std::string input_key;
  std::vector<std::string> outputs;  // paths relative to the output directory
};

class RunManifest {
 public:
  std::string config_hash;
  std::string tool_version{kToolVersion};
  std::string created_at;
  std::string updated_at;
  std::map<std::string, ArtifactRecord> artifacts;
  std::map<std::string, StepRecord> steps;

  static RunManifest load_or_new(const std::filesystem::path& path) {
    RunManifest m;
    if (!std::filesystem::exists(path)) {
      m.created_at = utc_timestamp();
      return m;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    m.config_hash = j.value("config_hash", std::string{});
    m.tool_version = j.value("tool_version", std::string{kToolVersion});
    m.created_at = j.value("created_at", std::string{});
    m.updated_at = j.value("updated_at", std::string{});
    const auto artifacts = j.value("artifacts", nlohmann::json::object());
    const auto steps = j.value("steps", nlohmann::json::object());
    for (const auto& [k, v] : artifacts.items())
      m.artifacts[k] = {v.at("sha256").get<std::string>(), v.value("written_at", std::string{})};
    for (const auto& [k, v] : steps.items())
      m.steps[k] = {v.at("input_key").get<std::string>(), v.at("outputs").get<std::vector<std::string>>()};
    return m;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tool_version"] = tool_version;
    j["config_hash"] = config_hash;
    j["created_at"] = created_at;
    j["updated_at"] = updated_at;
    j["artifacts"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : artifacts) j["artifacts"][k] = {{"sha256", v.sha256}, {"written_at", v.written_at}};
    j["steps"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : steps) j["steps"][k] = {{"input_key", v.input_key}, {"outputs", v.outputs}};
    return j;
  }

  void save(const std::filesystem::path& path) {
    updated_at = utc_timestamp();
    write_file_atomic(path, to_json().dump(2) + "\n");
  }

  // Every listed artifact exists and matches its recorded hash.
  std::vector<std::string> verify(const std::filesystem::path& root) const {
    std::vector<std::string> bad;
    for (const auto& [rel, rec] : artifacts) {
      const auto p = root / rel;
      if (!std::filesystem::exists(p) || sha256_file(p) != rec.sha256) bad.push_back(rel);
    }
    return bad;
  }
};

// ---------------------------------------------------------------------------
// Persisted score sets. Everything the report needs, so `report` can rebuild
// metrics without touching detectors or texts.

struct ScoreBundle {
  std::vector<std::string> detectors;
  std::vector<std::string> methods;
  std::map<std::string, std::vector<double>> human;                       // detector -> scores
  std::map<std::string, std::map<std::string, std::vector<double>>> ai;  // detector -> method -> scores
  std::map<std::string, std::vector<double>> semantic;                    // method -> per-sample similarity
  std::map<std::string, bool> held_out;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["detectors"] = detectors;
    j["methods"] = methods;
    j["held_out"] = held_out;
    j["human"] = human;
    j["ai"] = ai;
    j["semantic"] = semantic;
    return j;
  }

  static ScoreBundle from_json(const nlohmann::json& j) {
    ScoreBundle b;
    b.detectors = j.at("detectors").get<std::vector<std::string>>();
    b.methods = j.at("methods").get<std::vector<std::string>>();
    b.held_out = j.at("held_out").get<std::map<std::string, bool>>();
    b.human = j.at("human").get<std::map<std::string, std::vector<double>>>();
    b.ai = j.at("ai").get<std::map<std::string, std::map<std::string, std::vector<double>>>>();
    b.semantic = j.at("semantic").get<std::map<std::string, std::vector<double>>>();
    return b;
  }

  ScoreSet score_set(const std::string& detector, const std::string& method) const {
    return {human.at(detector), ai.at(detector).at(method), detector, method};
  }
};

struct MetricsSettings {
  double target_fpr = 0.01;
  std::size_t bootstrap_iterations = 500;
  std::uint64_t bootstrap_seed = 42;
  std::size_t histogram_bins = 20;
  double similarity_threshold = 0.7;
  std::size_t workers = 1;
};

struct ReportFiles {
  std::string metrics_json;
  std::string metrics_csv;
  std::string plot_data_json;
};

inline std::string csv_number(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

// Pure function of the score bundle and settings.
inline ReportFiles build_report(const ScoreBundle& b, const MetricsSettings& m) {
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  std::string csv = "detector,method,held_out,n_human,n_ai,auroc,auroc_lo,auroc_hi,threshold,achieved_fpr,tpr,tpr_lo,"
                    "tpr_hi,asr,asr_lo,asr_hi\n";
  std::map<std::string, std::map<std::string, double>> tpr, asr, auc;
  for (const auto& d : b.detectors) {
    for (const auto& meth : b.methods) {
      const auto s = b.score_set(d, meth);
      s.validate();
      const auto op = operating_point(s, m.target_fpr);
      const auto ci_auc = bootstrap_ci(auroc_statistic(), s, m.bootstrap_iterations, m.bootstrap_seed, m.workers);
      const auto ci_tpr = bootstrap_ci(tpr_statistic(m.target_fpr), s, m.bootstrap_iterations, m.bootstrap_seed, m.workers);
      const auto ci_asr = bootstrap_ci(asr_statistic(m.target_fpr), s, m.bootstrap_iterations, m.bootstrap_seed, m.workers);
      tpr[meth][d] = op.tpr;
      asr[meth][d] = op.asr;
      auc[meth][d] = ci_auc.point;
      nlohmann::ordered_json c;
      c["detector"] = d;
      c["method"] = meth;
      c["held_out"] = b.held_out.count(d) ? b.held_out.at(d) : false;
      c["n_human"] = s.human_scores.size();
      c["n_ai"] = s.ai_scores.size();
      c["operating_point"] = op.to_json();
      c["auroc"] = ci_auc.to_json();
      c["tpr"] = ci_tpr.to_json();
      c["asr"] = ci_asr.to_json();
      c["histogram"] = score_histogram(s, m.histogram_bins, op.threshold).to_json();
      cells.push_back(c);
      csv += d + "," + meth + "," + (c["held_out"].get<bool>() ? "1" : "0") + "," +
             std::to_string(s.human_scores.size()) + "," + std::to_string(s.ai_scores.size()) + "," +
             csv_number(ci_auc.point) + "," + csv_number(ci_auc.lo) + "," + csv_number(ci_auc.hi) + "," +
             csv_number(op.threshold) + "," + csv_number(op.achieved_fpr) + "," + csv_number(ci_tpr.point) + "," +
             csv_number(ci_tpr.lo) + "," + csv_number(ci_tpr.hi) + "," + csv_number(ci_asr.point) + "," +
             csv_number(ci_asr.lo) + "," + csv_number(ci_asr.hi) + "\n";
    }
  }

  // Summary layout: per-method row, per-detector TPR, mean TPR and mean ASR.
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const auto& meth : b.methods) {
    nlohmann::ordered_json row;
    row["method"] = meth;
    double t = 0.0, a = 0.0, u = 0.0;
    for (const auto& d : b.detectors) {
      row["tpr"][d] = tpr[meth][d];
      t += tpr[meth][d];
      a += asr[meth][d];
      u += auc[meth][d];
    }
    const auto n = static_cast<double>(b.detectors.size());
    row["mean_tpr"] = t / n;
    row["mean_asr"] = a / n;
    row["mean_auroc"] = u / n;
    if (auto it = b.semantic.find(meth); it != b.semantic.end() && !it->second.empty()) {
      double sum = 0.0;
      std::size_t kept = 0;
      for (double v : it->second) {
        sum += v;
        if (v >= m.similarity_threshold) ++kept;
      }
      row["mean_semantic"] = sum / static_cast<double>(it->second.size());
      row["semantic_pass_rate"] = static_cast<double>(kept) / static_cast<double>(it->second.size());
    }
    table.push_back(row);
  }

  nlohmann::ordered_json metrics;
  metrics["target_fpr"] = m.target_fpr;
  metrics["bootstrap"] = {{"iterations", m.bootstrap_iterations}, {"seed", m.bootstrap_seed}};
  metrics["similarity_threshold"] = m.similarity_threshold;
  metrics["detectors"] = b.detectors;
  metrics["methods"] = b.methods;
  metrics["table"] = table;
  metrics["cells"] = cells;

  // Heatmap: rows are detectors, columns methods.
  nlohmann::ordered_json plot;
  plot["rows"] = b.detectors;
  plot["columns"] = b.methods;
  for (const char* metric : {"tpr", "asr", "auroc"}) {
    auto& src = std::string_view(metric) == "tpr" ? tpr : (std::string_view(metric) == "asr" ? asr : auc);
    nlohmann::ordered_json mat = nlohmann::ordered_json::array();
    for (const auto& d : b.detectors) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (const auto& meth : b.methods) row.push_back(src[meth][d]);
      mat.push_back(row);
    }
    plot["heatmap"][metric] = mat;
  }
  for (const auto& c : cells)
    plot["histograms"][c["detector"].get<std::string>()][c["method"].get<std::string>()] = c["histogram"];

  return {metrics.dump(2) + "\n", csv, plot.dump(2) + "\n"};
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
  bool offline = false;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::filesystem::path> out;
  std::ostream* log = &std::cerr;
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, PipelineOptions opt) : cfg_(std::move(cfg)), opt_(std::move(opt)) {
    if (opt_.seed_override) cfg_.seed = *opt_.seed_override;
    if (opt_.out) cfg_.output_dir = *opt_.out;
    cfg_.validate();
    out_ = opt_.out ? *opt_.out : cfg_.resolve(cfg_.output_dir);
    set_offline(opt_.offline);
    std::filesystem::create_directories(out_);
    manifest_ = RunManifest::load_or_new(manifest_path());
    manifest_.config_hash = cfg_.hash();
  }

  const RunConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& out_dir() const noexcept { return out_; }
  std::filesystem::path manifest_path() const { return out_ / "manifest.json"; }
  const RunManifest& manifest() const noexcept { return manifest_; }
  std::uint64_t substream(std::string_view name) const { return derive_seed(cfg_.seed, name); }

  // -- detectors ------------------------------------------------------------

  static constexpr std::array<std::string_view, 3> kLocalDetectors{"classifier", "surprisal", "paired_lm"};

  void build_detectors() {
    const auto corpus_file = cfg_.resolve(cfg_.detector_corpus_path);
    nlohmann::ordered_json key_src;
    key_src["corpus_sha256"] = sha256_file(corpus_file);
    key_src["fields"] = cfg_.to_json()["corpus"]["fields"];
    key_src["window"] = {cfg_.token_min, cfg_.token_max};
    key_src["detectors"] = cfg_.to_json()["detectors"];
    std::vector<std::string> outputs;
    for (auto id : kLocalDetectors) outputs.push_back("detectors/" + std::string(id) + ".json");
    if (cached("build-detectors", key_src, outputs)) return;

    const auto t0 = std::chrono::steady_clock::now();
    const auto corpus = load_window(corpus_file);
    const auto humans = corpus.only(Label::human);
    const auto n_ref = static_cast<std::size_t>(cfg_.reference_fraction * static_cast<double>(humans.size()));
    if (n_ref < 1 || n_ref >= humans.size())
      throw ValidationError("detector corpus has too few human samples for a reference/calibration split");
    std::vector<TextSample> ref, cal;
    for (std::size_t i = 0; i < humans.size(); ++i) (i < n_ref ? ref : cal).push_back(humans[i]);
    for (const auto& s : corpus.only(Label::ai)) cal.push_back(s);
    const Corpus reference(std::move(ref)), calibration(std::move(cal));

    std::vector<DetectorPtr> built(3);
    parallel_for(3, std::max<std::size_t>(cfg_.workers, 1), [&](std::size_t i) {
      if (i == 0) built[0] = build_classifier_detector(corpus, cfg_.classifier, "classifier");
      if (i == 1) built[1] = build_surprisal_detector(reference, calibration, cfg_.surprisal, "surprisal");
      if (i == 2) built[2] = build_paired_lm_detector(reference, calibration, cfg_.paired_lm, "paired_lm");
    });
    for (std::size_t i = 0; i < built.size(); ++i) save_detector(*built[i], out_ / outputs[i]);
    record("build-detectors", key_src, outputs);
    say("built 3 detectors in " + seconds_since(t0) + " s");
  }

  // Loads in-process snapshots and, when online, the configured remote detectors.
  DetectorRegistry registry() const {
    DetectorRegistry reg;
    for (auto id : kLocalDetectors) {
      const auto p = out_ / "detectors" / (std::string(id) + ".json");
      if (!std::filesystem::exists(p))
        throw ValidationError("detector snapshot missing: " + p.string() + " (run build-detectors first)");
      reg.add(load_detector(p), cfg_.is_held_out(std::string(id)));
    }
    for (const auto& r : cfg_.remote_detectors) {
      if (opt_.offline) {
        say("offline: skipping remote detector " + r.id);
        continue;
      }
      reg.add(remote_detector(r.id, r.endpoint.url, r.endpoint.limits, r.endpoint.auth_env), r.held_out);
    }
    return reg;
  }

  // -- split ----------------------------------------------------------------

  Split ensure_split() {
    const auto corpus_file = cfg_.resolve(cfg_.corpus_path);
    nlohmann::ordered_json key_src;
    key_src["corpus_sha256"] = sha256_file(corpus_file);
    key_src["fields"] = cfg_.to_json()["corpus"]["fields"];
    key_src["window"] = {cfg_.token_min, cfg_.token_max};
    key_src["split"] = cfg_.to_json()["split"];
    key_src["seed"] = substream("split");
    const std::vector<std::string> outputs{"splits/train.jsonl", "splits/eval.jsonl"};
    if (!cached("split", key_src, outputs, false)) {
      const auto corpus = load_window(corpus_file);
      auto s = split(corpus, cfg_.split, substream("split"));
      write_file_atomic(out_ / outputs[0], to_jsonl(s.train));
      write_file_atomic(out_ / outputs[1], to_jsonl(s.eval));
      record("split", key_src, outputs);
    }
    return {load_jsonl(out_ / outputs[0]), load_jsonl(out_ / outputs[1])};
  }

  // -- attacks --------------------------------------------------------------

  static std::string attack_path(Method m) { return std::string("attacks/") + to_string(m) + ".jsonl"; }
  static std::string failures_path(Method m) { return std::string("attacks/") + to_string(m) + ".failures.jsonl"; }
  static std::string policy_path(Method m) { return std::string("policy/") + to_string(m) + ".json"; }

  struct AttackSummary {
    std::size_t outputs = 0;
    std::size_t failures = 0;
    bool cache_hit = false;
  };

  AttackSummary attack(Method method) {
    const auto sp = ensure_split();
    const auto eval_ai = sp.eval.only(Label::ai);
    auto full = cfg_.to_json();
    nlohmann::ordered_json key_src;
    key_src["method"] = to_string(method);
    key_src["eval_sha256"] = artifact_hash("splits/eval.jsonl");
    key_src["attacks"] = full["attacks"];
    key_src["seed"] = cfg_.seed;
    key_src["offline"] = opt_.offline;
    if (method == Method::M3) {
      key_src["ensemble"] = full["ensemble"];
      key_src["detectors"] = detector_hashes();
    }
    if (method == Method::M2 || method == Method::M4) {
      if (!std::filesystem::exists(out_ / policy_path(method)))
        throw ValidationError(std::string("no trained policy for ") + to_string(method) + " (run train first)");
      key_src["policy_sha256"] = sha256_file(out_ / policy_path(method));
    }
    const std::vector<std::string> outputs{attack_path(method), failures_path(method)};
    if (cached(std::string("attack/") + to_string(method), key_src, outputs)) {
      return {count_lines(out_ / outputs[0]), count_lines(out_ / outputs[1]), true};
    }

    const auto t0 = std::chrono::steady_clock::now();
    std::function<AttackOutput(const TextSample&)> run;
    const auto rules = cfg_.rules();
    const auto paraphrase_seed = substream("attack/paraphrase");
    std::shared_ptr<ParaphraseClient> client;
    std::optional<DetectorRegistry> reg;
    std::optional<RewritePolicy> policy;
    std::optional<HomoglyphTable> table;
    switch (method) {
      case Method::M0:
        run = [](const TextSample& s) { return identity_attack(s); };
        break;
      case Method::M1:
        client = paraphraser(rules, paraphrase_seed);
        run = [&](const TextSample& s) { return external_paraphrase(s, *client, cfg_.decoding); };
        break;
      case Method::M3: {
        reg = registry();
        reg->validate(cfg_.ensemble);
        client = paraphraser(rules, paraphrase_seed);
        CandidateGenerator gen;
        if (dynamic_cast<OfflineParaphraser*>(client.get())) {
          gen = rule_candidate_generator(rules, paraphrase_seed);
        } else {
          gen = [&](const TextSample& s, std::size_t k) {
            std::vector<std::string> out;
            for (std::size_t i = 0; i < k; ++i) out.push_back(external_paraphrase(s, *client, cfg_.decoding).paraphrase);
            return out;
          };
        }
        run = [&, gen](const TextSample& s) {
          return candidate_selection_attack(s, gen, cfg_.candidates_k, cfg_.ensemble, *reg);
        };
        break;
      }
      case Method::M2:
      case Method::M4: {
        policy = load_policy(out_ / policy_path(method), rules).policy;
        const auto seed = substream(std::string("attack/") + to_string(method));
        run = [&, seed, method](const TextSample& s) { return policy_attack(s, *policy, text_seed(seed, s.text), method); };
        break;
      }
      case Method::M5: {
        table = cfg_.homoglyphs();
        const auto seed = substream("attack/M5");
        run = [&, seed](const TextSample& s) { return homoglyph_attack(s, *table, text_seed(seed, s.text)); };
        break;
      }
    }

    std::vector<std::optional<AttackOutput>> results(eval_ai.size());
    std::vector<std::string> reasons(eval_ai.size());
    parallel_for(eval_ai.size(), std::max<std::size_t>(cfg_.workers, 1), [&](std::size_t i) {
      try {
        results[i] = run(eval_ai[i]);
      } catch (const TransportError& e) {
        reasons[i] = std::string("transport: ") + e.what();
      } catch (const ProtocolError& e) {
        reasons[i] = std::string("protocol: ") + e.what();
      } catch (const PreconditionError& e) {
        reasons[i] = std::string("precondition: ") + e.what();
      }
    });
    std::string good, bad;
    AttackSummary summary;
    for (std::size_t i = 0; i < eval_ai.size(); ++i) {
      if (results[i]) {
        good += results[i]->to_json().dump() + "\n";
        ++summary.outputs;
      } else {
        bad += nlohmann::ordered_json{{"sample_id", eval_ai[i].id}, {"reason", reasons[i]}}.dump() + "\n";
        ++summary.failures;
      }
    }
    write_file_atomic(out_ / outputs[0], good);
    write_file_atomic(out_ / outputs[1], bad);
    record(std::string("attack/") + to_string(method), key_src, outputs);
    say(std::string(to_string(method)) + ": " + std::to_string(summary.outputs) + " outputs, " +
        std::to_string(summary.failures) + " failures in " + seconds_since(t0) + " s");
    return summary;
  }

  std::map<std::string, AttackOutput> load_attack(Method m) const {
    std::map<std::string, AttackOutput> out;
    const auto p = out_ / attack_path(m);
    if (!std::filesystem::exists(p)) return out;
    std::istringstream in(read_file(p));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto o = AttackOutput::from_json(nlohmann::json::parse(line));
      out.emplace(o.sample_id, std::move(o));
    }
    return out;
  }

  // -- training -------------------------------------------------------------

  struct TrainSummary {
    std::size_t steps = 0;
    std::size_t resumed_from = 0;
    bool cache_hit = false;
  };

  // `checkpoint_every` controls how often the snapshot and diagnostics are
  // written mid-run; a killed run resumes from the last checkpoint.
  TrainSummary train_policy(Method method, std::size_t checkpoint_every = 10) {
    if (method != Method::M2 && method != Method::M4) throw ValidationError("train accepts --method M2 or M4");
    const auto& ensemble = method == Method::M2 ? cfg_.ensemble : cfg_.m4_ensemble;
    const auto sp = ensure_split();
    auto full = cfg_.to_json();
    nlohmann::ordered_json key_src;
    key_src["method"] = to_string(method);
    key_src["train_sha256"] = artifact_hash("splits/train.jsonl");
    key_src["ensemble"] = ensemble.to_json();
    key_src["detectors"] = detector_hashes();
    key_src["trainer"] = full["trainer"];
    key_src["reward"] = full["reward"];
    key_src["rules"] = cfg_.rules().hash();
    key_src["seed"] = substream("trainer");
    key_src["offline"] = opt_.offline;
    const auto key = sha256_hex(key_src.dump());
    const auto snap_rel = policy_path(method);
    const auto log_rel = std::string("policy/") + to_string(method) + ".log.jsonl";
    const std::vector<std::string> outputs{snap_rel, log_rel};
    if (cached(std::string("train/") + to_string(method), key_src, outputs)) {
      return {load_policy(out_ / snap_rel, cfg_.rules()).step, 0, true};
    }

    const auto rules = cfg_.rules();
    const RewritePolicy reference(rules);
    RewritePolicy start(rules);
    std::size_t start_step = 0;
    std::vector<std::string> log_lines;
    if (std::filesystem::exists(out_ / snap_rel)) {
      auto snap = load_policy(out_ / snap_rel, rules);
      if (snap.config_hash == key && std::filesystem::exists(out_ / log_rel)) {
        start = snap.policy;
        start_step = snap.step;
        std::istringstream in(read_file(out_ / log_rel));
        std::string line;
        while (std::getline(in, line))
          if (!line.empty() && nlohmann::json::parse(line).at("step").get<std::size_t>() < start_step)
            log_lines.push_back(line);
        say(std::string("resuming ") + to_string(method) + " from step " + std::to_string(start_step));
      }
    }

    const auto reg = registry();
    const RewardModel reward(reg, ensemble, embedder(), cfg_.reward);
    auto tc = cfg_.trainer;
    tc.seed = substream("trainer");
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t since_checkpoint = 0;
    auto checkpoint = [&](const RewritePolicy& p, std::size_t step) {
      save_policy({p, reference, step, key}, out_ / snap_rel);
      std::string all;
      for (const auto& l : log_lines) all += l + "\n";
      write_file_atomic(out_ / log_rel, all);
    };
    auto result = train(sp.train, reward, tc, reference, start, start_step, [&](const StepLog& s, const RewritePolicy& p) {
      log_lines.push_back(s.to_json().dump());
      if (checkpoint_every && ++since_checkpoint >= checkpoint_every) {
        since_checkpoint = 0;
        checkpoint(p, s.step + 1);
      }
    });
    checkpoint(result.policy, result.steps_completed);
    record(std::string("train/") + to_string(method), key_src, outputs);
    say(std::string("trained ") + to_string(method) + ": " + std::to_string(result.steps_completed - start_step) +
        " updates in " + seconds_since(t0) + " s");
    return {result.steps_completed, start_step, false};
  }

  // -- evaluation -----------------------------------------------------------

  std::vector<Method> available_methods() const {
    std::vector<Method> out;
    for (int i = 0; i < 6; ++i) {
      const auto m = static_cast<Method>(i);
      if (std::filesystem::exists(out_ / attack_path(m))) out.push_back(m);
    }
    return out;
  }

  MetricsSettings metrics_settings() const {
    return {cfg_.target_fpr, cfg_.bootstrap_iterations, cfg_.bootstrap_seed, cfg_.histogram_bins,
            cfg_.similarity_threshold, std::max<std::size_t>(cfg_.workers, 1)};
  }

  ScoreBundle evaluate() {
    const auto methods = available_methods();
    if (methods.empty()) throw ValidationError("no attack outputs to evaluate (run attack first)");
    const auto sp = ensure_split();
    nlohmann::ordered_json key_src;
    key_src["eval_sha256"] = artifact_hash("splits/eval.jsonl");
    key_src["detectors"] = detector_hashes();
    key_src["remote"] = cfg_.to_json()["detectors"]["remote"];
    key_src["offline"] = opt_.offline;
    key_src["reward"] = cfg_.to_json()["reward"];
    key_src["metrics"] = cfg_.to_json()["metrics"];
    for (auto m : methods) key_src["attacks"][to_string(m)] = artifact_hash(attack_path(m));
    const std::vector<std::string> outputs{"scores/scores.json", "report/metrics.json", "report/metrics.csv",
                                           "report/plot_data.json"};
    if (cached("evaluate", key_src, outputs)) return load_scores();

    const auto t0 = std::chrono::steady_clock::now();
    const auto reg = registry();
    const auto humans = sp.eval.only(Label::human);
    std::map<std::string, std::string> source;
    for (const auto& s : sp.eval) source[s.id] = s.text;
    ScoreBundle b;
    b.detectors = reg.ids();
    for (const auto& d : b.detectors) b.held_out[d] = reg.is_held_out(d);
    std::map<std::string, std::vector<AttackOutput>> outs;
    for (auto m : methods) {
      b.methods.push_back(to_string(m));
      for (auto& [id, o] : load_attack(m)) outs[to_string(m)].push_back(std::move(o));
    }
    const auto workers = std::max<std::size_t>(cfg_.workers, 1);
    for (const auto& d : b.detectors) {
      const auto& det = reg.get(d);
      auto& hs = b.human[d];
      hs.resize(humans.size());
      parallel_for(humans.size(), workers, [&](std::size_t i) { hs[i] = det.score(humans[i].text).value; });
      for (const auto& meth : b.methods) {
        const auto& list = outs[meth];
        auto& as = b.ai[d][meth];
        as.resize(list.size());
        parallel_for(list.size(), workers, [&](std::size_t i) { as[i] = det.score(list[i].paraphrase).value; });
      }
    }
    const auto emb = embedder();
    for (const auto& meth : b.methods) {
      const auto& list = outs[meth];
      auto& sem = b.semantic[meth];
      sem.resize(list.size());
      parallel_for(list.size(), workers, [&](std::size_t i) {
        auto src = source.find(list[i].sample_id);
        if (src == source.end()) throw ValidationError("attack output for unknown sample " + list[i].sample_id);
        sem[i] = semantic_reward(src->second, list[i].paraphrase, *emb);
      });
    }
    write_file_atomic(out_ / outputs[0], b.to_json().dump() + "\n");
    write_report(b);
    record("evaluate", key_src, outputs);
    say("evaluated " + std::to_string(b.detectors.size()) + " detectors x " + std::to_string(b.methods.size()) +
        " methods in " + seconds_since(t0) + " s");
    return b;
  }

  ScoreBundle load_scores() const {
    const auto p = out_ / "scores" / "scores.json";
    if (!std::filesystem::exists(p)) throw ValidationError("no persisted scores (run evaluate first)");
    return ScoreBundle::from_json(nlohmann::json::parse(read_file(p)));
  }

  // Rebuilds the report from persisted scores only.
  ReportFiles report() {
    const auto b = load_scores();
    auto files = write_report(b);
    for (const auto* rel : {"report/metrics.json", "report/metrics.csv", "report/plot_data.json"}) note_artifact(rel);
    manifest_.save(manifest_path());
    return files;
  }

  // -- judging --------------------------------------------------------------

  JudgeReport judge() {
    const auto sp = ensure_split();
    OutputStore store;
    std::vector<std::string> methods;
    for (auto m : available_methods()) {
      if (m == Method::M0) continue;  // originals are not judged
      methods.push_back(to_string(m));
      store[to_string(m)] = load_attack(m);
    }
    if (methods.empty()) throw ValidationError("no paraphrase outputs to judge (run attack first)");
    auto plan = make_judge_plan(store, methods, cfg_.judge_subset, substream("judge"));
    plan.concurrency = cfg_.judge_concurrency;
    plan.reasks = cfg_.judge_reasks;
    std::map<std::string, std::string> sources;
    for (const auto& s : sp.eval) sources[s.id] = s.text;
    std::unique_ptr<JudgeClient> client;
    if (cfg_.judge && !opt_.offline) {
      client = std::make_unique<HttpJudge>(cfg_.judge->url, cfg_.judge->limits, cfg_.judge->auth_env);
    } else {
      client = std::make_unique<OfflineJudge>();
    }
    const JudgeCache cache(out_ / "judge" / "cache");
    std::filesystem::create_directories(out_ / "judge" / "cache");
    const auto verdicts = out_ / "judge" / "verdicts.jsonl";
    auto finish = [&](const JudgeReport& r) {
      write_file_atomic(out_ / "judge" / "report.json", r.summary_json().dump(2) + "\n");
      note_artifact("judge/verdicts.jsonl");
      note_artifact("judge/report.json");
      manifest_.save(manifest_path());
    };
    try {
      auto r = run_judging(plan, store, sources, *client, cache, verdicts);
      finish(r);
      say("judged " + std::to_string(r.verdicts.size()) + " paraphrases (" + std::to_string(r.cache_hits) +
          " from cache)");
      return r;
    } catch (const TransportError&) {
      if (std::filesystem::exists(verdicts)) note_artifact("judge/verdicts.jsonl");
      manifest_.save(manifest_path());
      throw;
    }
  }

 private:
  Corpus load_window(const std::filesystem::path& p) const {
    auto c = load_jsonl(p, cfg_.fields);
    FilterStats st;
    auto f = filter_token_window(c, cfg_.token_min, cfg_.token_max, &st);
    if (f.size() != c.size())
      say(p.filename().string() + ": kept " + std::to_string(f.size()) + " of " + std::to_string(c.size()) +
          " samples in the token window");
    return f;
  }

  std::shared_ptr<ParaphraseClient> paraphraser(const RuleSet& rules, std::uint64_t seed) const {
    if (cfg_.paraphraser && !opt_.offline)
      return std::make_shared<HttpParaphraser>(cfg_.paraphraser->url, cfg_.paraphraser->limits,
                                               cfg_.paraphraser->auth_env);
    return std::make_shared<OfflineParaphraser>(rules, seed);
  }

  std::shared_ptr<const Embedder> embedder() const {
    if (cfg_.embedder && !opt_.offline)
      return std::make_shared<RemoteEmbedder>(cfg_.embedder->url, cfg_.embedder->limits, cfg_.embedder->auth_env);
    return std::make_shared<HashedNgramEmbedder>(cfg_.embedder_orders, cfg_.embedder_dimension);
  }

  nlohmann::ordered_json detector_hashes() const {
    nlohmann::ordered_json j;
    for (auto id : kLocalDetectors) j[std::string(id)] = artifact_hash("detectors/" + std::string(id) + ".json");
    return j;
  }

  std::string artifact_hash(const std::string& rel) const {
    const auto p = out_ / rel;
    if (!std::filesystem::exists(p)) throw ValidationError("missing artifact " + p.string());
    return sha256_file(p);
  }

  bool cached(const std::string& step, const nlohmann::ordered_json& key_src, const std::vector<std::string>& outputs,
              bool announce = true) const {
    auto it = manifest_.steps.find(step);
    if (it == manifest_.steps.end() || it->second.input_key != sha256_hex(key_src.dump())) return false;
    for (const auto& rel : outputs) {
      auto a = manifest_.artifacts.find(rel);
      const auto p = out_ / rel;
      if (a == manifest_.artifacts.end() || !std::filesystem::exists(p) || sha256_file(p) != a->second.sha256)
        return false;
    }
    if (announce) say("cache hit: " + step);
    return true;
  }

  void note_artifact(const std::string& rel) { manifest_.artifacts[rel] = {sha256_file(out_ / rel), utc_timestamp()}; }

  void record(const std::string& step, const nlohmann::ordered_json& key_src, const std::vector<std::string>& outputs) {
    for (const auto& rel : outputs) note_artifact(rel);
    manifest_.steps[step] = {sha256_hex(key_src.dump()), outputs};
    manifest_.save(manifest_path());
  }

  ReportFiles write_report(const ScoreBundle& b) const {
    auto files = build_report(b, metrics_settings());
    write_file_atomic(out_ / "report" / "metrics.json", files.metrics_json);
    write_file_atomic(out_ / "report" / "metrics.csv", files.metrics_csv);
    write_file_atomic(out_ / "report" / "plot_data.json", files.plot_data_json);
    return files;
  }

  static std::size_t count_lines(const std::filesystem::path& p) {
    const auto s = read_file(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
  }

  static std::string seconds_since(std::chrono::steady_clock::time_point t0) {
    std::ostringstream ss;
    ss.precision(3);
    ss << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return ss.str();
  }

  void say(const std::string& msg) const {
    if (opt_.log) *opt_.log << msg << "\n";
  }

  RunConfig cfg_;
  PipelineOptions opt_;
  std::filesystem::path out_;
  RunManifest manifest_;
};

}  // namespace evade
