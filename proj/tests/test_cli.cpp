#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "evade/pipeline.hpp"
#include "evade/synth.hpp"
#include "support.hpp"

using namespace evade;
using evade::testing::TempDir;

namespace {

// Small corpora shared by every test in this file.
class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new TempDir();
    write_file_atomic(*data_ / "main.jsonl", to_jsonl(synth::generate({40, 80, 11, "m"})));
    write_file_atomic(*data_ / "det.jsonl", to_jsonl(synth::generate({60, 30, 12, "d"})));
  }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
  }

  RunConfig config(const std::filesystem::path& out) const {
    RunConfig c;
    c.base_dir = data_->path();
    c.corpus_path = *data_ / "main.jsonl";
    c.detector_corpus_path = *data_ / "det.jsonl";
    c.split = {40, 30, 30};
    c.classifier.feature_buckets = 1u << 14;
    c.homoglyph_table = std::filesystem::path(EVADE_DATA_DIR) / "homoglyphs.txt";
    c.rules_file = std::filesystem::path(EVADE_DATA_DIR) / "rules.tsv";
    c.trainer.max_updates = 6;
    c.bootstrap_iterations = 50;
    c.output_dir = out;
    return c;
  }

  Pipeline pipeline(const RunConfig& c, bool offline = true) {
    PipelineOptions o;
    o.offline = offline;
    o.log = &log_;
    return Pipeline(c, o);
  }

  static TempDir* data_;
  std::ostringstream log_;
};

TempDir* PipelineTest::data_ = nullptr;

std::string config_error(const RunConfig& c) {
  try {
    c.validate();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return {};
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(EVADE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(PipelineTest, MissingCorpusIsSingleValidationError) {
  TempDir out;
  auto c = config(out.path());
  c.corpus_path = *data_ / "absent.jsonl";
  const auto msg = config_error(c);
  EXPECT_EQ(count_of(msg, "\n  - "), 1u) << msg;
  EXPECT_NE(msg.find("absent.jsonl"), std::string::npos);
}

TEST_F(PipelineTest, HeldOutDetectorInEnsembleRejected) {
  TempDir out;
  auto c = config(out.path());
  c.ensemble = EnsembleConfig{{{"classifier", 0.5}, {"paired_lm", 0.5}}};
  EXPECT_NE(config_error(c).find("held-out"), std::string::npos) << config_error(c);
  c.ensemble = EnsembleConfig{{{"classifier", 0.5}, {"nonexistent", 0.5}}};
  EXPECT_FALSE(config_error(c).empty());
}

TEST_F(PipelineTest, ClassifierOnlyEnsembleAccepted) {
  TempDir out;
  auto c = config(out.path());
  c.m4_ensemble = EnsembleConfig{{{"classifier", 1.0}}};
  EXPECT_EQ(config_error(c), "");
}

TEST_F(PipelineTest, ConfigJsonRoundTrip) {
  TempDir out;
  auto c = config(out.path());
  write_file_atomic(out / "cfg.json", c.to_json().dump(2));
  auto back = RunConfig::load(out / "cfg.json");
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
}

TEST_F(PipelineTest, RebuildIsByteIdenticalAndCached) {
  TempDir a, b;
  auto pa = pipeline(config(a.path()));
  pa.build_detectors();
  auto pb = pipeline(config(b.path()));
  pb.build_detectors();
  for (const char* d : {"classifier", "surprisal", "paired_lm"}) {
    const auto rel = std::string("detectors/") + d + ".json";
    EXPECT_EQ(sha256_file(a / rel), sha256_file(b / rel)) << d;
  }
  log_.str("");
  auto again = pipeline(config(a.path()));
  again.build_detectors();
  EXPECT_NE(log_.str().find("cache hit: build-detectors"), std::string::npos) << log_.str();
  EXPECT_TRUE(again.manifest().verify(a.path()).empty());
}

TEST_F(PipelineTest, IdentityAttackReturnsEvalTextsVerbatim) {
  TempDir out;
  auto p = pipeline(config(out.path()));
  p.build_detectors();
  auto s = p.attack(Method::M0);
  const auto eval_ai = p.ensure_split().eval.only(Label::ai);
  EXPECT_EQ(s.outputs, eval_ai.size());
  const auto m0 = p.load_attack(Method::M0);
  for (const auto& x : eval_ai) EXPECT_EQ(m0.at(x.id).paraphrase, x.text);
}

TEST_F(PipelineTest, ZeroRateHomoglyphEqualsIdentity) {
  TempDir out;
  auto c = config(out.path());
  c.homoglyph_rate = 0.0;
  auto p = pipeline(c);
  p.attack(Method::M0);
  p.attack(Method::M5);
  const auto m0 = p.load_attack(Method::M0), m5 = p.load_attack(Method::M5);
  ASSERT_EQ(m0.size(), m5.size());
  for (const auto& [id, o] : m0) EXPECT_EQ(m5.at(id).paraphrase, o.paraphrase);
}

TEST_F(PipelineTest, SingleCandidateSelectionEqualsParaphrase) {
  TempDir out;
  auto c = config(out.path());
  c.candidates_k = 1;
  auto p = pipeline(c);
  p.build_detectors();
  p.attack(Method::M1);
  p.attack(Method::M3);
  const auto m1 = p.load_attack(Method::M1), m3 = p.load_attack(Method::M3);
  ASSERT_EQ(m1.size(), m3.size());
  for (const auto& [id, o] : m1) EXPECT_EQ(m3.at(id).paraphrase, o.paraphrase);
}

TEST_F(PipelineTest, SelectionNeverScoresAboveParaphrase) {
  TempDir out;
  auto p = pipeline(config(out.path()));
  p.build_detectors();
  p.attack(Method::M1);
  p.attack(Method::M3);
  const auto reg = p.registry();
  const auto m1 = p.load_attack(Method::M1), m3 = p.load_attack(Method::M3);
  for (const auto& [id, o] : m3) {
    const auto scores = o.aux.at("scores").get<std::vector<double>>();
    EXPECT_EQ(scores.at(0), reg.score_ensemble(p.config().ensemble, m1.at(id).paraphrase)) << id;
    EXPECT_LE(reg.score_ensemble(p.config().ensemble, o.paraphrase), reg.score_ensemble(p.config().ensemble, m1.at(id).paraphrase));
  }
}

TEST_F(PipelineTest, ReportIsPureFunctionOfScores) {
  TempDir out;
  auto p = pipeline(config(out.path()));
  p.build_detectors();
  p.attack(Method::M0);
  p.attack(Method::M5);
  const auto bundle = p.evaluate();
  const auto csv = read_file(out / "report/metrics.csv");
  const auto json = read_file(out / "report/metrics.json");
  const auto plot = read_file(out / "report/plot_data.json");
  auto files = p.report();
  EXPECT_EQ(files.metrics_csv, csv);
  EXPECT_EQ(read_file(out / "report/metrics.json"), json);
  EXPECT_EQ(read_file(out / "report/plot_data.json"), plot);
  const auto direct = build_report(p.load_scores(), p.metrics_settings());
  EXPECT_EQ(direct.metrics_csv, csv);

  const auto pj = nlohmann::json::parse(plot);
  const auto rows = pj.at("rows").size(), cols = pj.at("columns").size();
  EXPECT_EQ(rows, bundle.detectors.size());
  EXPECT_EQ(cols, bundle.methods.size());
  for (const char* metric : {"tpr", "asr", "auroc"}) {
    const auto& m = pj.at("heatmap").at(metric);
    ASSERT_EQ(m.size(), rows);
    for (const auto& r : m) EXPECT_EQ(r.size(), cols);
  }
  // one CSV line per (detector, method) plus the header
  EXPECT_EQ(count_of(csv, "\n"), 1 + rows * cols);
}

TEST_F(PipelineTest, ResumedTrainingMatchesUninterrupted) {
  TempDir out;
  auto c = config(out.path());
  auto p = pipeline(c);
  p.build_detectors();
  const auto full = p.train_policy(Method::M2, 2);
  EXPECT_EQ(full.steps, 6u);
  const auto final_snapshot = read_file(out / "policy/M2.json");
  const auto final_log = read_file(out / "policy/M2.log.jsonl");

  // Recreate the state a run killed after its step-4 checkpoint would leave.
  const auto reg = p.registry();
  const RewardModel reward(reg, c.ensemble, std::make_shared<HashedNgramEmbedder>(c.embedder_orders, c.embedder_dimension),
                           c.reward);
  auto tc = c.trainer;
  tc.seed = p.substream("trainer");
  tc.max_updates = 4;
  const RewritePolicy reference(c.rules());
  auto partial = train(load_jsonl(out / "splits/train.jsonl"), reward, tc, reference, reference);
  ASSERT_EQ(partial.steps_completed, 4u);
  const auto key = load_policy(out / "policy/M2.json", c.rules()).config_hash;
  save_policy({partial.policy, reference, 4, key}, out / "policy/M2.json");
  std::string head;
  std::istringstream in(final_log);
  for (std::string line; std::getline(in, line);)
    if (nlohmann::json::parse(line).at("step").get<std::size_t>() < 4) head += line + "\n";
  write_file_atomic(out / "policy/M2.log.jsonl", head);

  auto resumed = pipeline(c);
  const auto r = resumed.train_policy(Method::M2, 2);
  EXPECT_FALSE(r.cache_hit);
  EXPECT_EQ(r.resumed_from, 4u);
  EXPECT_EQ(read_file(out / "policy/M2.json"), final_snapshot);
  EXPECT_EQ(read_file(out / "policy/M2.log.jsonl"), final_log);

  auto third = pipeline(c);
  EXPECT_TRUE(third.train_policy(Method::M2).cache_hit);
  EXPECT_THROW(third.train_policy(Method::M3), ValidationError);
}

TEST_F(PipelineTest, OfflinePipelineOpensNoConnections) {
  TempDir out;
  auto c = config(out.path());
  RemoteDetectorConfig remote;
  remote.id = "remote_api";
  remote.endpoint.url = "http://127.0.0.1:9/";
  remote.held_out = true;
  c.remote_detectors.push_back(remote);
  const auto before = transport_stats().connections.load();
  auto p = pipeline(c);
  p.build_detectors();
  for (auto m : {Method::M0, Method::M1, Method::M3, Method::M5}) p.attack(m);
  p.train_policy(Method::M2);
  p.attack(Method::M2);
  auto b = p.evaluate();
  p.judge();
  EXPECT_EQ(transport_stats().connections.load(), before);
  EXPECT_EQ(b.methods.size(), 5u);
  EXPECT_EQ(std::count(b.detectors.begin(), b.detectors.end(), "remote_api"), 0);
  set_offline(false);
}

TEST_F(PipelineTest, SeedOverrideChangesSplit) {
  TempDir a, b;
  auto pa = pipeline(config(a.path()));
  PipelineOptions o;
  o.offline = true;
  o.seed_override = 7;
  o.log = &log_;
  Pipeline pb(config(b.path()), o);
  pa.ensure_split();
  pb.ensure_split();
  EXPECT_NE(read_file(a / "splits/eval.jsonl"), read_file(b / "splits/eval.jsonl"));
}

TEST_F(PipelineTest, CliExitCodes) {
  TempDir out;
  auto c = config(out / "run");
  write_file_atomic(out / "cfg.json", c.to_json().dump(2));
  const std::string cfg = "--config " + (out / "cfg.json").string();

  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("attack --method M9 --offline " + cfg), 1);
  EXPECT_EQ(run_cli("attack --offline " + cfg), 1);  // --method is required
  EXPECT_EQ(run_cli("build-detectors --offline --config " + (out / "missing.json").string()), 1);
  EXPECT_EQ(run_cli("report --offline " + cfg), 1);  // nothing evaluated yet

  EXPECT_EQ(run_cli("build-detectors --offline " + cfg), 0);
  EXPECT_EQ(run_cli("attack --method M0 --offline " + cfg), 0);
  EXPECT_EQ(run_cli("evaluate --offline " + cfg), 0);
  EXPECT_EQ(run_cli("report --offline " + cfg), 0);
  EXPECT_TRUE(std::filesystem::exists(out / "run/report/metrics.csv"));

  // The same run online against an unreachable remote detector.
  RemoteDetectorConfig remote;
  remote.id = "remote_api";
  remote.endpoint.url = "http://127.0.0.1:9/";
  remote.endpoint.limits.retries = 0;
  remote.endpoint.limits.timeout_seconds = 1;
  remote.held_out = true;
  c.remote_detectors.push_back(remote);
  write_file_atomic(out / "cfg_remote.json", c.to_json().dump(2));
  EXPECT_EQ(run_cli("evaluate --config " + (out / "cfg_remote.json").string()), 2);
  EXPECT_EQ(run_cli("evaluate --offline --config " + (out / "cfg_remote.json").string()), 0);
}

TEST_F(PipelineTest, CliOutFlagOverridesConfig) {
  TempDir out;
  auto c = config(out / "configured");
  write_file_atomic(out / "cfg.json", c.to_json().dump(2));
  EXPECT_EQ(run_cli("attack --method M0 --offline --config " + (out / "cfg.json").string() + " --out " +
                    (out / "elsewhere").string()),
            0);
  EXPECT_TRUE(std::filesystem::exists(out / "elsewhere/attacks/M0.jsonl"));
  EXPECT_FALSE(std::filesystem::exists(out / "configured/attacks/M0.jsonl"));
}
