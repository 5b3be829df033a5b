#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <numeric>

#include "evade/detect.hpp"
#include "evade/synth.hpp"
#include "support.hpp"

using namespace evade;
using evade::testing::ai_sample;
using evade::testing::human_sample;
using evade::testing::StubServer;

namespace {

Corpus toy_corpus() {
  std::vector<TextSample> s;
  const char* human[] = {"the cat sat on the mat", "a dog ran in the park", "my cat likes the warm mat",
                         "the dog and the cat nap", "we sat in the park today"};
  const char* ai[] = {"quantum flux enables robust synergy", "leveraging robust quantum paradigms",
                      "synergy of flux paradigms is robust", "robust frameworks leverage quantum flux",
                      "paradigms enable scalable synergy"};
  for (int i = 0; i < 5; ++i) {
    s.push_back(human_sample("h" + std::to_string(i), human[i]));
    s.push_back(ai_sample("a" + std::to_string(i), ai[i]));
  }
  return Corpus(std::move(s));
}

ClassifierHyper small_hyper() {
  ClassifierHyper h;
  h.feature_buckets = 1u << 12;
  return h;
}

TransportLimits fast_limits(int retries = 3) {
  TransportLimits l;
  l.retries = retries;
  l.backoff_initial_seconds = 0.001;
  l.backoff_max_seconds = 0.002;
  l.timeout_seconds = 5.0;
  return l;
}

std::shared_ptr<CallbackDetector> constant(const std::string& id, double v) {
  return std::make_shared<CallbackDetector>(id, [v](std::string_view) { return v; });
}

struct OfflineGuard {
  explicit OfflineGuard(bool v) { set_offline(v); }
  ~OfflineGuard() { set_offline(false); }
};

}  // namespace

TEST(Classifier, SeparatesToyCorpus) {
  auto c = toy_corpus();
  auto d = build_classifier_detector(c, small_hyper());
  for (const auto& s : c) {
    const double p = d->score(s.text).value;
    EXPECT_EQ(p > 0.5, s.label == Label::ai) << s.id << " " << p;
  }
  EXPECT_LT(d->score("the cat sat in the park").value, 0.5);
  EXPECT_EQ(d->id(), "classifier");
}

TEST(Classifier, Deterministic) {
  auto a = build_classifier_detector(toy_corpus(), small_hyper());
  auto b = build_classifier_detector(toy_corpus(), small_hyper());
  EXPECT_EQ(detector_snapshot(*a).dump(), detector_snapshot(*b).dump());
}

TEST(Classifier, SingleLabelCorpusRejected) {
  Corpus only_ai({ai_sample("a", "x y z"), ai_sample("b", "p q r")});
  EXPECT_THROW(build_classifier_detector(only_ai, small_hyper()), ValidationError);
}

TEST(Classifier, SnapshotRoundTrip) {
  evade::testing::TempDir dir;
  auto d = build_classifier_detector(toy_corpus(), small_hyper());
  save_detector(*d, dir / "c.json");
  auto back = load_detector(dir / "c.json");
  for (const auto& s : toy_corpus()) EXPECT_EQ(back->score(s.text).value, d->score(s.text).value);
}

TEST(Detector, EmptyTextIsPrecondition) {
  auto d = build_classifier_detector(toy_corpus(), small_hyper());
  EXPECT_THROW(d->score(""), PreconditionError);
  EXPECT_THROW(constant("k", 0.5)->score(""), PreconditionError);
}

TEST(NgramLm, UnigramSurprisalIsEmpiricalEntropy) {
  const std::vector<std::string> ref{"aaab"};
  auto lm = NgramLm::train(ref, 1, 0.0);
  const double h = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
  EXPECT_NEAR(lm.mean_surprisal("aaab"), h, 1e-12);
}

TEST(NgramLm, AddKUnigram) {
  const std::vector<std::string> ref{"aaab"};
  auto lm = NgramLm::train(ref, 1, 1.0);
  EXPECT_EQ(lm.vocab_size(), 3u);  // a, b, unknown
  const double pa = 4.0 / 7.0, pb = 2.0 / 7.0, punk = 1.0 / 7.0;
  EXPECT_NEAR(lm.mean_surprisal("ab"), -(std::log(pa) + std::log(pb)) / 2, 1e-12);
  EXPECT_NEAR(lm.mean_surprisal("z"), -std::log(punk), 1e-12);
}

TEST(NgramLm, BigramByHand) {
  const std::vector<std::string> ref{"ab"};
  auto lm = NgramLm::train(ref, 2, 0.5);
  // counts: (BOS,a)=1 (a,b)=1; V = 3
  const double p_a = 1.5 / 2.5, p_b = 1.5 / 2.5, p_unk_after_a = 0.5 / 2.5;
  EXPECT_NEAR(lm.mean_surprisal("ab"), -(std::log(p_a) + std::log(p_b)) / 2, 1e-12);
  EXPECT_NEAR(lm.mean_surprisal("az"), -(std::log(p_a) + std::log(p_unk_after_a)) / 2, 1e-12);
  // unseen context "b": add-k gives k / (k V)
  EXPECT_NEAR(lm.mean_surprisal("ba"), -(std::log(0.5 / 2.5) + std::log(0.5 / 1.5)) / 2, 1e-12);
}

TEST(NgramLm, TooSmallReferenceIsValidationError) {
  const std::vector<std::string> ref{"ab"};
  EXPECT_THROW(NgramLm::train(ref, 3, 0.1), ValidationError);
  EXPECT_THROW(NgramLm::train(ref, 0, 0.1), PreconditionError);
}

TEST(NgramLm, JsonRoundTrip) {
  const std::vector<std::string> ref{"hello world", "held words"};
  auto lm = NgramLm::train(ref, 3, 0.1);
  auto back = NgramLm::from_json(lm.to_json());
  EXPECT_EQ(back.to_json(), lm.to_json());
  EXPECT_EQ(back.mean_surprisal("hello"), lm.mean_surprisal("hello"));
}

TEST(Calibration, FitIsStationaryPoint) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8, 0.7, 0.2, 0.9, 0.5};
  const std::vector<int> y{0, 0, 1, 1, 1, 0, 1, 0};
  const double ridge = 1.0;
  const auto cal = fit_calibration(s, y, ridge);
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / s.size();
  double var = 0;
  for (double v : s) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / s.size());
  // penalized log-likelihood in standardized coordinates: gradient zero
  double g_int = 0, g_slope = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double r = y[i] - cal.apply(s[i]);
    g_int += r;
    g_slope += r * (s[i] - mean) / sd;
  }
  EXPECT_NEAR(g_int, 0.0, 1e-9);
  EXPECT_NEAR(g_slope, ridge * cal.a * sd, 1e-9);
  EXPECT_GT(cal.a, 0.0);
}

TEST(Calibration, SeparableStaysFinite) {
  const auto cal = fit_calibration({0, 1, 2, 10, 11, 12}, {0, 0, 0, 1, 1, 1});
  EXPECT_TRUE(std::isfinite(cal.a));
  EXPECT_TRUE(std::isfinite(cal.b));
  EXPECT_LT(cal.apply(0), 0.5);
  EXPECT_GT(cal.apply(12), 0.5);
}

TEST(Calibration, SingleLabelRejected) { EXPECT_THROW(fit_calibration({1, 2}, {1, 1}), ValidationError); }

TEST(Surprisal, ReferenceLikeTextScoresLowerThanNoise) {
  auto corpus = synth::generate({60, 30, 5, "t"});
  std::vector<TextSample> ref, cal;
  std::size_t humans = 0;
  for (const auto& s : corpus) (s.label == Label::human && humans++ < 40 ? ref : cal).push_back(s);
  auto d = build_surprisal_detector(Corpus(ref), Corpus(cal), LmHyper{3, 5, 0.1, 1.0});
  const double s_ref = d->statistic(ref.front().text);
  const double s_noise = d->statistic("zq xj vk wp qz jx kv pw zq xj vk wp");
  EXPECT_LT(s_ref, s_noise);
  EXPECT_THROW(build_surprisal_detector(Corpus(cal), Corpus(cal), LmHyper{}), ValidationError);
}

TEST(PairedLm, IdenticalModelsGiveZeroStatistic) {
  const std::vector<std::string> ref{"some human reference text here"};
  auto lm = NgramLm::train(ref, 2, 0.1);
  PairedLmDetector d("p", lm, lm, Calibration{1.0, 0.0});
  EXPECT_EQ(d.statistic("any text at all"), 0.0);
  EXPECT_DOUBLE_EQ(d.score("any text at all").value, 0.5);
}

TEST(PairedLm, StatisticMatchesRawLogProbs) {
  const std::vector<std::string> ref{"the quick brown fox jumps over the lazy dog", "a lazy dog sleeps"};
  auto small = NgramLm::train(ref, 2, 0.1);
  auto large = NgramLm::train(ref, 4, 0.1);
  PairedLmDetector d("p", small, large, Calibration{});
  const std::string text = "the lazy fox sleeps";
  auto ce = [&](const NgramLm& lm) {
    auto lp = lm.log_probs(text);
    return -std::accumulate(lp.begin(), lp.end(), 0.0) / lp.size();
  };
  EXPECT_NEAR(d.statistic(text), std::log(ce(large) / ce(small)), 1e-9);
}

TEST(PairedLm, OrdersMustIncrease) {
  Corpus ref({human_sample("h", "abc abc abc")});
  Corpus cal({human_sample("h2", "abc"), ai_sample("a", "xyz")});
  EXPECT_THROW(build_paired_lm_detector(ref, cal, LmHyper{3, 3, 0.1, 1.0}), ValidationError);
}

TEST(Ensemble, WeightedMean) {
  EnsembleConfig cfg{{{"classifier", 0.6}, {"surprisal", 0.4}}};
  std::map<std::string, DetectorScore> s{{"classifier", {0.5, "classifier"}}, {"surprisal", {0.25, "surprisal"}}};
  EXPECT_NEAR(ensemble_score(cfg, s), 0.40, 1e-12);
}

TEST(Ensemble, ConvexAndMonotone) {
  EnsembleConfig cfg{{{"x", 0.3}, {"y", 0.7}}};
  for (double a = 0; a <= 1.0; a += 0.25)
    for (double b = 0; b <= 1.0; b += 0.25) {
      std::map<std::string, DetectorScore> s{{"x", {a, "x"}}, {"y", {b, "y"}}};
      const double e = ensemble_score(cfg, s);
      EXPECT_GE(e, std::min(a, b) - 1e-12);
      EXPECT_LE(e, std::max(a, b) + 1e-12);
      std::map<std::string, DetectorScore> up{{"x", {std::min(1.0, a + 0.1), "x"}}, {"y", {b, "y"}}};
      EXPECT_GE(ensemble_score(cfg, up), e);
    }
}

TEST(Ensemble, SingleMemberAndPermutation) {
  std::map<std::string, DetectorScore> s{{"x", {0.123, "x"}}, {"y", {0.9, "y"}}, {"z", {0.3, "z"}}};
  EXPECT_EQ(ensemble_score(EnsembleConfig{{{"x", 1.0}}}, s), 0.123);
  EnsembleConfig a{{{"x", 0.2}, {"y", 0.3}, {"z", 0.5}}};
  EnsembleConfig b{{{"z", 0.5}, {"x", 0.2}, {"y", 0.3}}};
  EXPECT_EQ(ensemble_score(a, s), ensemble_score(b, s));  // bitwise
}

TEST(Ensemble, InvalidConfigs) {
  EXPECT_THROW(EnsembleConfig{}.validate(), RegistryError);
  EXPECT_THROW((EnsembleConfig{{{"x", 0.5}, {"y", 0.6}}}).validate(), RegistryError);
  EXPECT_THROW((EnsembleConfig{{{"x", 0.5}, {"x", 0.5}}}).validate(), RegistryError);
  EXPECT_THROW((EnsembleConfig{{{"x", -0.5}, {"y", 1.5}}}).validate(), RegistryError);
}

TEST(Registry, HeldOutMemberRejected) {
  DetectorRegistry r;
  r.add(constant("classifier", 0.3));
  r.add(constant("paired_lm", 0.8), true);
  EXPECT_THROW(r.score_ensemble(EnsembleConfig{{{"paired_lm", 1.0}}}, "x"), RegistryError);
  EXPECT_THROW(r.score_ensemble(EnsembleConfig{{{"missing", 1.0}}}, "x"), RegistryError);
  EXPECT_EQ(r.score_ensemble(EnsembleConfig{{{"classifier", 1.0}}}, "x"), 0.3);
  EXPECT_EQ(r.get("paired_lm").score("x").value, 0.8);  // still scorable for evaluation
  EXPECT_THROW(r.get("nope"), RegistryError);
}

TEST(Remote, ScorePassesThrough) {
  StubServer srv([](const nlohmann::json& req, int, httplib::Response& res) {
    EXPECT_EQ(req.at("text"), "hello");
    StubServer::reply(res, {{"score", 0.42}});
  });
  auto d = remote_detector("r", srv.url(), fast_limits());
  auto r = d->query("hello");
  EXPECT_EQ(r.score.value, 0.42);
  EXPECT_EQ(r.attempts, 1);
  EXPECT_FALSE(d->in_process());
}

TEST(Remote, OutOfRangeIsProtocolError) {
  StubServer srv([](const nlohmann::json&, int, httplib::Response& res) { StubServer::reply(res, {{"score", 1.7}}); });
  EXPECT_THROW(remote_detector("r", srv.url(), fast_limits())->score("x"), ProtocolError);
}

TEST(Remote, MissingScoreIsProtocolError) {
  StubServer srv([](const nlohmann::json&, int, httplib::Response& res) { StubServer::reply(res, {{"p", 0.1}}); });
  EXPECT_THROW(remote_detector("r", srv.url(), fast_limits())->score("x"), ProtocolError);
}

TEST(Remote, RetriesThenSucceeds) {
  StubServer srv([](const nlohmann::json&, int call, httplib::Response& res) {
    if (call <= 2) {
      StubServer::reply(res, {{"error", "busy"}}, 503);
    } else {
      StubServer::reply(res, {{"score", 0.9}});
    }
  });
  auto r = remote_detector("r", srv.url(), fast_limits(3))->query("x");
  EXPECT_EQ(r.attempts, 3);
  EXPECT_EQ(r.score.value, 0.9);
  EXPECT_EQ(srv.calls(), 3);
}

TEST(Remote, ExhaustedRetriesCarryAttemptCount) {
  StubServer srv([](const nlohmann::json&, int, httplib::Response& res) { StubServer::reply(res, {}, 500); });
  try {
    remote_detector("r", srv.url(), fast_limits(2))->score("x");
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 3);
  }
  EXPECT_EQ(srv.calls(), 3);
}

TEST(Remote, BearerTokenFromEnvironment) {
  ::setenv("EVADE_TEST_TOKEN", "s3cret", 1);
  StubServer srv([](const nlohmann::json&, int, httplib::Response& res) { StubServer::reply(res, {{"score", 0.1}}); });
  remote_detector("r", srv.url(), fast_limits(), "EVADE_TEST_TOKEN")->score("x");
  EXPECT_EQ(srv.auth_headers().at(0), "Bearer s3cret");
  EXPECT_THROW(remote_detector("r", srv.url(), fast_limits(), "EVADE_TEST_UNSET_VAR"), ValidationError);
}

TEST(Remote, OfflineNeverConnects) {
  StubServer srv([](const nlohmann::json&, int, httplib::Response& res) { StubServer::reply(res, {{"score", 0.1}}); });
  OfflineGuard guard(true);
  const auto before = transport_stats().connections.load();
  EXPECT_THROW(remote_detector("r", srv.url(), fast_limits())->score("x"), TransportError);
  EXPECT_EQ(transport_stats().connections.load(), before);
  EXPECT_EQ(srv.calls(), 0);
}
