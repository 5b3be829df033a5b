#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "evade/hash.hpp"
#include "evade/metrics.hpp"

using namespace evade;

namespace {

double brute_auroc(const std::vector<double>& h, const std::vector<double>& a) {
  double w = 0;
  for (double x : h)
    for (double y : a) w += y > x ? 1.0 : (y == x ? 0.5 : 0.0);
  return w / (static_cast<double>(h.size()) * static_cast<double>(a.size()));
}

std::vector<double> random_scores(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.below(4) == 0 ? rng.below(5) / 4.0 : rng.uniform();  // about a quarter tied
  return v;
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc({0.1, 0.2}, {0.8, 0.9}), 1.0);
  EXPECT_EQ(auroc({0.5}, {0.5}), 0.5);
  EXPECT_NEAR(auroc({0.2, 0.6, 0.4}, {0.3, 0.7, 0.9}), 7.0 / 9.0, 1e-15);
  EXPECT_THROW(auroc({}, {0.5}), PreconditionError);
  EXPECT_THROW(auroc({0.5}, {}), PreconditionError);
}

TEST(Auroc, MatchesBruteForceWithTies) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    auto h = random_scores(rng, 1 + rng.below(200));
    auto a = random_scores(rng, 1 + rng.below(200));
    EXPECT_NEAR(auroc(h, a), brute_auroc(h, a), 1e-12);
  }
}

TEST(Auroc, SwapSymmetry) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    auto h = random_scores(rng, 1 + rng.below(50));
    auto a = random_scores(rng, 1 + rng.below(50));
    EXPECT_NEAR(auroc(h, a) + auroc(a, h), 1.0, 1e-12);
  }
}

TEST(Auroc, InvariantUnderMonotoneTransform) {
  Rng rng(3);
  auto h = random_scores(rng, 40), a = random_scores(rng, 30);
  auto f = [](std::vector<double> v) {
    for (auto& x : v) x = std::pow(x, 3.0) * 0.5 + 0.1;
    return v;
  };
  EXPECT_EQ(auroc(h, a), auroc(f(h), f(a)));
}

TEST(Threshold, EvenlySpacedHundred) {
  std::vector<double> h;
  for (int i = 0; i < 100; ++i) h.push_back(i / 100.0);
  EXPECT_EQ(calibrate_threshold(h, 0.01), 0.99);
  EXPECT_EQ(fraction_at_or_above(h, 0.99), 0.01);
}

TEST(Threshold, AllEqualScoresGiveZeroFpr) {
  std::vector<double> h(50, 0.5);
  const double tau = calibrate_threshold(h, 0.01);
  EXPECT_GT(tau, 0.5);
  EXPECT_EQ(fraction_at_or_above(h, tau), 0.0);
  EXPECT_EQ(tau, std::nextafter(0.5, 1.0));
}

TEST(Threshold, QuarterFpr) { EXPECT_EQ(calibrate_threshold({0.1, 0.2, 0.3, 0.4}, 0.25), 0.4); }

TEST(Threshold, Preconditions) {
  EXPECT_THROW(calibrate_threshold({}, 0.01), PreconditionError);
  EXPECT_THROW(calibrate_threshold({0.5}, 0.0), PreconditionError);
  EXPECT_THROW(calibrate_threshold({0.5}, 1.0), PreconditionError);
}

TEST(Threshold, AchievedFprBoundedAndTight) {
  Rng rng(4);
  for (double target : {0.01, 0.05, 0.25}) {
    for (int t = 0; t < 100; ++t) {
      auto h = random_scores(rng, 1 + rng.below(300));
      const double tau = calibrate_threshold(h, target);
      EXPECT_LE(fraction_at_or_above(h, tau), target);
      // next lower observed human score would exceed the target
      double lower = -1;
      for (double x : h)
        if (x < tau) lower = std::max(lower, x);
      if (lower >= 0) EXPECT_GT(fraction_at_or_above(h, lower), target);
    }
  }
}

TEST(Rates, Examples) {
  EXPECT_EQ(tpr_at(0.9, {0.5, 0.95}), 0.5);
  EXPECT_EQ(asr_at(0.9, {0.5, 0.95}), 0.5);
  EXPECT_EQ(tpr_at(0.99, {0.5, 0.95}), 0.0);
  EXPECT_EQ(asr_at(0.99, {0.5, 0.95}), 1.0);
  // tau = 0.4 from the quarter-FPR example; scores at tau count as detected
  const std::vector<double> ai{0.05, 0.15, 0.35, 0.4, 0.45, 0.5, 0.6, 0.8, 0.9, 0.39};
  EXPECT_EQ(tpr_at(0.4, ai), 0.6);
  EXPECT_EQ(asr_at(0.4, ai), 1.0 - 0.6);
}

TEST(OperatingPoint, AsrPlusTprIsExactlyOne) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    ScoreSet s{random_scores(rng, 1 + rng.below(100)), random_scores(rng, 1 + rng.below(100)), "d", "m"};
    auto op = operating_point(s, 0.01);
    EXPECT_EQ(op.asr + op.tpr, 1.0);
    EXPECT_LE(op.achieved_fpr, 0.01);
  }
}

TEST(Bootstrap, ConstantScoresZeroWidth) {
  ScoreSet s{std::vector<double>(20, 0.3), std::vector<double>(20, 0.7), "d", "m"};
  auto ci = bootstrap_ci(auroc_statistic(), s, 200, 42);
  EXPECT_EQ(ci.point, 1.0);
  EXPECT_EQ(ci.lo, 1.0);
  EXPECT_EQ(ci.hi, 1.0);
}

TEST(Bootstrap, DeterministicAndScheduleIndependent) {
  Rng rng(6);
  ScoreSet s{random_scores(rng, 80), random_scores(rng, 60), "d", "m"};
  auto a = bootstrap_ci(tpr_statistic(0.01), s, 500, 42, 1);
  auto b = bootstrap_ci(tpr_statistic(0.01), s, 500, 42, 1);
  auto c = bootstrap_ci(tpr_statistic(0.01), s, 500, 42, 4);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.to_json(), c.to_json());
  EXPECT_EQ(a.point, operating_point(s, 0.01).tpr);
  EXPECT_LE(a.lo, a.point);
  EXPECT_GE(a.hi, a.point);
}

TEST(Bootstrap, GoldenThreeByThree) {
  const auto g = nlohmann::json::parse(read_file(std::filesystem::path(EVADE_GOLDEN_DIR) / "bootstrap_auroc_3x3.json"));
  ScoreSet s{g.at("human").get<std::vector<double>>(), g.at("ai").get<std::vector<double>>(), "d", "m"};
  auto ci = bootstrap_ci(auroc_statistic(), s, g.at("iterations"), g.at("seed"));
  EXPECT_EQ(ci.point, g.at("point").get<double>());
  EXPECT_EQ(ci.lo, g.at("lo").get<double>());
  EXPECT_EQ(ci.hi, g.at("hi").get<double>());
  EXPECT_NEAR(ci.point, 7.0 / 9.0, 1e-15);
}

TEST(Bootstrap, FailingStatisticGivesUp) {
  ScoreSet s{{0.1, 0.2}, {0.8}, "d", "m"};
  Statistic bad = [](const ScoreSet& r) -> double {
    if (r.human_scores != std::vector<double>{0.1, 0.2}) throw NumericError("resample rejected");
    return 0.5;
  };
  // the full sample passes, but most resamples fail every redraw
  EXPECT_THROW(bootstrap_ci(bad, s, 200, 42, 1, 0), NumericError);
  EXPECT_THROW(bootstrap_ci(auroc_statistic(), s, 0, 42), PreconditionError);
}

TEST(Histogram, TwoBins) {
  auto h = score_histogram({{0.1, 0.1, 0.9, 0.9}, {0.5}, "d", "m"}, 2);
  EXPECT_EQ(h.human, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(h.ai, (std::vector<std::size_t>{0, 1}));
}

TEST(Histogram, OneLandsInLastBin) {
  auto h = score_histogram({{1.0, 0.0}, {1.0}, "d", "m"}, 5);
  EXPECT_EQ(h.human, (std::vector<std::size_t>{1, 0, 0, 0, 1}));
  EXPECT_EQ(h.ai.back(), 1u);
  EXPECT_THROW(score_histogram({{0.5}, {0.5}, "d", "m"}, 0), PreconditionError);
}

TEST(Histogram, TwentyScoresTenBins) {
  const std::vector<double> human{0.05, 0.15, 0.15, 0.35, 0.45, 0.5, 0.55, 0.0, 0.25, 0.95};
  const std::vector<double> ai{0.65, 0.75, 0.85, 0.95, 1.0, 0.99, 0.55, 0.35, 0.85, 0.05};
  auto h = score_histogram({human, ai, "d", "m"}, 10, 0.42);
  EXPECT_EQ(h.human, (std::vector<std::size_t>{2, 2, 1, 1, 1, 2, 0, 0, 0, 1}));
  EXPECT_EQ(h.ai, (std::vector<std::size_t>{1, 0, 0, 1, 0, 1, 1, 1, 2, 3}));
  EXPECT_EQ(h.threshold, 0.42);
}

TEST(ScoreSet, OutOfRangeRejected) {
  EXPECT_THROW((ScoreSet{{1.2}, {0.5}, "d", "m"}).validate(), ValidationError);
  EXPECT_NO_THROW((ScoreSet{{1.0}, {0.0}, "d", "m"}).validate());
}
