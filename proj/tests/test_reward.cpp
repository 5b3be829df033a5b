#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "evade/reward.hpp"
#include "support.hpp"

using namespace evade;
using evade::testing::StubServer;

namespace {

// Exact n-gram count vectors keyed by the n-gram itself; no hashing.
std::map<std::u32string, double> exact_counts(std::string_view text, const std::vector<int>& orders) {
  const auto cps = unicode::decode(text);
  std::map<std::u32string, double> m;
  for (int n : orders)
    for (std::size_t i = 0; i + n <= cps.size(); ++i) m[cps.substr(i, n)] += 1.0;
  return m;
}

double exact_cosine(std::string_view a, std::string_view b, const std::vector<int>& orders) {
  auto x = exact_counts(a, orders), y = exact_counts(b, orders);
  double xy = 0, xx = 0, yy = 0;
  for (const auto& [g, c] : x) {
    xx += c * c;
    if (auto it = y.find(g); it != y.end()) xy += c * it->second;
  }
  for (const auto& [g, c] : y) yy += c * c;
  return xy / std::sqrt(xx * yy);
}

}  // namespace

TEST(DetectorReward, OneMinusProbability) {
  EXPECT_EQ(detector_reward(1.0), 0.0);
  EXPECT_EQ(detector_reward(0.0), 1.0);
  EXPECT_NEAR(detector_reward(0.63), 0.37, 1e-15);
  EXPECT_THROW(detector_reward(1.01), PreconditionError);
  EXPECT_THROW(detector_reward(std::nan("")), PreconditionError);
}

TEST(Semantic, IdentityIsOne) {
  HashedNgramEmbedder e;
  EXPECT_NEAR(semantic_reward("The results were significant.", "The results were significant.", e), 1.0, 1e-12);
}

TEST(Semantic, DisjointIsZero) {
  HashedNgramEmbedder e({3, 4, 5}, 1u << 20);
  EXPECT_EQ(semantic_reward("aaaaaa", "bbbbbb", e), 0.0);
}

TEST(Semantic, MatchesExactNgramCosine) {
  const std::vector<int> orders{3, 4, 5};
  HashedNgramEmbedder e(orders, 1u << 22);  // wide enough that collisions are negligible
  const std::pair<const char*, const char*> cases[] = {
      {"We utilize numerous tools.", "We use many tools."},
      {"The cat sat on the mat.", "On the mat the cat sat."},
      {"caf\xC3\xA9 au lait", "cafe au lait"},
      {"abcabcabc", "abcabd"},
  };
  for (const auto& [a, b] : cases) EXPECT_NEAR(semantic_reward(a, b, e), exact_cosine(a, b, orders), 1e-12) << a;
}

TEST(Semantic, Symmetric) {
  HashedNgramEmbedder e;
  EXPECT_EQ(semantic_reward("first text here", "second text there", e),
            semantic_reward("second text there", "first text here", e));
}

TEST(Semantic, DegenerateEmbeddingIsZeroAndCounted) {
  HashedNgramEmbedder e;
  const auto before = degenerate_embedding_count().load();
  EXPECT_EQ(semantic_reward("ab", "ab", e), 0.0);  // shorter than every order
  EXPECT_EQ(degenerate_embedding_count().load(), before + 1);
  EXPECT_THROW(semantic_reward("", "abc", e), PreconditionError);
}

TEST(Semantic, DimensionMustBePowerOfTwo) { EXPECT_THROW(HashedNgramEmbedder({3}, 1000), ValidationError); }

TEST(Composite, WorkedExample) {
  auto r = combine_reward(0.3, 0.9, {1.0, 0.1});
  EXPECT_NEAR(r.r_det, 0.7, 1e-15);
  EXPECT_NEAR(r.total, 0.79, 1e-12);
}

TEST(Composite, BoundaryAndBetaZero) {
  EXPECT_NEAR(combine_reward(1.0, 0.5, {1.0, 0.1}).total, 0.05, 1e-15);
  EXPECT_EQ(combine_reward(0.25, 0.9, {1.0, 0.0}).total, detector_reward(0.25));
}

TEST(Composite, MonotoneAndBounded) {
  const RewardWeights w{1.0, 0.1};
  for (double p = 0.0; p <= 1.0; p += 0.1)
    for (double s = -1.0; s <= 1.0; s += 0.2) {
      const double r = combine_reward(p, s, w).total;
      EXPECT_GE(r, -0.1 - 1e-12);
      EXPECT_LE(r, 1.1 + 1e-12);
      EXPECT_LE(combine_reward(std::min(1.0, p + 0.1), s, w).total, r + 1e-15);
      EXPECT_GE(combine_reward(p, s + 0.1, w).total, r - 1e-15);
    }
  EXPECT_THROW((RewardWeights{-1.0, 0.1}).validate(), ValidationError);
}

TEST(RewardModel, CombinesEnsembleAndSimilarity) {
  DetectorRegistry reg;
  reg.add(std::make_shared<CallbackDetector>("a", [](std::string_view) { return 0.5; }));
  reg.add(std::make_shared<CallbackDetector>("b", [](std::string_view) { return 0.25; }));
  auto emb = std::make_shared<HashedNgramEmbedder>();
  RewardModel m(reg, EnsembleConfig{{{"a", 0.6}, {"b", 0.4}}}, emb, {1.0, 0.1});
  const std::string x = "The results were significant.", y = "The results were big.";
  const auto r = m.evaluate(x, y);
  EXPECT_NEAR(r.r_det, 0.6, 1e-12);
  EXPECT_NEAR(r.total, 0.6 + 0.1 * semantic_reward(x, y, *emb), 1e-12);
  EXPECT_EQ(m.evaluate(emb->embed(x), y).total, r.total);
}

TEST(RewardModel, HeldOutRejectedAtConstruction) {
  DetectorRegistry reg;
  reg.add(std::make_shared<CallbackDetector>("h", [](std::string_view) { return 0.5; }), true);
  EXPECT_THROW(RewardModel(reg, EnsembleConfig{{{"h", 1.0}}}, std::make_shared<HashedNgramEmbedder>(), {}),
               RegistryError);
}

TEST(RemoteEmbedder, VectorIsRenormalized) {
  StubServer srv([](const nlohmann::json& req, int, httplib::Response& res) {
    if (req.at("text") == "x") {
      StubServer::reply(res, {{"vector", {3.0, 4.0}}});
    } else {
      StubServer::reply(res, {{"vector", {0.0, 2.0}}});
    }
  });
  TransportLimits lim;
  lim.retries = 0;
  RemoteEmbedder e(srv.url(), lim);
  EXPECT_NEAR(semantic_reward("x", "y", e), 0.8, 1e-12);
  EXPECT_NEAR(semantic_reward("x", "x", e), 1.0, 1e-12);
}

TEST(RemoteEmbedder, BadPayloadIsProtocolError) {
  StubServer srv([](const nlohmann::json&, int, httplib::Response& res) { StubServer::reply(res, {{"vector", {"a"}}}); });
  TransportLimits lim;
  lim.retries = 0;
  EXPECT_THROW(RemoteEmbedder(srv.url(), lim).embed("x"), ProtocolError);
}
