#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"

using namespace coda;
using namespace coda::testing;

namespace {

Embedding unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return {std::move(v), "space"};
}

Embedding random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> g;
  std::vector<double> v(dim);
  for (double& x : v) x = g(rng);
  return unit(v);
}

Feature feature(const std::string& text) {
  auto f = make_feature(text, FeatureKind::textual, "t", std::nullopt);
  f->misidentified = "m";
  return *f;
}

/// Context whose feature embeddings are looked up by text.
struct TableContext {
  std::map<std::string, Embedding> text;
  ScoringContext ctx;

  TableContext(std::vector<Embedding> t, std::vector<Embedding> m) {
    for (std::size_t i = 0; i < t.size(); ++i) ctx.target_real.push_back("t" + std::to_string(i));
    for (std::size_t i = 0; i < m.size(); ++i) ctx.misident_real.push_back("m" + std::to_string(i));
    ctx.target_embeddings = std::move(t);
    ctx.misident_embeddings = std::move(m);
    ctx.embed_text = [this](const std::string& s) { return text.at(s); };
  }
};

}  // namespace

TEST(ShiftedCosine, IdenticalOrthogonalAntipodal) {
  auto e = unit({1, 0, 0});
  EXPECT_DOUBLE_EQ(shifted_cosine(e, e), 1.0);
  EXPECT_DOUBLE_EQ(shifted_cosine(e, unit({0, 1, 0})), 0.5);
  EXPECT_DOUBLE_EQ(shifted_cosine(e, unit({-1, 0, 0})), 0.0);
}

TEST(ShiftedCosine, RejectsMixedSpaces) {
  Embedding a{{1, 0}, "x"}, b{{1, 0}, "y"};
  EXPECT_THROW(shifted_cosine(a, b), IntegrityError);
}

TEST(LikelihoodRatio, ZeroOverZeroIsHalf) {
  EXPECT_DOUBLE_EQ(likelihood_ratio(0.0, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(likelihood_ratio(1.0, 0.5), 1.0 / 1.5);
}

TEST(Discriminability, SymmetricSimilaritiesGiveHalf) {
  std::vector<double> s = {0.2, 0.7, 0.9};
  EXPECT_DOUBLE_EQ(mean_ratio(s, s), 0.5);
}

TEST(Discriminability, SinglePairWorkedValue) {
  // s_t = 1, s_m = 0.5
  auto f = unit({1, 0});
  TableContext tc({unit({1, 0})}, {unit({0, 1})});
  EXPECT_NEAR(discriminability(f, tc.ctx), 1.0 / 1.5, 1e-15);
}

TEST(Discriminability, SwappingConceptsComplements) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 7;
    std::vector<Embedding> t, m;
    for (std::size_t i = 0; i < n; ++i) {
      t.push_back(random_unit(rng, 8));
      m.push_back(random_unit(rng, 8));
    }
    auto f = random_unit(rng, 8);
    TableContext fwd(t, m), rev(m, t);
    EXPECT_NEAR(discriminability(f, fwd.ctx) + discriminability(f, rev.ctx), 1.0, 1e-12);
  }
}

TEST(Discriminability, MatchesOracleOnRandomVectors) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 9;
    std::vector<Embedding> t, m;
    std::vector<std::vector<double>> tv, mv;
    for (std::size_t i = 0; i < n; ++i) {
      t.push_back(random_unit(rng, 16));
      m.push_back(random_unit(rng, 16));
      tv.push_back(t.back().vector);
      mv.push_back(m.back().vector);
    }
    auto f = random_unit(rng, 16);
    TableContext tc(t, m);
    EXPECT_NEAR(discriminability(f, tc.ctx), oracle_ratio_mean(f.vector, tv, mv), 1e-12);
  }
}

TEST(Generability, SyntheticEqualToMisidentifiedGivesHalf) {
  std::mt19937_64 rng(5);
  std::vector<Embedding> t, m;
  for (int i = 0; i < 4; ++i) {
    t.push_back(random_unit(rng, 8));
    m.push_back(random_unit(rng, 8));
  }
  TableContext tc(t, m);
  EXPECT_NEAR(generability(random_unit(rng, 8), m, tc.ctx), 0.5, 1e-15);
}

TEST(Generability, SinglePairWorkedValue) {
  // ratio 0.9 / (0.9 + 0.3) = 0.75
  EXPECT_NEAR(mean_ratio(std::vector<double>{0.9}, std::vector<double>{0.3}), 0.75, 1e-15);
}

TEST(Generability, MeanOfPerPairRatios) {
  // ratios 0.8 and 0.6 → 0.7
  EXPECT_NEAR(mean_ratio(std::vector<double>{0.8, 0.6}, std::vector<double>{0.2, 0.4}), 0.7, 1e-15);
}

TEST(Generability, TruncatesToShorterList) {
  std::mt19937_64 rng(8);
  std::vector<Embedding> t, m, g;
  std::vector<std::vector<double>> gv, mv;
  for (int i = 0; i < 5; ++i) {
    t.push_back(random_unit(rng, 8));
    m.push_back(random_unit(rng, 8));
  }
  for (int i = 0; i < 3; ++i) {
    g.push_back(random_unit(rng, 8));
    gv.push_back(g.back().vector);
    mv.push_back(m[i].vector);
  }
  auto f = random_unit(rng, 8);
  TableContext tc(t, m);
  EXPECT_NEAR(generability(f, g, tc.ctx), oracle_ratio_mean(f.vector, gv, mv), 1e-12);
}

TEST(Generability, EmptySyntheticIsAnError) {
  TableContext tc({unit({1, 0})}, {unit({0, 1})});
  EXPECT_THROW(generability(unit({1, 0}), {}, tc.ctx), PreconditionError);
}

namespace {

/// Feature embedding with the given D against t = e0, m = e1 in one pair.
/// 0.6 is built exactly: cos(f, t) = 0.5 and cos(f, m) = 0 give 0.75 / 1.25.
Embedding embedding_with_d(double d) {
  if (d == 0.6) return {{0.5, 0.0, std::sqrt(0.75), 0.0}, "space"};
  // (1 + a) / (2 + a + b) for f = (cos θ, sin θ) decreases on [-π/4, 3π/4].
  double lo = -std::numbers::pi / 4, hi = 3 * std::numbers::pi / 4;
  auto dv = [](double th) {
    double a = std::cos(th), b = std::sin(th);
    return (1 + a) / (2 + a + b);
  };
  for (int i = 0; i < 200; ++i) {
    double mid = (lo + hi) / 2;
    (dv(mid) > d ? lo : hi) = mid;
  }
  return {{std::cos(lo), std::sin(lo), 0.0, 0.0}, "space"};
}

struct ThresholdFixture {
  TableContext tc{{Embedding{{1, 0, 0, 0}, "space"}}, {Embedding{{0, 1, 0, 0}, "space"}}};
  std::vector<Feature> features;
  std::map<std::string, Embedding> synthetic;  // feature text → the single synthetic embedding

  void add(const std::string& text, double d, double synth_weight) {
    tc.text[text] = embedding_with_d(d);
    features.push_back(feature(text));
    // Synthetic image leaning toward the feature by synth_weight sets its G.
    const auto& f = tc.text[text].vector;
    std::vector<double> v = {synth_weight * f[0], synth_weight * f[1], synth_weight * f[2], 1.0 - synth_weight};
    synthetic[text] = unit(v);
  }

  GenerabilitySupplier supplier(std::vector<std::string>* calls = nullptr) {
    return [this, calls](const Feature& f) {
      if (calls) calls->push_back(f.text);
      return std::vector<Embedding>{synthetic.at(f.text)};
    };
  }
};

}  // namespace

TEST(Filter, ThresholdIsInclusiveAtPointSix) {
  ThresholdFixture fx;
  fx.add("below", 0.59, 0.5);
  fx.add("at", 0.60, 0.5);
  fx.add("above", 0.61, 0.5);
  EXPECT_EQ(discriminability(fx.tc.ctx.embed_text("at"), fx.tc.ctx), 0.6);
  std::vector<std::string> calls;
  auto selected = filter_and_select(fx.features, fx.tc.ctx, fx.supplier(&calls));
  EXPECT_EQ(selected.size(), 2u);
  std::map<std::string, FeatureStatus> status;
  for (const auto& f : fx.features) status[f.text] = f.status;
  EXPECT_EQ(status["below"], FeatureStatus::rejected);
  EXPECT_EQ(status["at"], FeatureStatus::selected);
  EXPECT_EQ(status["above"], FeatureStatus::selected);
  std::sort(calls.begin(), calls.end());
  EXPECT_EQ(calls, (std::vector<std::string>{"above", "at"}));
  for (const auto& f : fx.features)
    if (f.text == "below") EXPECT_FALSE(f.g_score.has_value());
}

TEST(Filter, SelectsTopFiveByGenerability) {
  ThresholdFixture fx;
  for (int i = 0; i < 8; ++i) fx.add("feature " + std::to_string(i), 0.7, 0.1 + 0.1 * i);
  auto selected = filter_and_select(fx.features, fx.tc.ctx, fx.supplier());
  ASSERT_EQ(selected.size(), 5u);
  for (std::size_t i = 1; i < selected.size(); ++i) EXPECT_GE(*selected[i - 1].g_score, *selected[i].g_score);
  std::size_t passed = 0;
  double worst_selected = 1, best_passed = 0;
  for (const auto& f : fx.features) {
    if (f.status == FeatureStatus::selected) worst_selected = std::min(worst_selected, *f.g_score);
    if (f.status == FeatureStatus::passed_d) {
      ++passed;
      best_passed = std::max(best_passed, *f.g_score);
    }
  }
  EXPECT_EQ(passed, 3u);
  EXPECT_GE(worst_selected, best_passed);
}

TEST(Filter, FewerSurvivorsThanKAreAllSelected) {
  ThresholdFixture fx;
  fx.add("a", 0.7, 0.5);
  fx.add("b", 0.65, 0.6);
  fx.add("c", 0.62, 0.7);
  fx.add("d", 0.3, 0.9);
  auto selected = filter_and_select(fx.features, fx.tc.ctx, fx.supplier());
  EXPECT_EQ(selected.size(), 3u);
}

TEST(Filter, TiesBreakByDThenId) {
  ThresholdFixture fx;
  for (const char* t : {"zeta", "alpha", "mid"}) fx.add(t, 0.7, 0.5);
  FilterParams p;
  p.top_k = 2;
  auto selected = filter_and_select(fx.features, fx.tc.ctx, fx.supplier(), p);
  ASSERT_EQ(selected.size(), 2u);
  std::vector<std::string> ids;
  for (const auto& f : fx.features) ids.push_back(f.id);
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(selected[0].id, ids[0]);
  EXPECT_EQ(selected[1].id, ids[1]);
}

TEST(Filter, NoSurvivorsWarns) {
  ThresholdFixture fx;
  fx.add("a", 0.4, 0.5);
  fx.add("b", 0.5, 0.5);
  WarningCapture cap;
  EXPECT_TRUE(filter_and_select(fx.features, fx.tc.ctx, fx.supplier()).empty());
  EXPECT_TRUE(cap.contains("discriminability"));
}

TEST(Filter, MockScoresMatchOracleOnRealEmbeddings) {
  TempDir dir;
  auto m = mock_manifest(dir / "corpus", 4, 35);
  auto gw = mock_gateway();
  auto ctx = make_pair_context(*gw, m, concept_name(0), concept_name(1), 5, 0);
  EXPECT_EQ(ctx.pair_count(), 5u);
  std::vector<std::vector<double>> tv, mv;
  for (const auto& e : ctx.target_embeddings) tv.push_back(e.vector);
  for (const auto& e : ctx.misident_embeddings) mv.push_back(e.vector);
  for (const char* text : {"crest @species-00", "long tail", "blue wings @species-01"}) {
    auto fe = gw->embed_text(text);
    EXPECT_NEAR(discriminability(fe, ctx), oracle_ratio_mean(fe.vector, tv, mv), 1e-12) << text;
  }
}
