#include <gtest/gtest.h>

#include "support.hpp"

using namespace coda;
using namespace coda::testing;

namespace {

Feature feature(const std::string& text, const std::string& target = "species-00") {
  auto f = make_feature(text, FeatureKind::textual, target, std::nullopt);
  f->misidentified = "species-01";
  return *f;
}

std::vector<Feature> features(std::initializer_list<const char*> texts) {
  std::vector<Feature> out;
  for (const char* t : texts) out.push_back(feature(t));
  return out;
}

/// Feature text embedded in a verification prompt.
std::string asked_feature(const Messages& m) {
  const std::string& t = m.back().text;
  auto pos = t.find("Feature: ");
  return pos == std::string::npos ? "" : t.substr(pos + 9);
}

struct AugmentFixture : ::testing::Test {
  TempDir dir;
  CorpusManifest manifest = mock_manifest(dir / "corpus", 2, 35);
  std::shared_ptr<ScriptedBackend> backend = std::make_shared<ScriptedBackend>();
  std::shared_ptr<Gateway> gw = gateway_for(backend);

  void SetUp() override {
    backend->on_generate = [](const std::string& prompt, std::size_t n, std::uint64_t seed) {
      GeneratedImages g;
      for (std::size_t i = 0; i < n; ++i)
        g.images.push_back("generated " + std::to_string(seed) + "/" + std::to_string(i) + " " + prompt);
      return g;
    };
  }

  std::vector<ImageAsset> candidates(std::size_t n) {
    return generate_candidates(*gw, manifest.root, "species-00", {"f"}, "a prompt", n, 1);
  }
};

}  // namespace

TEST(BuildPrompt, NamesConceptAndEveryFeature) {
  Concept c;
  c.id = "lears_macaw";
  c.canonical_name = "lears macaw";
  auto fs = features({"blue plumage", "yellow eye ring", "large curved beak"});
  std::string p = build_prompt(c, fs);
  EXPECT_NE(p.find("lears macaw"), std::string::npos);
  for (const auto& f : fs) EXPECT_NE(p.find(f.text), std::string::npos);
}

TEST(BuildPrompt, AcceptsOneToFiveFeatures) {
  Concept c;
  c.id = c.canonical_name = "x";
  EXPECT_THROW(build_prompt(c, {}), PreconditionError);
  EXPECT_NO_THROW(build_prompt(c, features({"a"})));
  EXPECT_NO_THROW(build_prompt(c, features({"a", "b", "c", "d", "e"})));
  EXPECT_THROW(build_prompt(c, features({"a", "b", "c", "d", "e", "f"})), PreconditionError);
}

TEST_F(AugmentFixture, GeneratesRequestedCountAsSyntheticAssets) {
  auto many = candidates(50);
  EXPECT_EQ(many.size(), 50u);
  for (const auto& a : many) {
    EXPECT_EQ(a.provenance, Provenance::synthetic);
    EXPECT_EQ(a.source_features, std::vector<std::string>{"f"});
    EXPECT_EQ(a.id, sha256_hex(read_file(manifest.root / a.path)));
    EXPECT_EQ(a.path.rfind("_synthetic/species-00/", 0), 0u) << a.path;
  }
  EXPECT_EQ(generate_candidates(*gw, manifest.root, "species-00", {"f"}, "other", 1, 1).size(), 1u);
}

TEST_F(AugmentFixture, DuplicateBytesReduceCountWithWarning) {
  backend->on_generate = [](const std::string&, std::size_t n, std::uint64_t) {
    GeneratedImages g;
    for (std::size_t i = 0; i < n; ++i) g.images.push_back(i < 2 ? "same" : "img" + std::to_string(i));
    return g;
  };
  WarningCapture cap;
  EXPECT_EQ(candidates(5).size(), 4u);
  EXPECT_TRUE(cap.contains("duplicate"));
}

TEST_F(AugmentFixture, ZeroRequestedIsAnError) { EXPECT_THROW(candidates(0), PreconditionError); }

TEST_F(AugmentFixture, SatisfactionIsFractionRecognized) {
  auto fs = features({"a", "b", "c", "d"});
  backend->on_vision = [](const Bytes&, const Messages& m) { return asked_feature(m) == "d" ? "No." : "Yes."; };
  EXPECT_DOUBLE_EQ(satisfaction(*gw, "image one", fs), 0.75);
  backend->on_vision = [](const Bytes&, const Messages&) { return "yes"; };
  EXPECT_DOUBLE_EQ(satisfaction(*gw, "image two", fs), 1.0);
}

TEST_F(AugmentFixture, UnparseableReplyCountsAsNo) {
  auto fs = features({"a", "b"});
  backend->on_vision = [](const Bytes&, const Messages& m) {
    return asked_feature(m) == "a" ? "yes" : "I cannot tell from this angle";
  };
  EXPECT_DOUBLE_EQ(satisfaction(*gw, "image", fs), 0.5);
}

TEST_F(AugmentFixture, KeepsExactlyTheFullySatisfiedImages) {
  auto fs = features({"a", "b", "c", "d"});
  auto cands = candidates(3);
  std::string partial = cands[1].path;
  backend->on_vision = [&](const Bytes& img, const Messages& m) {
    bool is_partial = img == read_file(manifest.root / partial);
    return is_partial && asked_feature(m) == "c" ? "no" : "yes";
  };
  auto kept = filter_images(*gw, manifest.root, cands, fs);
  ASSERT_EQ(kept.size(), 2u);
  for (const auto& a : cands) EXPECT_DOUBLE_EQ(*a.satisfaction, a.path == partial ? 0.75 : 1.0);
  for (const auto& a : kept) EXPECT_NE(a.path, partial);
  EXPECT_LT(kept[0].id, kept[1].id);
}

TEST_F(AugmentFixture, NothingKeptWarns) {
  auto fs = features({"a", "b"});
  auto cands = candidates(3);
  backend->on_vision = [](const Bytes&, const Messages& m) { return asked_feature(m) == "a" ? "yes" : "no"; };
  WarningCapture cap;
  EXPECT_TRUE(filter_images(*gw, manifest.root, cands, fs).empty());
  EXPECT_TRUE(cap.contains("no generated image"));
  for (const auto& a : cands) EXPECT_DOUBLE_EQ(*a.satisfaction, 0.5);
}

TEST_F(AugmentFixture, BackendFailureMarksUnverified) {
  auto fs = features({"a"});
  auto cands = candidates(2);
  std::string broken = cands[0].path;
  backend->on_vision = [&](const Bytes& img, const Messages&) -> std::string {
    if (img == read_file(manifest.root / broken)) throw TransportError("bad request", false, 400);
    return "yes";
  };
  WarningCapture cap;
  auto kept = filter_images(*gw, manifest.root, cands, fs);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_NE(kept[0].path, broken);
  for (const auto& a : cands)
    if (a.path == broken) {
      EXPECT_FALSE(a.satisfaction.has_value());
      EXPECT_EQ(a.extra.value("unverified", false), true);
    }
}

TEST_F(AugmentFixture, ConfidenceModeNeedsThreshold) {
  auto fs = features({"a", "b"});
  VerificationParams p;
  p.mode = VerificationMode::confidence;
  backend->on_vision = [](const Bytes&, const Messages& m) {
    return asked_feature(m).rfind("a", 0) == 0 ? "yes 0.95" : "yes 0.6";
  };
  EXPECT_DOUBLE_EQ(satisfaction(*gw, "img", fs, p), 0.5);
  EXPECT_EQ(parse_confidence("Yes, confidence 0.9"), 0.9);
  EXPECT_EQ(parse_confidence("yes 7 then 1"), 1.0);
  EXPECT_FALSE(parse_confidence("yes").has_value());
}

TEST(Augment, EndToEndOnMockKeepsOnlySatisfiedAndRanks) {
  TempDir dir;
  auto m = mock_manifest(dir / "corpus", 2, 35);
  mock::MockConfig mc;
  mc.answer_policy = mock::AnswerPolicy::oracle;
  auto gw = mock_gateway(mc);
  auto fs = std::vector<Feature>{feature("crest @species-00"), feature("long tail @species-00")};
  AugmentParams p;
  p.n = 12;
  auto b = augment(*gw, m, "species-00", "species-01", fs, 3, p);
  EXPECT_LE(b.kept.size(), b.candidates.size());
  std::set<std::string> satisfied;
  for (const auto& a : b.candidates)
    if (a.satisfaction && *a.satisfaction == 1.0) satisfied.insert(a.id);
  EXPECT_EQ(std::set<std::string>(b.kept.begin(), b.kept.end()), satisfied);
  for (std::size_t i = 1; i < b.kept.size(); ++i) EXPECT_GE(b.rank_scores[b.kept[i - 1]], b.rank_scores[b.kept[i]]);

  auto again = augment(*gw, m, "species-00", "species-01", fs, 3, p);
  EXPECT_EQ(again.to_json(), b.to_json());
}

TEST(Augment, SeededRankingIsReproducible) {
  TempDir dir;
  auto m = mock_manifest(dir / "corpus", 2, 35);
  auto gw = mock_gateway();
  AugmentParams p;
  p.n = 10;
  p.ranking = Ranking::seeded;
  auto fs = std::vector<Feature>{feature("crest @species-00")};
  auto a = augment(*gw, m, "species-00", "species-01", fs, 9, p);
  auto b = augment(*gw, m, "species-00", "species-01", fs, 9, p);
  EXPECT_EQ(a.kept, b.kept);
  EXPECT_TRUE(a.rank_scores.empty());
}

TEST(Augment, BatchJsonRoundTrip) {
  AugmentationBatch b;
  b.target = "t";
  b.misidentified = "m";
  b.features = {"f1"};
  ImageAsset a;
  a.id = "abc";
  a.path = "_synthetic/t/abc.img";
  a.provenance = Provenance::synthetic;
  a.satisfaction = 1.0;
  b.candidates = {a};
  b.kept = {"abc"};
  b.rank_scores = {{"abc", 0.7}};
  b.seed = 42;
  EXPECT_EQ(AugmentationBatch::from_json(b.to_json()).to_json(), b.to_json());
}
