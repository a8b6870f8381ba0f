#include <gtest/gtest.h>

#include "support.hpp"

using namespace coda;
using coda::testing::TempDir;

namespace {

void write_images(const fs::path& dir, std::size_t n, const std::string& tag) {
  for (std::size_t i = 0; i < n; ++i) write_file_atomic(dir / ("img" + std::to_string(i) + ".jpg"), tag + std::to_string(i));
}

}  // namespace

TEST(Ingest, CountsConceptsAndAssets) {
  TempDir dir;
  write_images(dir / "lears_macaw", 35, "a");
  write_images(dir / "hyacinth_macaw", 35, "b");
  auto m = ingest(dir.path());
  ASSERT_EQ(m.concepts.size(), 2u);
  EXPECT_EQ(m.assets.size(), 70u);
  EXPECT_EQ(m.get_concept("lears_macaw").canonical_name, "lears macaw");
  for (const auto& [id, a] : m.assets) {
    EXPECT_EQ(id, sha256_hex(read_file(dir.path() / a.path)));
    EXPECT_EQ(a.provenance, Provenance::real);
  }
}

TEST(Ingest, EmptyConceptIsSkippedWithWarning) {
  TempDir dir;
  write_images(dir / "a", 3, "a");
  fs::create_directories(dir / "empty");
  WarningCapture cap;
  auto m = ingest(dir.path());
  EXPECT_EQ(m.concepts.size(), 1u);
  EXPECT_FALSE(m.has_concept("empty"));
  EXPECT_TRUE(cap.contains("empty"));
}

TEST(Ingest, DuplicateBytesWithinConceptAreDeduplicated) {
  TempDir dir;
  write_file_atomic(dir / "a" / "x.jpg", "same");
  write_file_atomic(dir / "a" / "y.jpg", "same");
  WarningCapture cap;
  auto m = ingest(dir.path());
  EXPECT_EQ(m.assets.size(), 1u);
  EXPECT_EQ(m.get_concept("a").images.size(), 1u);
  EXPECT_TRUE(cap.contains("duplicate"));
}

TEST(Ingest, SkipsSyntheticAndHiddenDirectories) {
  TempDir dir;
  write_images(dir / "a", 2, "a");
  write_images(dir / "_synthetic" / "a", 2, "s");
  write_images(dir / ".cache", 2, "c");
  auto m = ingest(dir.path());
  EXPECT_EQ(m.concepts.size(), 1u);
  EXPECT_EQ(m.assets.size(), 2u);
}

TEST(Ingest, MissingRootIsAnIngestionError) {
  TempDir dir;
  EXPECT_THROW(ingest(dir / "nope"), IngestionError);
}

TEST(Split, FiveFifteenFifteenDisjoint) {
  TempDir dir;
  write_images(dir / "a", 35, "a");
  auto m = split(ingest(dir.path(), {}, 11), 5, 15, 15);
  const auto& c = m.get_concept("a");
  EXPECT_EQ(c.split("train").size(), 5u);
  EXPECT_EQ(c.split("val").size(), 15u);
  EXPECT_EQ(c.split("test").size(), 15u);
  std::set<std::string> all;
  for (const auto& s : kSplitNames) all.insert(c.split(s).begin(), c.split(s).end());
  EXPECT_EQ(all.size(), 35u);
}

TEST(Split, DegenerateAllTest) {
  TempDir dir;
  write_images(dir / "a", 35, "a");
  auto m = split(ingest(dir.path()), 0, 0, 35);
  const auto& c = m.get_concept("a");
  EXPECT_TRUE(c.split("train").empty());
  EXPECT_EQ(c.split("test").size(), 35u);
}

TEST(Split, DeterministicUnderSeedAndSeedSensitive) {
  TempDir dir;
  write_images(dir / "a", 35, "a");
  auto base = ingest(dir.path(), {}, 5);
  auto a = split(base, 5, 15, 15);
  auto b = split(base, 5, 15, 15);
  EXPECT_EQ(a.get_concept("a").splits, b.get_concept("a").splits);
  base.seed = 6;
  auto c = split(base, 5, 15, 15);
  EXPECT_NE(a.get_concept("a").splits, c.get_concept("a").splits);
}

TEST(Split, ShortConceptsAreListed) {
  TempDir dir;
  write_images(dir / "big", 35, "a");
  write_images(dir / "small", 10, "b");
  try {
    split(ingest(dir.path()), 5, 15, 15);
    FAIL() << "expected PreconditionError";
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("small"), std::string::npos);
    EXPECT_EQ(std::string(e.what()).find("big"), std::string::npos);
  }
}

TEST(Verify, PristineMissingAndAltered) {
  TempDir dir;
  write_images(dir / "a", 4, "a");
  auto m = ingest(dir.path());
  EXPECT_TRUE(verify(m).empty());

  fs::remove(dir / "a" / "img0.jpg");
  auto v = verify(m);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, "missing file");

  write_file_atomic(dir / "a" / "img0.jpg", "a0");
  write_file_atomic(dir / "a" / "img1.jpg", "tampered");
  v = verify(m);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, "hash mismatch");
}

TEST(Manifest, RoundTripPreservesUnknownFieldsAndRelativeRoot) {
  TempDir dir;
  write_images(dir / "corpus" / "a", 3, "a");
  auto m = split(ingest(dir / "corpus", {}, 9), 1, 1, 1);
  m.concepts[0].extra["wikidata"] = "Q123";
  m.concepts[0].supercategory = "Birds";
  m.assets.begin()->second.extra["license"] = "cc-by";
  m.header_extra["note"] = "kept";
  m.save(dir / "manifest.jsonl");

  auto records = read_records(dir / "manifest.jsonl");
  EXPECT_EQ(records.front()["root"], "corpus");

  auto back = CorpusManifest::load(dir / "manifest.jsonl");
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.root, fs::absolute(dir / "corpus").lexically_normal());
  EXPECT_EQ(back.concepts[0].extra["wikidata"], "Q123");
  EXPECT_EQ(back.concepts[0].supercategory, std::optional<std::string>("Birds"));
  EXPECT_EQ(back.assets.begin()->second.extra["license"], "cc-by");
  EXPECT_EQ(back.header_extra["note"], "kept");
  EXPECT_EQ(back.concepts[0].splits, m.concepts[0].splits);
  EXPECT_EQ(back.to_records(dir / "manifest.jsonl"), records);
}

TEST(Manifest, MissingHeaderIsAnIntegrityError) {
  TempDir dir;
  write_records(dir / "m.jsonl", {{{"record", "concept"}, {"id", "a"}}});
  EXPECT_THROW(CorpusManifest::load(dir / "m.jsonl"), IntegrityError);
}
