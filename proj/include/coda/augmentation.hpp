#pragma once

// Feature-conditioned image generation and feature-satisfaction verification.
// An image is kept only when the vision model recognizes every selected
// feature in it (S = 1).

#include <map>

#include "coda/dataset.hpp"
#include "coda/feature_extraction.hpp"
#include "coda/feature_filter.hpp"
#include "coda/gateway.hpp"
#include "coda/prompts.hpp"

namespace coda {

inline constexpr std::size_t kMaxPromptFeatures = 5;

/// Text-to-image prompt naming the concept and listing 1..5 feature texts.
inline std::string build_prompt(const Concept& target, const std::vector<Feature>& features) {
  if (features.empty()) throw PreconditionError("build_prompt: at least one feature is required");
  if (features.size() > kMaxPromptFeatures)
    throw PreconditionError("build_prompt: at most " + std::to_string(kMaxPromptFeatures) + " features, got " +
                            std::to_string(features.size()));
  std::string list;
  for (std::size_t i = 0; i < features.size(); ++i) list += (i ? "; " : "") + features[i].text;
  return prompts::kImageGeneration.render({{"target", target.canonical_name}, {"features", list}});
}

inline std::string image_extension(const Bytes& b) {
  if (b.rfind("\x89PNG", 0) == 0) return ".png";
  if (b.rfind("\xFF\xD8\xFF", 0) == 0) return ".jpg";
  if (b.rfind("RIFF", 0) == 0 && b.size() > 12 && b.compare(8, 4, "WEBP") == 0) return ".webp";
  return ".img";
}

/// Generates n images, stores new ones under <root>/_synthetic/<concept>/ and
/// returns them as synthetic assets. Duplicate bytes and backend rejections
/// reduce the count (with a warning); zero images is an error.
inline std::vector<ImageAsset> generate_candidates(Gateway& gw, const fs::path& corpus_root, const std::string& concept_id,
                                                   const std::vector<std::string>& feature_ids,
                                                   const std::string& prompt, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw PreconditionError("generate_candidates: n must be >= 1");
  GeneratedImages gen = gw.generate_image(prompt, n, seed);
  if (!gen.rejections.empty())
    warn(std::to_string(gen.rejections.size()) + " of " + std::to_string(n) + " generations rejected for " + concept_id);
  std::vector<ImageAsset> out;
  std::set<std::string> seen;
  for (const auto& bytes : gen.images) {
    ImageAsset a;
    a.id = sha256_hex(bytes);
    if (!seen.insert(a.id).second) continue;
    a.provenance = Provenance::synthetic;
    a.source_features = feature_ids;
    a.path = (fs::path(kSyntheticDir) / concept_id / (a.id + image_extension(bytes))).generic_string();
    fs::path file = corpus_root / a.path;
    if (!fs::exists(file)) write_file_atomic(file, bytes);
    out.push_back(std::move(a));
  }
  if (out.size() < gen.images.size())
    warn("duplicate generated images for " + concept_id + ": " + std::to_string(gen.images.size() - out.size()) +
         " dropped, " + std::to_string(out.size()) + " of " + std::to_string(n) + " requested remain");
  return out;
}

enum class VerificationMode { boolean, confidence };

struct VerificationParams {
  VerificationMode mode = VerificationMode::boolean;
  double confidence_threshold = 0.85;
  std::size_t workers = 4;
  DecodeParams decode;
};

/// First number in [0, 1] appearing in a reply.
inline std::optional<double> parse_confidence(std::string_view reply) {
  for (std::size_t i = 0; i < reply.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(reply[i]))) continue;
    std::size_t j = i;
    while (j < reply.size() && (std::isdigit(static_cast<unsigned char>(reply[j])) || reply[j] == '.')) ++j;
    try {
      double v = std::stod(std::string(reply.substr(i, j - i)));
      if (v >= 0.0 && v <= 1.0) return v;
    } catch (const std::exception&) {
    }
    i = j;
  }
  return std::nullopt;
}

/// M(f, image): strict yes/no (unparseable → false). In confidence mode the
/// reply must also carry a confidence ≥ the threshold.
inline bool feature_recognized(Gateway& gw, const Bytes& image, const Feature& f, const VerificationParams& params) {
  std::string prompt = prompts::kVerifyFeature.render({{"feature", f.text}});
  if (params.mode == VerificationMode::confidence)
    prompt += "\nAfter yes or no, give your confidence as a number between 0 and 1.";
  std::string reply = gw.vision_chat(image, user_prompt(prompt), params.decode);
  bool yes = prompts::parse_yes_no(reply).value_or(false);
  if (!yes || params.mode == VerificationMode::boolean) return yes;
  auto conf = parse_confidence(reply);
  return conf && *conf >= params.confidence_threshold;
}

/// S = (# features recognized) / |F|, one vision query per feature.
inline double satisfaction(Gateway& gw, const Bytes& image, const std::vector<Feature>& features,
                           const VerificationParams& params = {}) {
  if (features.empty()) throw PreconditionError("satisfaction: no features");
  std::size_t yes = 0;
  for (const auto& f : features) yes += feature_recognized(gw, image, f, params) ? 1 : 0;
  return static_cast<double>(yes) / static_cast<double>(features.size());
}

/// Records S on every candidate and returns the S = 1 subset ordered by id.
/// Candidates whose verification fails at the backend are flagged
/// "unverified" and never kept.
inline std::vector<ImageAsset> filter_images(Gateway& gw, const fs::path& corpus_root, std::vector<ImageAsset>& candidates,
                                             const std::vector<Feature>& features, const VerificationParams& params = {}) {
  parallel_for(candidates.size(), params.workers, [&](std::size_t i) {
    ImageAsset& a = candidates[i];
    try {
      a.satisfaction = satisfaction(gw, read_file(corpus_root / a.path), features, params);
      a.extra.erase("unverified");
    } catch (const BackendError& e) {
      a.satisfaction.reset();
      a.extra["unverified"] = true;
      warn("verification failed for " + a.id + ": " + e.what());
    }
  });
  std::vector<ImageAsset> kept;
  for (const auto& a : candidates)
    if (a.satisfaction && *a.satisfaction == 1.0) kept.push_back(a);
  std::sort(kept.begin(), kept.end(), [](const ImageAsset& x, const ImageAsset& y) { return x.id < y.id; });
  if (kept.empty() && !candidates.empty()) warn("no generated image satisfied every feature");
  return kept;
}

enum class Ranking { mean_similarity, seeded };

inline std::string to_string(Ranking r) { return r == Ranking::mean_similarity ? "mean_similarity" : "seeded"; }

struct AugmentationBatch {
  std::string target;
  std::string misidentified;
  std::vector<std::string> features;   // selected feature ids
  std::vector<ImageAsset> candidates;  // every generated asset with S recorded
  std::vector<std::string> kept;       // S = 1 assets, best first
  std::map<std::string, double> rank_scores;
  std::string prompt;
  std::string prompt_template_hash;
  std::uint64_t seed = 0;
  Ranking ranking = Ranking::mean_similarity;

  json to_json() const {
    json cands = json::array();
    for (const auto& a : candidates) cands.push_back(a.to_json());
    return {{"record", "batch"},
            {"target", target},
            {"misidentified", misidentified},
            {"features", features},
            {"candidates", cands},
            {"kept", kept},
            {"rank_scores", rank_scores},
            {"prompt", prompt},
            {"prompt_template_hash", prompt_template_hash},
            {"seed", seed},
            {"ranking", to_string(ranking)}};
  }

  static AugmentationBatch from_json(const json& j) {
    AugmentationBatch b;
    b.target = j.at("target").get<std::string>();
    b.misidentified = j.value("misidentified", "");
    b.features = j.at("features").get<std::vector<std::string>>();
    for (const auto& c : j.at("candidates")) b.candidates.push_back(ImageAsset::from_json(c));
    b.kept = j.at("kept").get<std::vector<std::string>>();
    b.rank_scores = j.value("rank_scores", std::map<std::string, double>{});
    b.prompt = j.value("prompt", "");
    b.prompt_template_hash = j.value("prompt_template_hash", "");
    b.seed = j.value("seed", std::uint64_t{0});
    b.ranking = j.value("ranking", "mean_similarity") == "seeded" ? Ranking::seeded : Ranking::mean_similarity;
    return b;
  }

  const ImageAsset& candidate(const std::string& id) const {
    for (const auto& a : candidates)
      if (a.id == id) return a;
    throw PreconditionError("asset " + id + " is not a candidate of this batch");
  }
};

inline std::vector<AugmentationBatch> load_batches(const fs::path& p) {
  std::vector<AugmentationBatch> out;
  for (const auto& r : read_records(p)) out.push_back(AugmentationBatch::from_json(r));
  return out;
}

inline void save_batches(const fs::path& p, const std::vector<AugmentationBatch>& batches) {
  std::vector<json> records;
  for (const auto& b : batches) records.push_back(b.to_json());
  write_records(p, records);
}

struct AugmentParams {
  std::size_t n = 8;
  Ranking ranking = Ranking::mean_similarity;
  VerificationParams verification;

  json to_json() const {
    return {{"n", n},
            {"ranking", to_string(ranking)},
            {"verification_mode", verification.mode == VerificationMode::boolean ? "boolean" : "confidence"},
            {"confidence_threshold", verification.confidence_threshold}};
  }
};

/// Orders kept assets best first. mean_similarity: mean s(f, i) over the
/// selected features, descending, ties by id. seeded: id order shuffled with
/// the batch seed.
inline void rank_kept(Gateway& gw, const fs::path& corpus_root, AugmentationBatch& batch,
                      const std::vector<Feature>& features) {
  std::vector<std::string> ids = batch.kept;
  std::sort(ids.begin(), ids.end());
  batch.rank_scores.clear();
  if (batch.ranking == Ranking::seeded) {
    seeded_shuffle(ids, derive_seed(batch.seed, "rank"));
    batch.kept = ids;
    return;
  }
  std::vector<Embedding> feature_embeddings;
  for (const auto& f : features) feature_embeddings.push_back(gw.embed_text(f.text));
  for (const auto& id : ids) {
    Embedding img = gw.embed_image(read_file(corpus_root / batch.candidate(id).path));
    double sum = 0.0;
    for (const auto& fe : feature_embeddings) sum += shifted_cosine(fe, img);
    batch.rank_scores[id] = sum / static_cast<double>(feature_embeddings.size());
  }
  std::stable_sort(ids.begin(), ids.end(),
                   [&](const std::string& a, const std::string& b) { return batch.rank_scores[a] > batch.rank_scores[b]; });
  batch.kept = ids;
}

/// Full augmentation for one pair: prompt, generation, verification, ranking.
inline AugmentationBatch augment(Gateway& gw, const CorpusManifest& manifest, const std::string& target,
                                 const std::string& misidentified, const std::vector<Feature>& selected,
                                 std::uint64_t seed, const AugmentParams& params = {}) {
  AugmentationBatch b;
  b.target = target;
  b.misidentified = misidentified;
  for (const auto& f : selected) b.features.push_back(f.id);
  b.prompt = build_prompt(manifest.get_concept(target), selected);
  b.prompt_template_hash = prompts::kImageGeneration.hash();
  b.seed = derive_seed(seed, "augment/" + target + "/" + misidentified);
  b.ranking = params.ranking;
  b.candidates = generate_candidates(gw, manifest.root, target, b.features, b.prompt, params.n, b.seed);
  for (const auto& a : filter_images(gw, manifest.root, b.candidates, selected, params.verification))
    b.kept.push_back(a.id);
  rank_kept(gw, manifest.root, b, selected);
  return b;
}

}  // namespace coda
