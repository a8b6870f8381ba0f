#pragma once

// Discriminability / Generability scoring and top-k feature selection.
//
//   s(f, i) = (1 + cos(embed_text(f), embed_image(i))) / 2            ∈ [0, 1]
//   D(f)    = mean_i  s(f, t_i) / (s(f, t_i) + s(f, m_i))
//   G(f)    = mean_i  s(f, g_i) / (s(f, g_i) + s(f, m_i))
//
// t_i / m_i are target / misidentified real images index-paired after a
// seeded shuffle and truncated to the same length; g_i are synthetic images
// generated for f alone. A term whose denominator is 0 counts as 0.5.

#include <functional>
#include <map>
#include <span>

#include "coda/dataset.hpp"
#include "coda/feature_extraction.hpp"
#include "coda/gateway.hpp"

namespace coda {

/// Shifted cosine of two unit embeddings, clamped to [0, 1].
inline double shifted_cosine(const Embedding& text, const Embedding& image) {
  return std::clamp((1.0 + text.dot(image)) / 2.0, 0.0, 1.0);
}

inline double similarity(Gateway& gw, const std::string& feature_text, const Bytes& image) {
  return shifted_cosine(gw.embed_text(feature_text), gw.embed_image(image));
}

/// s_a / (s_a + s_b), or 0.5 when both are zero.
inline double likelihood_ratio(double s_a, double s_b) {
  const double denom = s_a + s_b;
  return denom == 0.0 ? 0.5 : s_a / denom;
}

/// Mean of likelihood_ratio over index-aligned similarity lists.
inline double mean_ratio(std::span<const double> numerator_sims, std::span<const double> other_sims) {
  if (numerator_sims.empty() || numerator_sims.size() != other_sims.size())
    throw PreconditionError("mean_ratio: need equal, nonempty similarity lists");
  double sum = 0.0;
  for (std::size_t i = 0; i < numerator_sims.size(); ++i) sum += likelihood_ratio(numerator_sims[i], other_sims[i]);
  return sum / static_cast<double>(numerator_sims.size());
}

/// Paired real images of a (target, misidentified) pair with their embeddings.
struct ScoringContext {
  std::vector<std::string> target_real;   // t_i
  std::vector<std::string> misident_real; // m_i
  std::vector<Embedding> target_embeddings;
  std::vector<Embedding> misident_embeddings;
  std::function<Embedding(const std::string&)> embed_text;

  std::size_t pair_count() const { return target_real.size(); }

  std::vector<double> target_similarities(const Embedding& f) const { return sims(f, target_embeddings); }
  std::vector<double> misident_similarities(const Embedding& f) const { return sims(f, misident_embeddings); }

  static std::vector<double> sims(const Embedding& f, const std::vector<Embedding>& images) {
    std::vector<double> out;
    out.reserve(images.size());
    for (const auto& e : images) out.push_back(shifted_cosine(f, e));
    return out;
  }
};

/// Shuffles each id list with its own seed, truncates both to
/// min(max_pairs, |target|, |misidentified|) and embeds the survivors.
inline ScoringContext make_scoring_context(Gateway& gw, const CorpusManifest& manifest,
                                           std::vector<std::string> target_images,
                                           std::vector<std::string> misident_images, std::size_t max_pairs,
                                           std::uint64_t seed) {
  if (target_images.empty() || misident_images.empty())
    throw PreconditionError("scoring context needs real images of both concepts");
  std::sort(target_images.begin(), target_images.end());
  std::sort(misident_images.begin(), misident_images.end());
  seeded_shuffle(target_images, derive_seed(seed, "pairing/target"));
  seeded_shuffle(misident_images, derive_seed(seed, "pairing/misidentified"));
  const std::size_t n = std::min({max_pairs, target_images.size(), misident_images.size()});
  if (n == 0) throw PreconditionError("scoring context: pair count must be >= 1");
  target_images.resize(n);
  misident_images.resize(n);
  ScoringContext ctx;
  ctx.target_real = std::move(target_images);
  ctx.misident_real = std::move(misident_images);
  for (const auto& id : ctx.target_real) ctx.target_embeddings.push_back(gw.embed_image(manifest.read_asset(id)));
  for (const auto& id : ctx.misident_real) ctx.misident_embeddings.push_back(gw.embed_image(manifest.read_asset(id)));
  ctx.embed_text = [&gw](const std::string& text) { return gw.embed_text(text); };
  return ctx;
}

/// Context for a pair from the manifest's train splits (all images when a
/// concept has no split).
inline ScoringContext make_pair_context(Gateway& gw, const CorpusManifest& manifest, const std::string& target,
                                        const std::string& misidentified, std::size_t max_pairs, std::uint64_t seed) {
  auto pick = [&](const std::string& id) {
    const Concept& c = manifest.get_concept(id);
    return c.split("train").empty() ? c.images : c.split("train");
  };
  return make_scoring_context(gw, manifest, pick(target), pick(misidentified), max_pairs,
                              derive_seed(seed, "context/" + target + "/" + misidentified));
}

inline double discriminability(const Embedding& feature, const ScoringContext& ctx) {
  if (ctx.pair_count() == 0) throw PreconditionError("discriminability: empty image lists");
  return mean_ratio(ctx.target_similarities(feature), ctx.misident_similarities(feature));
}

inline double discriminability(const Feature& f, const ScoringContext& ctx) {
  return discriminability(ctx.embed_text(f.text), ctx);
}

/// Pairs synthetic i with misidentified real i; |I| = min of the two lengths.
inline double generability(const Embedding& feature, const std::vector<Embedding>& synthetic, const ScoringContext& ctx) {
  if (synthetic.empty() || ctx.pair_count() == 0) throw PreconditionError("generability: empty image lists");
  const std::size_t n = std::min(synthetic.size(), ctx.pair_count());
  std::vector<double> syn, mis;
  for (std::size_t i = 0; i < n; ++i) {
    syn.push_back(shifted_cosine(feature, synthetic[i]));
    mis.push_back(shifted_cosine(feature, ctx.misident_embeddings[i]));
  }
  return mean_ratio(syn, mis);
}

inline double generability(const Feature& f, const std::vector<Embedding>& synthetic, const ScoringContext& ctx) {
  return generability(ctx.embed_text(f.text), synthetic, ctx);
}

/// Produces embeddings of synthetic images generated for one feature.
using GenerabilitySupplier = std::function<std::vector<Embedding>(const Feature&)>;

struct FilterParams {
  double d_threshold = 0.6;
  std::size_t top_k = 5;
  std::size_t max_pairs = 5;
  std::size_t workers = 4;

  json to_json() const {
    return {{"d_threshold", d_threshold}, {"top_k", top_k}, {"max_pairs", max_pairs}, {"workers", workers}};
  }
};

/// Scores every feature of one pair in place and returns the selected ones.
/// D < d_threshold → rejected. G is computed only for survivors; the top k by
/// (G desc, D desc, id asc) become selected, the remaining survivors passed_d.
inline std::vector<Feature> filter_and_select(std::vector<Feature>& features, const ScoringContext& ctx,
                                              const GenerabilitySupplier& gen, const FilterParams& params = {}) {
  parallel_for(features.size(), params.workers, [&](std::size_t i) {
    Feature& f = features[i];
    f.d_score = discriminability(f, ctx);
    f.advance(*f.d_score < params.d_threshold ? FeatureStatus::rejected : FeatureStatus::passed_d);
  });

  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < features.size(); ++i)
    if (features[i].status == FeatureStatus::passed_d) survivors.push_back(i);
  if (survivors.empty()) {
    if (!features.empty())
      warn("no feature of " + features.front().target + " vs " + features.front().misidentified +
           " passed the discriminability threshold");
    return {};
  }

  parallel_for(survivors.size(), params.workers, [&](std::size_t s) {
    Feature& f = features[survivors[s]];
    f.g_score = generability(f, gen(f), ctx);
  });

  std::sort(survivors.begin(), survivors.end(), [&](std::size_t a, std::size_t b) {
    const Feature& x = features[a];
    const Feature& y = features[b];
    if (*x.g_score != *y.g_score) return *x.g_score > *y.g_score;
    if (*x.d_score != *y.d_score) return *x.d_score > *y.d_score;
    return x.id < y.id;
  });
  std::vector<Feature> selected;
  for (std::size_t r = 0; r < survivors.size() && r < params.top_k; ++r) {
    Feature& f = features[survivors[r]];
    f.advance(FeatureStatus::selected);
    selected.push_back(f);
  }
  return selected;
}

}  // namespace coda
