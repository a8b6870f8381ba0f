#pragma once

// Candidate feature extraction: textual (chat model knowledge) and visual
// (vision model over real images, merged by a follow-up chat call), each
// optionally contrastive against the misidentified concept.

#include <map>
#include <set>

#include "coda/dataset.hpp"
#include "coda/gateway.hpp"
#include "coda/pair_discovery.hpp"
#include "coda/prompts.hpp"

namespace coda {

inline constexpr std::size_t kMaxFeatureLength = 200;

enum class FeatureKind { textual, visual };
enum class FeatureStatus { candidate, passed_d, selected, rejected };

inline std::string to_string(FeatureKind k) { return k == FeatureKind::textual ? "textual" : "visual"; }

inline std::string to_string(FeatureStatus s) {
  switch (s) {
    case FeatureStatus::candidate: return "candidate";
    case FeatureStatus::passed_d: return "passed_d";
    case FeatureStatus::selected: return "selected";
    case FeatureStatus::rejected: return "rejected";
  }
  return "?";
}

inline FeatureStatus status_from_string(const std::string& s) {
  if (s == "candidate") return FeatureStatus::candidate;
  if (s == "passed_d") return FeatureStatus::passed_d;
  if (s == "selected") return FeatureStatus::selected;
  if (s == "rejected") return FeatureStatus::rejected;
  throw IntegrityError("unknown feature status: " + s);
}

struct Feature {
  std::string id;  // sha256 of normalized text
  std::string text;
  FeatureKind kind = FeatureKind::textual;
  bool contrastive = false;
  std::string target;
  std::optional<std::string> against;
  /// Misidentified concept of the pair this feature was extracted for; the
  /// concept Discriminability is scored against, contrastive or not.
  std::string misidentified;
  std::optional<double> d_score;
  std::optional<double> g_score;
  FeatureStatus status = FeatureStatus::candidate;
  json extra = json::object();

  /// Forward-only: candidate → passed_d → selected, or → rejected from any
  /// non-terminal state.
  void advance(FeatureStatus next) {
    auto rank = [](FeatureStatus s) {
      switch (s) {
        case FeatureStatus::candidate: return 0;
        case FeatureStatus::passed_d: return 1;
        case FeatureStatus::selected: return 2;
        case FeatureStatus::rejected: return 3;
      }
      return 0;
    };
    const bool terminal = status == FeatureStatus::selected || status == FeatureStatus::rejected;
    if (next == status) return;
    if (terminal || (next != FeatureStatus::rejected && rank(next) != rank(status) + 1))
      throw IntegrityError("illegal feature status transition " + to_string(status) + " -> " + to_string(next) +
                           " for " + id);
    status = next;
  }

  json to_json() const {
    json j = extra;
    j["id"] = id;
    j["text"] = text;
    j["kind"] = to_string(kind);
    j["contrastive"] = contrastive;
    j["target"] = target;
    j["against"] = against ? json(*against) : json(nullptr);
    j["misidentified"] = misidentified;
    j["d_score"] = d_score ? json(*d_score) : json(nullptr);
    j["g_score"] = g_score ? json(*g_score) : json(nullptr);
    j["status"] = to_string(status);
    return j;
  }

  static Feature from_json(const json& j) {
    Feature f;
    f.id = j.at("id").get<std::string>();
    f.text = j.at("text").get<std::string>();
    f.kind = j.at("kind").get<std::string>() == "visual" ? FeatureKind::visual : FeatureKind::textual;
    f.contrastive = j.value("contrastive", false);
    f.target = j.at("target").get<std::string>();
    if (j.contains("against") && !j["against"].is_null()) f.against = j["against"].get<std::string>();
    f.misidentified = j.value("misidentified", f.against.value_or(""));
    if (j.contains("d_score") && !j["d_score"].is_null()) f.d_score = j["d_score"].get<double>();
    if (j.contains("g_score") && !j["g_score"].is_null()) f.g_score = j["g_score"].get<double>();
    f.status = status_from_string(j.value("status", "candidate"));
    f.extra = unknown_fields(j, {"id", "text", "kind", "contrastive", "target", "against", "misidentified", "d_score",
                                 "g_score", "status"});
    if (f.contrastive && (!f.against || *f.against == f.target))
      throw IntegrityError("contrastive feature " + f.id + " needs an against concept distinct from its target");
    return f;
  }
};

inline std::vector<Feature> load_features(const fs::path& p) {
  std::vector<Feature> out;
  for (const auto& r : read_records(p)) out.push_back(Feature::from_json(r));
  return out;
}

inline void save_features(const fs::path& p, const std::vector<Feature>& features) {
  std::vector<json> records;
  for (const auto& f : features) records.push_back(f.to_json());
  write_records(p, records);
}

/// Builds a candidate feature from raw text; nullopt (with a warning) when the
/// normalized text is empty or longer than kMaxFeatureLength code points.
inline std::optional<Feature> make_feature(std::string_view raw, FeatureKind kind, const std::string& target,
                                           const std::optional<std::string>& against) {
  std::string text = normalize_text(raw);
  if (text.empty()) return std::nullopt;
  if (utf8_length(text) > kMaxFeatureLength) {
    warn("dropping feature longer than " + std::to_string(kMaxFeatureLength) + " characters for " + target);
    return std::nullopt;
  }
  Feature f;
  f.id = sha256_hex(text);
  f.text = std::move(text);
  f.kind = kind;
  f.target = target;
  f.against = against;
  f.contrastive = against.has_value();
  f.misidentified = against.value_or("");
  return f;
}

/// Parses a list reply into deduplicated features (first occurrence wins).
inline std::vector<Feature> parse_features(std::string_view reply, FeatureKind kind, const std::string& target,
                                           const std::optional<std::string>& against) {
  auto items = prompts::parse_list(reply);
  if (items.empty()) {
    warn("no list items in " + to_string(kind) + " extraction reply for " + target + "; treating as zero features");
    return {};
  }
  std::vector<Feature> out;
  std::set<std::string> seen;
  for (const auto& item : items) {
    auto f = make_feature(item, kind, target, against);
    if (f && seen.insert(f->id).second) out.push_back(std::move(*f));
  }
  return out;
}

struct ExtractionParams {
  std::size_t max_features = 10;  // requested per call
  std::size_t visual_images = 5;
  std::size_t workers = 4;
  DecodeParams decode;

  json to_json() const {
    return {{"max_features", max_features},
            {"visual_images", visual_images},
            {"workers", workers},
            {"decode", decode.to_json()}};
  }
};

/// Textual features from the chat model; contrastive when `against` is given.
inline std::vector<Feature> extract_textual(Gateway& gw, const Concept& target, const Concept* against,
                                            const ExtractionParams& params = {}) {
  const auto& tmpl = against ? prompts::kContrastiveTextualFeatures : prompts::kTextualFeatures;
  std::map<std::string, std::string> vars = {{"target", target.canonical_name},
                                             {"max_features", std::to_string(params.max_features)}};
  if (against) vars["against"] = against->canonical_name;
  std::string reply = gw.chat(user_prompt(tmpl.render(vars)), params.decode);
  return parse_features(reply, FeatureKind::textual, target.id,
                        against ? std::optional<std::string>(against->id) : std::nullopt);
}

/// Visual features: one vision call per image, then (for more than one image)
/// one chat call that merges and de-duplicates the union.
inline std::vector<Feature> extract_visual(Gateway& gw, const CorpusManifest& manifest, const Concept& target,
                                           const std::vector<std::string>& images, const Concept* against,
                                           const ExtractionParams& params = {}) {
  if (images.empty()) throw PreconditionError("extract_visual: no images for " + target.id);
  for (const auto& id : images) {
    if (std::find(target.images.begin(), target.images.end(), id) == target.images.end())
      throw PreconditionError("extract_visual: image " + id + " does not belong to " + target.id);
    if (manifest.asset(id).provenance != Provenance::real)
      throw PreconditionError("extract_visual: image " + id + " is not a real image");
  }
  const auto& tmpl = against ? prompts::kContrastiveVisualFeatures : prompts::kVisualFeatures;
  std::map<std::string, std::string> vars = {{"target", target.canonical_name},
                                             {"max_features", std::to_string(params.max_features)}};
  if (against) vars["against"] = against->canonical_name;
  const std::string prompt = tmpl.render(vars);
  const std::optional<std::string> against_id = against ? std::optional<std::string>(against->id) : std::nullopt;

  std::vector<std::optional<std::string>> replies(images.size());
  parallel_for(images.size(), params.workers, [&](std::size_t i) {
    try {
      replies[i] = gw.vision_chat(manifest.read_asset(images[i]), user_prompt(prompt), params.decode);
    } catch (const BackendError& e) {
      warn("visual extraction failed for image " + images[i] + ": " + e.what());
    }
  });
  std::size_t ok = static_cast<std::size_t>(std::count_if(replies.begin(), replies.end(), [](const auto& r) { return r.has_value(); }));
  if (ok == 0) throw Error("visual extraction failed for every image of " + target.id);

  if (images.size() == 1) return parse_features(*replies[0], FeatureKind::visual, target.id, against_id);

  std::string combined;
  for (std::size_t i = 0; i < replies.size(); ++i) {
    if (!replies[i]) continue;
    combined += "Image " + std::to_string(i + 1) + ":\n";
    for (const auto& item : prompts::parse_list(*replies[i])) combined += "- " + item + "\n";
  }
  std::string merged = gw.chat(
      user_prompt(prompts::kMergeFeatures.render({{"target", target.canonical_name}, {"features", combined}})),
      params.decode);
  return parse_features(merged, FeatureKind::visual, target.id, against_id);
}

/// The candidate most often predicted for `target`'s probe images; ties go
/// to the lexicographically smaller id.
inline std::string acquire_misidentified(const std::string& target, const std::vector<std::string>& candidates,
                                         const std::vector<ProbeResult>& probes) {
  if (candidates.empty()) throw PreconditionError("acquire_misidentified: no candidates");
  if (std::find(candidates.begin(), candidates.end(), target) != candidates.end())
    throw PreconditionError("acquire_misidentified: candidates include the target " + target);
  std::map<std::string, std::size_t> counts;
  for (const auto& p : probes)
    if (p.gold == target && std::find(candidates.begin(), candidates.end(), p.predicted) != candidates.end())
      ++counts[p.predicted];
  if (counts.empty()) throw PreconditionError("no confusable concept for " + target);
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it)
    if (it->second > best->second) best = it;  // map order makes ties resolve to the smaller id
  return best->first;
}

struct ExtractionModes {
  bool textual = true;
  bool visual = true;
  bool contrastive = true;
};

/// Both extraction routes for one (target, misidentified) pair. Features are
/// deduplicated by id across routes (textual first) and carry the pair's
/// misidentified concept for scoring.
inline std::vector<Feature> extract_for_pair(Gateway& gw, const CorpusManifest& manifest, const std::string& target_id,
                                             const std::string& misidentified_id, const ExtractionModes& modes,
                                             const ExtractionParams& params = {}) {
  const Concept& target = manifest.get_concept(target_id);
  const Concept& misidentified = manifest.get_concept(misidentified_id);
  const Concept* against = modes.contrastive ? &misidentified : nullptr;
  std::vector<Feature> out;
  std::set<std::string> seen;
  auto absorb = [&](std::vector<Feature> fs) {
    for (auto& f : fs) {
      f.misidentified = misidentified_id;
      if (seen.insert(f.id).second) out.push_back(std::move(f));
    }
  };
  if (modes.textual) absorb(extract_textual(gw, target, against, params));
  if (modes.visual) {
    std::vector<std::string> images = target.split("train");
    if (images.empty()) images = target.images;
    if (images.size() > params.visual_images) images.resize(params.visual_images);
    absorb(extract_visual(gw, manifest, target, images, against, params));
  }
  return out;
}

}  // namespace coda
