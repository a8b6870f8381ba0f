#pragma once

// Human evaluation of (image, feature) items: seeded session sampling,
// append-only judgment storage and agreement statistics (positive rate and
// two-category Fleiss' kappa).
//
// Files under a session directory:
//   <dir>/<session-id>.session.json      session definition
//   <dir>/<session-id>.records.jsonl     one AnnotationRecord per line, append-only

#include <chrono>
#include <map>
#include <set>

#include "coda/augmentation.hpp"
#include "coda/dataset.hpp"
#include "coda/feature_extraction.hpp"

namespace coda {

enum class Condition { real_target, real_misidentified, synthetic_target };

inline std::string to_string(Condition c) {
  switch (c) {
    case Condition::real_target: return "real_target";
    case Condition::real_misidentified: return "real_misidentified";
    case Condition::synthetic_target: return "synthetic_target";
  }
  return "?";
}

inline Condition condition_from_string(const std::string& s) {
  if (s == "real_target") return Condition::real_target;
  if (s == "real_misidentified") return Condition::real_misidentified;
  if (s == "synthetic_target") return Condition::synthetic_target;
  throw ConfigError("unknown annotation condition: " + s);
}

struct AnnotationItem {
  std::string image;         // asset id
  std::string feature;       // feature id
  std::string feature_text;
  std::string image_path;    // corpus-relative
  std::string concept_id;       // concept the image belongs to

  json to_json() const {
    return {{"image", image}, {"feature", feature}, {"feature_text", feature_text},
            {"image_path", image_path}, {"concept", concept_id}};
  }
  static AnnotationItem from_json(const json& j) {
    return {j.at("image").get<std::string>(), j.at("feature").get<std::string>(), j.value("feature_text", ""),
            j.value("image_path", ""), j.value("concept", "")};
  }
};

struct AnnotationSession {
  std::string id;
  Condition condition = Condition::real_target;
  std::vector<AnnotationItem> items;
  std::vector<std::string> annotators;
  std::uint64_t seed = 0;
  bool show_concept_names = false;

  json to_json() const {
    json items_j = json::array();
    for (const auto& it : items) items_j.push_back(it.to_json());
    return {{"id", id},           {"condition", to_string(condition)}, {"items", items_j},
            {"annotators", annotators}, {"seed", seed}, {"show_concept_names", show_concept_names}};
  }
  static AnnotationSession from_json(const json& j) {
    AnnotationSession s;
    s.id = j.at("id").get<std::string>();
    s.condition = condition_from_string(j.at("condition").get<std::string>());
    for (const auto& it : j.at("items")) s.items.push_back(AnnotationItem::from_json(it));
    s.annotators = j.value("annotators", std::vector<std::string>{});
    s.seed = j.value("seed", std::uint64_t{0});
    s.show_concept_names = j.value("show_concept_names", false);
    return s;
  }
};

struct AnnotationRecord {
  std::string session;
  std::string annotator;
  std::size_t item_index = 0;
  bool judgment = false;
  std::int64_t timestamp = 0;  // unix milliseconds

  json to_json() const {
    return {{"session", session}, {"annotator", annotator}, {"item_index", item_index},
            {"judgment", judgment ? "yes" : "no"}, {"timestamp", timestamp}};
  }
  static AnnotationRecord from_json(const json& j) {
    AnnotationRecord r;
    r.session = j.at("session").get<std::string>();
    r.annotator = j.at("annotator").get<std::string>();
    if (r.annotator.empty()) throw PreconditionError("annotator id must not be empty");
    r.item_index = j.at("item_index").get<std::size_t>();
    const json& v = j.at("judgment");
    if (v.is_boolean()) {
      r.judgment = v.get<bool>();
    } else {
      std::string s = v.get<std::string>();
      if (s != "yes" && s != "no") throw PreconditionError("judgment must be \"yes\" or \"no\"");
      r.judgment = s == "yes";
    }
    r.timestamp = j.value("timestamp", std::int64_t{0});
    return r;
  }
};

/// Eligible (image, feature) pairs for a condition, in canonical order:
///   real_target         selected feature × real image of its target
///   real_misidentified  selected feature × real image of its misidentified concept
///   synthetic_target    selected feature × kept synthetic image generated from it
inline std::vector<AnnotationItem> annotation_pool(const CorpusManifest& manifest, const std::vector<Feature>& features,
                                                   const std::vector<AugmentationBatch>& batches, Condition condition) {
  std::vector<AnnotationItem> pool;
  std::set<std::pair<std::string, std::string>> seen;
  auto add = [&](const std::string& image, const std::string& path, const std::string& concept_id, const Feature& f) {
    if (seen.insert({image, f.id + "/" + f.target}).second) pool.push_back({image, f.id, f.text, path, concept_id});
  };
  for (const auto& f : features) {
    if (f.status != FeatureStatus::selected) continue;
    if (condition == Condition::synthetic_target) {
      for (const auto& b : batches) {
        if (b.target != f.target || std::find(b.features.begin(), b.features.end(), f.id) == b.features.end()) continue;
        for (const auto& id : b.kept) add(id, b.candidate(id).path, b.target, f);
      }
      continue;
    }
    const std::string& concept_id = condition == Condition::real_target ? f.target : f.misidentified;
    const Concept* c = manifest.find_concept(concept_id);
    if (c == nullptr) continue;
    for (const auto& id : c->images) add(id, manifest.asset(id).path, c->id, f);
  }
  std::sort(pool.begin(), pool.end(), [](const AnnotationItem& a, const AnnotationItem& b) {
    return std::tie(a.image, a.feature, a.concept_id) < std::tie(b.image, b.feature, b.concept_id);
  });
  return pool;
}

/// Seeded sample of n_items distinct pool entries.
inline AnnotationSession create_session(const CorpusManifest& manifest, const std::vector<Feature>& features,
                                        const std::vector<AugmentationBatch>& batches, Condition condition,
                                        std::size_t n_items, std::uint64_t seed, std::vector<std::string> annotators = {},
                                        std::string id = {}) {
  auto pool = annotation_pool(manifest, features, batches, condition);
  if (n_items > pool.size())
    throw PreconditionError("insufficient annotation pool for " + to_string(condition) + ": requested " +
                            std::to_string(n_items) + ", available " + std::to_string(pool.size()));
  seeded_shuffle(pool, derive_seed(seed, "session/" + to_string(condition)));
  pool.resize(n_items);
  AnnotationSession s;
  s.id = id.empty() ? to_string(condition) + "-" + std::to_string(seed) : std::move(id);
  s.condition = condition;
  s.items = std::move(pool);
  s.annotators = std::move(annotators);
  s.seed = seed;
  return s;
}

// --- agreement ----------------------------------------------------------------

struct AgreementStats {
  double positive_rate = 0.0;
  double fleiss_kappa = 0.0;
  bool degenerate = false;  // every judgment in one category; kappa reported as 1
  std::size_t items = 0;
  std::size_t annotators = 0;

  json to_json() const {
    return {{"positive_rate", positive_rate}, {"fleiss_kappa", fleiss_kappa}, {"degenerate", degenerate},
            {"items", items}, {"annotators", annotators}};
  }
};

/// Fleiss' kappa over N items × 2 categories, `raters` judgments per item.
/// `yes_counts[i]` is the number of "yes" judgments on item i.
///   P_i = (yes² + no² − n) / (n(n − 1)),  P̄ = mean P_i
///   p_yes = Σ yes / (N n),  P̄e = p_yes² + p_no²,  κ = (P̄ − P̄e) / (1 − P̄e)
inline AgreementStats fleiss_kappa(const std::vector<std::size_t>& yes_counts, std::size_t raters) {
  if (yes_counts.empty()) throw PreconditionError("fleiss_kappa: no items");
  if (raters < 2) throw PreconditionError("fleiss_kappa: need at least 2 raters");
  const double n = static_cast<double>(raters);
  const double items = static_cast<double>(yes_counts.size());
  double p_bar = 0.0, total_yes = 0.0;
  for (std::size_t yes : yes_counts) {
    if (yes > raters) throw PreconditionError("fleiss_kappa: more yes judgments than raters");
    const double y = static_cast<double>(yes), no = n - y;
    p_bar += (y * y + no * no - n) / (n * (n - 1.0));
    total_yes += y;
  }
  p_bar /= items;
  const double p_yes = total_yes / (items * n);
  const double p_e = p_yes * p_yes + (1.0 - p_yes) * (1.0 - p_yes);
  AgreementStats s;
  s.positive_rate = p_yes;
  s.items = yes_counts.size();
  s.annotators = raters;
  if (p_e == 1.0) {
    if (p_bar != 1.0) throw Error("kappa undefined");
    s.fleiss_kappa = 1.0;
    s.degenerate = true;
    return s;
  }
  s.fleiss_kappa = (p_bar - p_e) / (1.0 - p_e);
  return s;
}

/// Requires a judgment from every annotator on every item.
inline AgreementStats agreement_stats(const AnnotationSession& session, const std::vector<AnnotationRecord>& records) {
  std::vector<std::string> annotators = session.annotators;
  if (annotators.empty()) {
    std::set<std::string> seen;
    for (const auto& r : records) seen.insert(r.annotator);
    annotators.assign(seen.begin(), seen.end());
  }
  if (annotators.empty()) throw PreconditionError("session " + session.id + " has no judgments");
  std::map<std::pair<std::size_t, std::string>, bool> judged;
  for (const auto& r : records)
    if (r.session == session.id) judged[{r.item_index, r.annotator}] = r.judgment;
  std::vector<std::size_t> yes(session.items.size(), 0);
  std::vector<std::size_t> incomplete;
  for (std::size_t i = 0; i < session.items.size(); ++i) {
    bool complete = true;
    for (const auto& a : annotators) {
      auto it = judged.find({i, a});
      if (it == judged.end()) {
        complete = false;
        continue;
      }
      yes[i] += it->second ? 1 : 0;
    }
    if (!complete) incomplete.push_back(i);
  }
  if (!incomplete.empty()) {
    std::string msg = "incomplete items in session " + session.id + ":";
    for (std::size_t k = 0; k < incomplete.size() && k < 20; ++k) msg += " " + std::to_string(incomplete[k]);
    if (incomplete.size() > 20) msg += " ... (" + std::to_string(incomplete.size()) + " total)";
    throw PreconditionError(msg);
  }
  return fleiss_kappa(yes, annotators.size());
}

// --- storage ----------------------------------------------------------------

/// Session definitions plus append-only record files. Writes are serialized per
/// store; a record key (session, annotator, item_index) is stored at most once.
class SessionStore {
 public:
  explicit SessionStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  const fs::path& directory() const { return dir_; }

  fs::path session_path(const std::string& id) const { return dir_ / (id + ".session.json"); }
  fs::path records_path(const std::string& id) const { return dir_ / (id + ".records.jsonl"); }

  void save_session(const AnnotationSession& s) {
    std::lock_guard lock(mu_);
    write_file_atomic(session_path(s.id), s.to_json().dump(2) + "\n");
    sessions_.erase(s.id);
  }

  std::optional<AnnotationSession> find_session(const std::string& id) {
    std::lock_guard lock(mu_);
    return find_locked(id);
  }

  AnnotationSession session(const std::string& id) {
    auto s = find_session(id);
    if (!s) throw PreconditionError("unknown session: " + id);
    return *s;
  }

  std::vector<AnnotationRecord> records(const std::string& id) {
    std::lock_guard lock(mu_);
    return records_locked(id);
  }

  /// Stores a judgment. Replaying an identical judgment returns the stored
  /// record; a different judgment for the same key is a ConflictError.
  AnnotationRecord record(const std::string& session_id, const std::string& annotator, std::size_t item_index,
                          bool judgment) {
    std::lock_guard lock(mu_);
    auto s = find_locked(session_id);
    if (!s) throw PreconditionError("unknown session: " + session_id);
    if (annotator.empty()) throw PreconditionError("annotator id must not be empty");
    if (item_index >= s->items.size())
      throw PreconditionError("item_index " + std::to_string(item_index) + " out of range for session " + session_id);
    if (!s->annotators.empty() &&
        std::find(s->annotators.begin(), s->annotators.end(), annotator) == s->annotators.end())
      throw PreconditionError("annotator " + annotator + " is not part of session " + session_id);
    for (const auto& r : records_locked(session_id)) {
      if (r.annotator != annotator || r.item_index != item_index) continue;
      if (r.judgment == judgment) return r;
      throw ConflictError("conflicting judgment for session " + session_id + ", annotator " + annotator + ", item " +
                          std::to_string(item_index));
    }
    AnnotationRecord r{session_id, annotator, item_index, judgment,
                       std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count()};
    std::ofstream out(records_path(session_id), std::ios::app | std::ios::binary);
    out << r.to_json().dump() << '\n';
    out.flush();
    if (!out) throw Error("cannot append to " + records_path(session_id).string());
    records_[session_id].push_back(r);
    return r;
  }

  AgreementStats stats(const std::string& id) {
    auto s = session(id);
    return agreement_stats(s, records(id));
  }

 private:
  std::optional<AnnotationSession> find_locked(const std::string& id) {
    if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
    if (id.find('/') != std::string::npos || id.find("..") != std::string::npos) return std::nullopt;
    fs::path p = session_path(id);
    if (!fs::exists(p)) return std::nullopt;
    auto s = AnnotationSession::from_json(json::parse(read_file(p)));
    sessions_[id] = s;
    return s;
  }

  std::vector<AnnotationRecord>& records_locked(const std::string& id) {
    auto it = records_.find(id);
    if (it != records_.end()) return it->second;
    auto& list = records_[id];
    fs::path p = records_path(id);
    if (fs::exists(p))
      for (const auto& j : read_records(p)) list.push_back(AnnotationRecord::from_json(j));
    return list;
  }

  fs::path dir_;
  std::mutex mu_;
  std::map<std::string, AnnotationSession> sessions_;
  std::map<std::string, std::vector<AnnotationRecord>> records_;
};

}  // namespace coda
