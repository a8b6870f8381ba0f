#pragma once

// Confusable-pair discovery: multiple-choice probing of the vision model over
// random concept subsets, then thresholding of directional misclassification
// rates.

#include <map>
#include <set>

#include "coda/dataset.hpp"
#include "coda/gateway.hpp"
#include "coda/prompts.hpp"

namespace coda {

inline constexpr std::string_view kUnparsed = "unparsed";

struct ProbeResult {
  std::string image;
  std::vector<std::string> options;  // concept ids in presented order
  std::string predicted;             // concept id or "unparsed"
  std::string gold;

  bool parsed() const { return predicted != kUnparsed; }
  bool correct() const { return predicted == gold; }

  json to_json() const {
    return {{"image", image}, {"options", options}, {"predicted", predicted}, {"gold", gold}};
  }
  static ProbeResult from_json(const json& j) {
    return {j.at("image").get<std::string>(), j.at("options").get<std::vector<std::string>>(),
            j.at("predicted").get<std::string>(), j.at("gold").get<std::string>()};
  }
};

struct ConfusablePair {
  std::string target;
  std::string misidentified;
  double rate_t_to_m = 0.0;
  double rate_m_to_t = 0.0;
  std::size_t probe_count = 0;  // probes of either concept, unparsed included

  json to_json() const {
    return {{"target", target},
            {"misidentified", misidentified},
            {"rate_t_to_m", rate_t_to_m},
            {"rate_m_to_t", rate_m_to_t},
            {"probe_count", probe_count}};
  }
  static ConfusablePair from_json(const json& j) {
    ConfusablePair p;
    p.target = j.at("target").get<std::string>();
    p.misidentified = j.at("misidentified").get<std::string>();
    p.rate_t_to_m = j.at("rate_t_to_m").get<double>();
    p.rate_m_to_t = j.at("rate_m_to_t").get<double>();
    p.probe_count = j.value("probe_count", std::size_t{0});
    return p;
  }
};

struct DiscoveryParams {
  std::size_t subset_size = 15;
  std::size_t images_per_concept = 5;
  double threshold = 0.2;
  std::size_t rounds = 1;
  std::size_t workers = 4;

  json to_json() const {
    return {{"subset_size", subset_size},
            {"images_per_concept", images_per_concept},
            {"threshold", threshold},
            {"rounds", rounds},
            {"workers", workers}};
  }
};

/// "A. name\nB. name\n..." for a classification prompt.
inline std::string render_options(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) out += prompts::option_label(i) + ". " + names[i] + "\n";
  return out;
}

/// Probe images of one concept: the first `n` val-split images after a
/// seeded shuffle keyed to (seed, concept).
inline std::vector<std::string> probe_images(const Concept& c, std::size_t n, std::uint64_t seed) {
  std::vector<std::string> pool = c.split("val");
  if (pool.size() < n)
    throw PreconditionError("concept " + c.id + " has " + std::to_string(pool.size()) + " val images, " +
                            std::to_string(n) + " needed for probing");
  std::sort(pool.begin(), pool.end());
  seeded_shuffle(pool, derive_seed(seed, "probe-images/" + c.id));
  pool.resize(n);
  return pool;
}

/// One multiple-choice query per (concept, probe image). Results come back in
/// (concept order, image order) regardless of completion order.
inline std::vector<ProbeResult> probe_subset(Gateway& gw, const CorpusManifest& manifest,
                                             const std::vector<std::string>& concept_ids,
                                             std::size_t images_per_concept, std::uint64_t seed,
                                             const DiscoveryParams& params = {}) {
  if (concept_ids.size() < 2 || concept_ids.size() > params.subset_size)
    throw PreconditionError("probe subset must hold between 2 and " + std::to_string(params.subset_size) +
                            " concepts, got " + std::to_string(concept_ids.size()));
  struct Job {
    std::string concept_id;
    std::string image;
  };
  std::vector<Job> jobs;
  for (const auto& id : concept_ids)
    for (const auto& img : probe_images(manifest.get_concept(id), images_per_concept, seed)) jobs.push_back({id, img});

  std::vector<ProbeResult> results(jobs.size());
  parallel_for(jobs.size(), params.workers, [&](std::size_t i) {
    const Job& job = jobs[i];
    std::vector<std::string> options = concept_ids;
    seeded_shuffle(options, derive_seed(seed, "options/" + job.concept_id + "/" + job.image));
    std::vector<std::string> names;
    for (const auto& o : options) names.push_back(manifest.get_concept(o).canonical_name);
    std::string prompt = prompts::kClassify.render({{"options", render_options(names)}});
    std::string reply = gw.vision_chat(manifest.read_asset(job.image), user_prompt(prompt));
    auto choice = prompts::parse_choice(reply, names);
    results[i] = {job.image, options, choice ? options[*choice] : std::string(kUnparsed), job.concept_id};
  });
  return results;
}

/// Directional misclassification rates pooled over `results`; flags every
/// unordered pair whose rate in either direction is strictly above
/// `threshold`. The target is the concept with the higher outgoing rate
/// (ties: lexicographically smaller id). Output is sorted by (target, misidentified).
inline std::vector<ConfusablePair> flag_pairs(const std::vector<ProbeResult>& results, double threshold) {
  if (results.empty()) throw PreconditionError("flag_pairs: no probe results");
  std::map<std::string, std::size_t> parsed, total;
  std::map<std::pair<std::string, std::string>, std::size_t> confusions;
  for (const auto& r : results) {
    ++total[r.gold];
    if (!r.parsed()) continue;
    ++parsed[r.gold];
    if (r.predicted != r.gold) ++confusions[{r.gold, r.predicted}];
  }
  auto rate = [&](const std::string& a, const std::string& b) {
    auto it = confusions.find({a, b});
    if (it == confusions.end()) return 0.0;
    return static_cast<double>(it->second) / static_cast<double>(parsed[a]);
  };

  std::set<std::pair<std::string, std::string>> unordered;
  for (const auto& [key, n] : confusions) unordered.insert(std::minmax(key.first, key.second));

  std::vector<ConfusablePair> out;
  for (const auto& [a, b] : unordered) {
    double ab = rate(a, b), ba = rate(b, a);
    if (!(ab > threshold || ba > threshold)) continue;
    ConfusablePair p;
    bool a_is_target = ab >= ba;  // a < b, so ties go to a
    p.target = a_is_target ? a : b;
    p.misidentified = a_is_target ? b : a;
    p.rate_t_to_m = a_is_target ? ab : ba;
    p.rate_m_to_t = a_is_target ? ba : ab;
    p.probe_count = total[a] + total[b];
    out.push_back(std::move(p));
  }
  std::sort(out.begin(), out.end(), [](const ConfusablePair& x, const ConfusablePair& y) {
    return std::tie(x.target, x.misidentified) < std::tie(y.target, y.misidentified);
  });
  return out;
}

/// Splits ids into ceil(n / max_size) chunks of near-equal size.
inline std::vector<std::vector<std::string>> partition_subsets(const std::vector<std::string>& ids, std::size_t max_size) {
  std::vector<std::vector<std::string>> chunks;
  if (ids.empty()) return chunks;
  const std::size_t k = (ids.size() + max_size - 1) / max_size;
  const std::size_t base = ids.size() / k, extra = ids.size() % k;
  std::size_t pos = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t len = base + (c < extra ? 1 : 0);
    chunks.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(pos), ids.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return chunks;
}

struct DiscoveryResult {
  std::vector<ProbeResult> probes;
  std::vector<ConfusablePair> pairs;
};

/// Each round reshuffles all concepts (seed derived from (seed, round)) and
/// probes every subset of the resulting partition; rates are pooled across rounds.
inline DiscoveryResult discover_pairs(Gateway& gw, const CorpusManifest& manifest, const DiscoveryParams& params,
                                      std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& c : manifest.concepts) ids.push_back(c.id);
  if (ids.size() < 2) throw PreconditionError("pair discovery needs at least 2 concepts");
  DiscoveryResult out;
  for (std::size_t r = 0; r < params.rounds; ++r) {
    std::vector<std::string> order = ids;
    seeded_shuffle(order, derive_seed(seed, "round/" + std::to_string(r)));
    for (auto& subset : partition_subsets(order, params.subset_size)) {
      if (subset.size() < 2) continue;
      std::sort(subset.begin(), subset.end());
      auto probes = probe_subset(gw, manifest, subset, params.images_per_concept,
                                 derive_seed(seed, "round/" + std::to_string(r) + "/probe"), params);
      out.probes.insert(out.probes.end(), probes.begin(), probes.end());
    }
  }
  std::size_t unparsed = static_cast<std::size_t>(
      std::count_if(out.probes.begin(), out.probes.end(), [](const ProbeResult& p) { return !p.parsed(); }));
  if (unparsed > 0) warn(std::to_string(unparsed) + " probe replies could not be parsed; excluded from rates");
  out.pairs = flag_pairs(out.probes, params.threshold);
  return out;
}

}  // namespace coda
