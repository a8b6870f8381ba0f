#pragma once

// Multiple-choice recognition over the test split (plain or with in-context
// feature lists), micro-averaged accuracy, and instruction-tuning export for
// the Real:Synthetic experiment matrix.

#include <map>
#include <set>

#include "coda/augmentation.hpp"
#include "coda/dataset.hpp"
#include "coda/feature_extraction.hpp"
#include "coda/gateway.hpp"
#include "coda/pair_discovery.hpp"
#include "coda/prompts.hpp"

namespace coda {

enum class ExperimentMode { fixed_real, fixed_compute };

inline std::string to_string(ExperimentMode m) { return m == ExperimentMode::fixed_real ? "fixed_real" : "fixed_compute"; }

struct ExperimentConfig {
  std::string name = "default";
  std::size_t real_per_concept = 5;
  std::size_t synthetic_per_concept = 0;
  ExperimentMode mode = ExperimentMode::fixed_real;
  bool in_context_features = false;
  std::uint64_t seed = 0;

  /// Fixed real: 5 real with 0/1/3/5 synthetic. Fixed compute: 20:0, 10:10 or 0:20.
  void validate() const {
    if (mode == ExperimentMode::fixed_real) {
      if (real_per_concept != 5 || (synthetic_per_concept != 0 && synthetic_per_concept != 1 &&
                                    synthetic_per_concept != 3 && synthetic_per_concept != 5))
        throw ConfigError("fixed_real experiments use 5 real images and 0, 1, 3 or 5 synthetic");
    } else {
      const bool ok = (real_per_concept == 20 && synthetic_per_concept == 0) ||
                      (real_per_concept == 10 && synthetic_per_concept == 10) ||
                      (real_per_concept == 0 && synthetic_per_concept == 20);
      if (!ok) throw ConfigError("fixed_compute experiments use 20:0, 10:10 or 0:20");
    }
  }

  std::string ratio() const { return std::to_string(real_per_concept) + ":" + std::to_string(synthetic_per_concept); }

  /// "R:S" → config, mode inferred (5:x → fixed_real, sum 20 → fixed_compute).
  static ExperimentConfig from_ratio(const std::string& ratio, std::uint64_t seed = 0) {
    auto colon = ratio.find(':');
    if (colon == std::string::npos) throw ConfigError("ratio must look like R:S, got '" + ratio + "'");
    ExperimentConfig c;
    try {
      c.real_per_concept = std::stoul(ratio.substr(0, colon));
      c.synthetic_per_concept = std::stoul(ratio.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("ratio must look like R:S, got '" + ratio + "'");
    }
    c.mode = (c.real_per_concept == 5 && c.synthetic_per_concept <= 5) ? ExperimentMode::fixed_real
                                                                       : ExperimentMode::fixed_compute;
    c.name = ratio;
    c.seed = seed;
    c.validate();
    return c;
  }

  json to_json() const {
    return {{"name", name},
            {"real_per_concept", real_per_concept},
            {"synthetic_per_concept", synthetic_per_concept},
            {"mode", to_string(mode)},
            {"in_context_features", in_context_features},
            {"seed", seed}};
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    c.real_per_concept = j.value("real_per_concept", c.real_per_concept);
    c.synthetic_per_concept = j.value("synthetic_per_concept", c.synthetic_per_concept);
    c.mode = j.value("mode", "fixed_real") == "fixed_compute" ? ExperimentMode::fixed_compute : ExperimentMode::fixed_real;
    c.in_context_features = j.value("in_context_features", false);
    c.seed = j.value("seed", std::uint64_t{0});
    c.validate();
    return c;
  }
};

/// The seven Real:Syn settings of the experiment matrix.
inline std::vector<std::string> experiment_ratios() { return {"5:0", "5:1", "5:3", "5:5", "20:0", "10:10", "0:20"}; }

/// concept id → selected features, G descending.
using FeatureMap = std::map<std::string, std::vector<Feature>>;

/// Selected features grouped by target and ordered by G descending (ties by
/// D descending, then id). A target appearing in several pairs gets the union.
inline FeatureMap selected_feature_map(const std::vector<Feature>& features) {
  FeatureMap out;
  for (const auto& f : features) {
    if (f.status != FeatureStatus::selected) continue;
    auto& list = out[f.target];
    if (std::none_of(list.begin(), list.end(), [&](const Feature& g) { return g.id == f.id; })) list.push_back(f);
  }
  for (auto& [id, list] : out)
    std::sort(list.begin(), list.end(), [](const Feature& a, const Feature& b) {
      double ga = a.g_score.value_or(0), gb = b.g_score.value_or(0);
      if (ga != gb) return ga > gb;
      double da = a.d_score.value_or(0), db = b.d_score.value_or(0);
      if (da != db) return da > db;
      return a.id < b.id;
    });
  return out;
}

struct EvalPrompt {
  Messages messages;
  std::vector<std::string> options;  // concept ids in presented order
  std::size_t feature_blocks = 0;
};

/// Multiple-choice prompt for one image. Option order is a seeded shuffle keyed
/// to (seed, image); when `features` is given, one block per option that has
/// selected features is appended.
inline EvalPrompt build_eval_prompt(const CorpusManifest& manifest, const std::string& image_id, const std::string& gold,
                                    std::vector<std::string> options, const FeatureMap* features, std::uint64_t seed) {
  if (std::find(options.begin(), options.end(), gold) == options.end())
    throw PreconditionError("gold concept " + gold + " is not among the options");
  std::sort(options.begin(), options.end());
  seeded_shuffle(options, derive_seed(seed, "eval-options/" + image_id));
  std::vector<std::string> names;
  for (const auto& o : options) names.push_back(manifest.get_concept(o).canonical_name);
  EvalPrompt out;
  std::string text = prompts::kClassify.render({{"options", render_options(names)}});
  if (features != nullptr) {
    std::string blocks;
    for (std::size_t i = 0; i < options.size(); ++i) {
      auto it = features->find(options[i]);
      if (it == features->end() || it->second.empty()) continue;
      blocks += names[i] + ":";
      for (std::size_t k = 0; k < it->second.size(); ++k) blocks += (k ? "; " : " ") + it->second[k].text;
      blocks += "\n";
      ++out.feature_blocks;
    }
    if (out.feature_blocks > 0) text += prompts::kClassifyFeatureSection.render({{"feature_blocks", blocks}});
  }
  out.messages = user_prompt(text);
  out.options = std::move(options);
  return out;
}

enum class OptionPool { all, subset };

struct EvalParams {
  OptionPool option_pool = OptionPool::all;
  std::size_t subset_size = 15;
  /// Restrict evaluation to these concepts (all concepts with a test split when empty).
  std::vector<std::string> concepts;
  /// Known confusable concept per target; always included in a subset pool.
  std::map<std::string, std::string> confusable;
  std::size_t workers = 4;
  DecodeParams decode;

  json to_json() const {
    return {{"option_pool", option_pool == OptionPool::all ? "all" : "subset"},
            {"subset_size", subset_size},
            {"concepts", concepts},
            {"workers", workers},
            {"decode", decode.to_json()}};
  }
};

struct EvalProbe {
  std::string concept_id;
  std::string image;
  std::vector<std::string> options;
  std::string reply;
  std::string predicted;  // concept id, "unparsed", or "" when the backend failed
  bool correct = false;
  std::string error;

  json to_json() const {
    json j = {{"concept", concept_id}, {"image", image}, {"options", options}, {"reply", reply},
              {"predicted", predicted}, {"correct", correct}};
    if (!error.empty()) j["error"] = error;
    return j;
  }
  static EvalProbe from_json(const json& j) {
    EvalProbe p;
    p.concept_id = j.at("concept").get<std::string>();
    p.image = j.at("image").get<std::string>();
    p.options = j.at("options").get<std::vector<std::string>>();
    p.reply = j.value("reply", "");
    p.predicted = j.value("predicted", "");
    p.correct = j.value("correct", false);
    p.error = j.value("error", "");
    return p;
  }
};

struct EvalResult {
  ExperimentConfig config;
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_concept;  // (correct, total)
  std::optional<double> accuracy;  // absent when incomplete
  bool incomplete = false;
  std::vector<EvalProbe> probes;

  json to_json() const {
    json pc = json::object();
    for (const auto& [id, ct] : per_concept) pc[id] = {{"correct", ct.first}, {"total", ct.second}};
    return {{"config", config.to_json()},
            {"per_concept", pc},
            {"accuracy", accuracy ? json(*accuracy) : json(nullptr)},
            {"incomplete", incomplete},
            {"probe_count", probes.size()}};
  }
};

/// Micro-averaged accuracy recomputed from a probe log.
inline EvalResult summarize(const ExperimentConfig& config, std::vector<EvalProbe> probes) {
  EvalResult r;
  r.config = config;
  std::sort(probes.begin(), probes.end(),
            [](const EvalProbe& a, const EvalProbe& b) { return std::tie(a.concept_id, a.image) < std::tie(b.concept_id, b.image); });
  std::size_t correct = 0;
  for (const auto& p : probes) {
    auto& ct = r.per_concept[p.concept_id];
    if (!p.error.empty()) {
      r.incomplete = true;
      continue;
    }
    ct.second += 1;
    if (p.correct) {
      ct.first += 1;
      ++correct;
    }
  }
  if (!r.incomplete && !probes.empty()) r.accuracy = static_cast<double>(correct) / static_cast<double>(probes.size());
  r.probes = std::move(probes);
  return r;
}

/// Option list for one probe: every concept, or the gold concept plus its
/// known confusable and seeded others up to subset_size.
inline std::vector<std::string> probe_options(const CorpusManifest& manifest, const std::string& gold,
                                              const std::string& image, const EvalParams& params, std::uint64_t seed) {
  std::vector<std::string> all;
  for (const auto& c : manifest.concepts) all.push_back(c.id);
  if (params.option_pool == OptionPool::all || all.size() <= params.subset_size) return all;
  std::vector<std::string> out = {gold};
  auto conf = params.confusable.find(gold);
  if (conf != params.confusable.end() && conf->second != gold) out.push_back(conf->second);
  std::vector<std::string> rest;
  for (const auto& id : all)
    if (std::find(out.begin(), out.end(), id) == out.end()) rest.push_back(id);
  seeded_shuffle(rest, derive_seed(seed, "option-pool/" + image));
  for (std::size_t i = 0; out.size() < params.subset_size && i < rest.size(); ++i) out.push_back(rest[i]);
  return out;
}

/// One probe per test image. Unparsed replies count as incorrect; backend
/// failures mark the result incomplete and withhold the accuracy.
inline EvalResult evaluate(Gateway& gw, const CorpusManifest& manifest, const ExperimentConfig& config,
                           const FeatureMap* features, const EvalParams& params = {}) {
  struct Job {
    std::string concept_id, image;
  };
  std::vector<Job> jobs;
  for (const auto& c : manifest.concepts) {
    if (!params.concepts.empty() && std::find(params.concepts.begin(), params.concepts.end(), c.id) == params.concepts.end())
      continue;
    for (const auto& img : c.split("test")) jobs.push_back({c.id, img});
  }
  if (jobs.empty()) throw PreconditionError("evaluate: no test images");
  const FeatureMap* in_context = config.in_context_features ? features : nullptr;
  if (config.in_context_features && features == nullptr)
    throw PreconditionError("evaluate: in-context evaluation needs selected features");

  std::vector<EvalProbe> probes(jobs.size());
  parallel_for(jobs.size(), params.workers, [&](std::size_t i) {
    EvalProbe& p = probes[i];
    p.concept_id = jobs[i].concept_id;
    p.image = jobs[i].image;
    auto options = probe_options(manifest, p.concept_id, p.image, params, config.seed);
    EvalPrompt prompt = build_eval_prompt(manifest, p.image, p.concept_id, options, in_context, config.seed);
    p.options = prompt.options;
    try {
      p.reply = gw.vision_chat(manifest.read_asset(p.image), prompt.messages, params.decode);
    } catch (const BackendError& e) {
      p.error = e.what();
      return;
    }
    std::vector<std::string> names;
    for (const auto& o : p.options) names.push_back(manifest.get_concept(o).canonical_name);
    auto choice = prompts::parse_choice(p.reply, names);
    p.predicted = choice ? p.options[*choice] : std::string(kUnparsed);
    p.correct = p.predicted == p.concept_id;
  });
  auto result = summarize(config, std::move(probes));
  if (result.incomplete) warn("evaluation incomplete: some probes failed at the backend; accuracy withheld");
  return result;
}

// --- fine-tune export -------------------------------------------------------

enum class ExportScope { all, augmented };

/// Instruction-tuning records: per concept, real_per_concept train images
/// (seeded order) then synthetic_per_concept kept images in ranking order.
/// Record: {"image", "conversations":[{"role","text"}...], "gold", "provenance", "asset"}.
inline std::vector<json> export_finetune(const CorpusManifest& manifest, const std::vector<AugmentationBatch>& batches,
                                         const ExperimentConfig& config, ExportScope scope = ExportScope::all) {
  config.validate();
  std::map<std::string, std::vector<const AugmentationBatch*>> by_concept;
  for (const auto& b : batches) by_concept[b.target].push_back(&b);
  for (auto& [id, list] : by_concept)
    std::sort(list.begin(), list.end(), [](const AugmentationBatch* a, const AugmentationBatch* b) {
      return a->misidentified < b->misidentified;
    });

  const std::string instruction(prompts::kFinetuneInstruction.text);
  std::vector<json> records;
  std::vector<std::string> shortfalls;
  for (const auto& c : manifest.concepts) {
    if (scope == ExportScope::augmented && !by_concept.count(c.id)) continue;
    auto record = [&](const std::string& path, const std::string& asset, Provenance prov) {
      return json{{"image", path},
                  {"conversations", json::array({{{"role", "user"}, {"text", instruction}},
                                                 {{"role", "assistant"}, {"text", c.canonical_name}}})},
                  {"gold", c.id},
                  {"provenance", to_string(prov)},
                  {"asset", asset}};
    };

    std::vector<std::string> reals = c.split("train");
    std::sort(reals.begin(), reals.end());
    seeded_shuffle(reals, derive_seed(config.seed, "export-real/" + c.id));
    if (reals.size() < config.real_per_concept) {
      shortfalls.push_back(c.id + " needs " + std::to_string(config.real_per_concept) + " train images, has " +
                           std::to_string(reals.size()));
      continue;
    }

    std::vector<std::pair<const ImageAsset*, double>> synth;
    bool all_scored = true;
    if (auto it = by_concept.find(c.id); it != by_concept.end()) {
      std::set<std::string> seen;
      for (const auto* b : it->second) {
        all_scored = all_scored && b->ranking == Ranking::mean_similarity;
        for (const auto& id : b->kept) {
          if (!seen.insert(id).second) continue;
          auto score = b->rank_scores.find(id);
          synth.emplace_back(&b->candidate(id), score == b->rank_scores.end() ? 0.0 : score->second);
        }
      }
    }
    if (all_scored)
      std::stable_sort(synth.begin(), synth.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (synth.size() < config.synthetic_per_concept) {
      shortfalls.push_back(c.id + " needs " + std::to_string(config.synthetic_per_concept) +
                           " kept synthetic images, has " + std::to_string(synth.size()));
      continue;
    }

    for (std::size_t i = 0; i < config.real_per_concept; ++i) {
      const ImageAsset& a = manifest.asset(reals[i]);
      records.push_back(record(a.path, a.id, Provenance::real));
    }
    for (std::size_t i = 0; i < config.synthetic_per_concept; ++i)
      records.push_back(record(synth[i].first->path, synth[i].first->id, Provenance::synthetic));
  }
  if (!shortfalls.empty()) {
    std::string msg = "cannot honor ratio " + config.ratio() + ":";
    for (const auto& s : shortfalls) msg += " " + s + ";";
    throw PreconditionError(msg);
  }
  return records;
}

}  // namespace coda
