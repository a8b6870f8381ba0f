#pragma once

// Stage orchestration. Stages exchange data only through record files; each
// stage writes its outputs atomically and a "<output>.meta.json" record with
// input hashes, effective parameters, backend model ids and template hashes.

#include <cstdlib>
#include <regex>

#include "coda/augmentation.hpp"
#include "coda/dataset.hpp"
#include "coda/evaluation.hpp"
#include "coda/feature_extraction.hpp"
#include "coda/feature_filter.hpp"
#include "coda/gateway.hpp"
#include "coda/http_backend.hpp"
#include "coda/human_eval.hpp"
#include "coda/mock.hpp"
#include "coda/pair_discovery.hpp"

namespace coda {

// --- config -----------------------------------------------------------------

/// Replaces ${NAME} in every string value with the environment variable NAME.
/// An unset variable is a ConfigError.
inline json interpolate_env(const json& j) {
  if (j.is_string()) {
    static const std::regex var(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
    std::string s = j.get<std::string>();
    std::string out;
    auto begin = std::sregex_iterator(s.begin(), s.end(), var);
    std::size_t last = 0;
    for (auto it = begin; it != std::sregex_iterator(); ++it) {
      const auto& m = *it;
      out += s.substr(last, static_cast<std::size_t>(m.position()) - last);
      const char* v = std::getenv(m[1].str().c_str());
      if (v == nullptr) throw ConfigError("config references unset environment variable " + m[1].str());
      out += v;
      last = static_cast<std::size_t>(m.position() + m.length());
    }
    out += s.substr(last);
    return out;
  }
  if (j.is_object()) {
    json o = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) o[it.key()] = interpolate_env(it.value());
    return o;
  }
  if (j.is_array()) {
    json a = json::array();
    for (const auto& v : j) a.push_back(interpolate_env(v));
    return a;
  }
  return j;
}

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path cache_dir;
  bool mock = false;
  mock::MockConfig mock_config;
  std::map<Role, BackendConfig> backends;
  DiscoveryParams discovery;
  ExtractionParams extraction;
  ExtractionModes modes;
  FilterParams filter;
  AugmentParams augment;
  EvalParams evaluation;
  std::size_t workers = 4;

  /// Effective values of every stage parameter.
  json to_json() const {
    json b = json::object();
    for (const auto& [role, cfg] : backends) b[to_string(role)] = cfg.to_json();
    return {{"seed", seed},
            {"cache_dir", cache_dir.generic_string()},
            {"mock", mock},
            {"mock_config", mock_config.to_json()},
            {"backends", b},
            {"discovery", discovery.to_json()},
            {"extraction", extraction.to_json()},
            {"modes", {{"textual", modes.textual}, {"visual", modes.visual}, {"contrastive", modes.contrastive}}},
            {"filter", filter.to_json()},
            {"augment", augment.to_json()},
            {"evaluation", evaluation.to_json()},
            {"workers", workers}};
  }

  /// Parses a declarative JSON config (after ${ENV} interpolation). Absent
  /// keys keep their defaults.
  static RunConfig from_json(const json& raw) {
    json j = interpolate_env(raw);
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    c.cache_dir = j.value("cache_dir", std::string());
    c.mock = j.value("mock", false);
    if (j.contains("mock_config")) c.mock_config = mock::MockConfig::from_json(j["mock_config"]);
    if (j.contains("backends"))
      for (auto it = j["backends"].begin(); it != j["backends"].end(); ++it) {
        Role r = role_from_string(it.key());
        c.backends[r] = BackendConfig::from_json(it.value(), r);
      }
    c.workers = j.value("workers", c.workers);
    if (auto d = j.value("discovery", json::object()); !d.empty()) {
      c.discovery.subset_size = d.value("subset_size", c.discovery.subset_size);
      c.discovery.images_per_concept = d.value("images_per_concept", c.discovery.images_per_concept);
      c.discovery.threshold = d.value("threshold", c.discovery.threshold);
      c.discovery.rounds = d.value("rounds", c.discovery.rounds);
    }
    if (auto e = j.value("extraction", json::object()); !e.empty()) {
      c.extraction.max_features = e.value("max_features", c.extraction.max_features);
      c.extraction.visual_images = e.value("visual_images", c.extraction.visual_images);
      if (e.contains("decode")) c.extraction.decode = DecodeParams::from_json(e["decode"]);
    }
    if (auto f = j.value("filter", json::object()); !f.empty()) {
      c.filter.d_threshold = f.value("d_threshold", c.filter.d_threshold);
      c.filter.top_k = f.value("top_k", c.filter.top_k);
      c.filter.max_pairs = f.value("max_pairs", c.filter.max_pairs);
    }
    if (auto a = j.value("augment", json::object()); !a.empty()) {
      c.augment.n = a.value("n", c.augment.n);
      c.augment.ranking = a.value("ranking", "mean_similarity") == "seeded" ? Ranking::seeded : Ranking::mean_similarity;
      c.augment.verification.mode =
          a.value("verification_mode", "boolean") == "confidence" ? VerificationMode::confidence : VerificationMode::boolean;
      c.augment.verification.confidence_threshold =
          a.value("confidence_threshold", c.augment.verification.confidence_threshold);
    }
    if (auto e = j.value("evaluation", json::object()); !e.empty()) {
      c.evaluation.option_pool = e.value("option_pool", "all") == "subset" ? OptionPool::subset : OptionPool::all;
      c.evaluation.subset_size = e.value("subset_size", c.evaluation.subset_size);
    }
    c.apply_workers();
    return c;
  }

  static RunConfig load(const fs::path& p) {
    if (!fs::exists(p)) throw MissingInputError(p);
    try {
      return from_json(json::parse(read_file(p)));
    } catch (const json::exception& e) {
      throw ConfigError("invalid config " + p.string() + ": " + e.what());
    }
  }

  void apply_workers() {
    discovery.workers = extraction.workers = filter.workers = augment.verification.workers = evaluation.workers = workers;
  }
};

inline std::shared_ptr<Gateway> make_gateway(const RunConfig& cfg) {
  auto cache = cfg.cache_dir.empty() ? std::make_shared<ResponseCache>() : std::make_shared<ResponseCache>(cfg.cache_dir);
  std::map<Role, std::shared_ptr<Backend>> backends;
  std::map<Role, BackendConfig> configs;
  if (cfg.mock) {
    auto backend = std::make_shared<mock::MockBackend>(cfg.mock_config);
    for (Role r : kAllRoles) {
      BackendConfig b;
      b.role = r;
      b.model_id = "mock-" + to_string(r);
      b.max_concurrent = std::max<std::size_t>(cfg.workers, 1);
      backends[r] = backend;
      configs[r] = b;
    }
  } else {
    for (const auto& [role, b] : cfg.backends) {
      if (b.base_url.empty()) continue;
      backends[role] = std::make_shared<HttpBackend>(b);
      configs[role] = b;
    }
  }
  return std::make_shared<Gateway>(std::move(backends), std::move(configs), std::move(cache));
}

// --- run metadata -----------------------------------------------------------

struct StageRecord {
  std::string stage;
  std::vector<fs::path> inputs;
  json parameters = json::object();

  /// Input/output files are keyed by file name so runs in different
  /// directories produce identical metadata.
  json to_json(const std::vector<fs::path>& outputs, const Gateway* gw) const {
    json in = json::object(), out = json::object(), models = json::object();
    for (const auto& p : inputs) in[p.filename().string()] = sha256_hex(read_file(p));
    for (const auto& p : outputs) out[p.filename().string()] = sha256_hex(read_file(p));
    if (gw != nullptr)
      for (Role r : kAllRoles)
        if (gw->has(r)) models[to_string(r)] = gw->config(r).model_id;
    return {{"stage", stage},   {"inputs", in},          {"outputs", out},
            {"parameters", parameters}, {"backends", models}, {"templates", prompts::template_hashes()}};
  }
};

inline void require_inputs(const std::vector<fs::path>& inputs) {
  for (const auto& p : inputs)
    if (!fs::exists(p)) throw MissingInputError(p);
}

/// Writes every (path, content) pair to a temp file, then renames them all,
/// then writes "<first output>.meta.json".
inline void commit_outputs(const std::vector<std::pair<fs::path, std::string>>& outputs, const StageRecord& record,
                           const Gateway* gw) {
  std::vector<std::unique_ptr<AtomicFile>> files;
  for (const auto& [path, content] : outputs) {
    files.push_back(std::make_unique<AtomicFile>(path));
    files.back()->stream().write(content.data(), static_cast<std::streamsize>(content.size()));
  }
  for (auto& f : files) f->commit();
  std::vector<fs::path> paths;
  for (const auto& [path, content] : outputs) paths.push_back(path);
  write_file_atomic(fs::path(paths.front().string() + ".meta.json"), record.to_json(paths, gw).dump(2) + "\n");
}

inline fs::path sidecar(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  return fs::path(p.string() + suffix);
}

// --- stages -----------------------------------------------------------------

inline void stage_ingest(const fs::path& root, const fs::path& out, std::uint64_t seed, std::size_t train_n,
                         std::size_t val_n, std::size_t test_n) {
  auto m = ingest(root, {}, seed);
  if (train_n + val_n + test_n > 0) m = split(m, train_n, val_n, test_n);
  StageRecord rec{"ingest", {}, {{"seed", seed}, {"split", {train_n, val_n, test_n}}}};
  commit_outputs({{out, dump_records(m.to_records(out))}}, rec, nullptr);
}

inline void stage_discover(const RunConfig& cfg, Gateway& gw, const fs::path& manifest_path, const fs::path& out) {
  require_inputs({manifest_path});
  auto m = CorpusManifest::load(manifest_path);
  auto result = discover_pairs(gw, m, cfg.discovery, cfg.seed);
  std::vector<json> pairs, probes;
  for (const auto& p : result.pairs) pairs.push_back(p.to_json());
  for (const auto& p : result.probes) probes.push_back(p.to_json());
  StageRecord rec{"discover-pairs", {manifest_path}, {{"discovery", cfg.discovery.to_json()}, {"seed", cfg.seed}}};
  commit_outputs({{out, dump_records(pairs)}, {sidecar(out, ".probes.jsonl"), dump_records(probes)}}, rec, &gw);
}

struct ExtractOptions {
  /// Also extract for concepts that are not the target of a flagged pair,
  /// using the most frequent misprediction from the probe log as C_M.
  bool all_concepts = false;
};

inline void stage_extract(const RunConfig& cfg, Gateway& gw, const fs::path& manifest_path, const fs::path& pairs_path,
                          const fs::path& out, const ExtractOptions& opts = {}) {
  require_inputs({manifest_path, pairs_path});
  auto m = CorpusManifest::load(manifest_path);
  std::vector<std::pair<std::string, std::string>> jobs;
  std::set<std::string> targets;
  for (const auto& r : read_records(pairs_path)) {
    auto p = ConfusablePair::from_json(r);
    jobs.emplace_back(p.target, p.misidentified);
    targets.insert(p.target);
  }
  std::vector<fs::path> inputs = {manifest_path, pairs_path};
  if (opts.all_concepts) {
    fs::path probes_path = sidecar(pairs_path, ".probes.jsonl");
    require_inputs({probes_path});
    inputs.push_back(probes_path);
    std::vector<ProbeResult> probes;
    for (const auto& r : read_records(probes_path)) probes.push_back(ProbeResult::from_json(r));
    for (const auto& c : m.concepts) {
      if (targets.count(c.id)) continue;
      std::vector<std::string> candidates;
      for (const auto& o : m.concepts)
        if (o.id != c.id) candidates.push_back(o.id);
      try {
        jobs.emplace_back(c.id, acquire_misidentified(c.id, candidates, probes));
      } catch (const PreconditionError& e) {
        warn(std::string(e.what()) + "; skipped");
      }
    }
  }
  std::sort(jobs.begin(), jobs.end());
  std::vector<std::vector<Feature>> per_job(jobs.size());
  parallel_for(jobs.size(), cfg.workers, [&](std::size_t i) {
    per_job[i] = extract_for_pair(gw, m, jobs[i].first, jobs[i].second, cfg.modes, cfg.extraction);
  });
  std::vector<json> records;
  for (const auto& list : per_job)
    for (const auto& f : list) records.push_back(f.to_json());
  StageRecord rec{"extract-features",
                  inputs,
                  {{"extraction", cfg.extraction.to_json()},
                   {"modes", {{"textual", cfg.modes.textual}, {"visual", cfg.modes.visual}, {"contrastive", cfg.modes.contrastive}}},
                   {"all_concepts", opts.all_concepts}}};
  commit_outputs({{out, dump_records(records)}}, rec, &gw);
}

/// Supplier generating |I| images per feature from a single-feature prompt.
inline GenerabilitySupplier generation_supplier(Gateway& gw, const CorpusManifest& m, std::size_t n, std::uint64_t seed) {
  return [&gw, &m, n, seed](const Feature& f) {
    const std::string prompt = build_prompt(m.get_concept(f.target), {f});
    auto gen = gw.generate_image(prompt, n, derive_seed(seed, "generability/" + f.target + "/" + f.id));
    std::vector<Embedding> out;
    for (const auto& img : gen.images) out.push_back(gw.embed_image(img));
    return out;
  };
}

inline void stage_filter(const RunConfig& cfg, Gateway& gw, const fs::path& manifest_path, const fs::path& features_path,
                         const fs::path& out) {
  require_inputs({features_path, manifest_path});
  auto m = CorpusManifest::load(manifest_path);
  auto features = load_features(features_path);
  std::map<std::pair<std::string, std::string>, std::vector<Feature>> groups;
  for (auto& f : features) {
    if (f.misidentified.empty()) throw IntegrityError("feature " + f.id + " of " + f.target + " has no misidentified concept");
    groups[{f.target, f.misidentified}].push_back(std::move(f));
  }
  std::vector<json> records;
  for (auto& [key, list] : groups) {
    auto ctx = make_pair_context(gw, m, key.first, key.second, cfg.filter.max_pairs, cfg.seed);
    filter_and_select(list, ctx, generation_supplier(gw, m, ctx.pair_count(), cfg.seed), cfg.filter);
    for (const auto& f : list) records.push_back(f.to_json());
  }
  StageRecord rec{"filter-features", {manifest_path, features_path}, {{"filter", cfg.filter.to_json()}, {"seed", cfg.seed}}};
  commit_outputs({{out, dump_records(records)}}, rec, &gw);
}

inline void stage_augment(const RunConfig& cfg, Gateway& gw, const fs::path& manifest_path, const fs::path& selected_path,
                          const fs::path& out) {
  require_inputs({selected_path, manifest_path});
  auto m = CorpusManifest::load(manifest_path);
  std::map<std::pair<std::string, std::string>, std::vector<Feature>> groups;
  for (auto& f : load_features(selected_path))
    if (f.status == FeatureStatus::selected) groups[{f.target, f.misidentified}].push_back(std::move(f));
  std::vector<std::pair<std::string, std::string>> keys;
  for (auto& [key, list] : groups) {
    std::sort(list.begin(), list.end(), [](const Feature& a, const Feature& b) {
      if (a.g_score.value_or(0) != b.g_score.value_or(0)) return a.g_score.value_or(0) > b.g_score.value_or(0);
      return a.id < b.id;
    });
    if (list.size() > kMaxPromptFeatures) list.resize(kMaxPromptFeatures);
    keys.push_back(key);
  }
  std::vector<AugmentationBatch> batches(keys.size());
  parallel_for(keys.size(), cfg.workers, [&](std::size_t i) {
    batches[i] = augment(gw, m, keys[i].first, keys[i].second, groups[keys[i]], cfg.seed, cfg.augment);
  });
  std::vector<json> records;
  for (const auto& b : batches) records.push_back(b.to_json());
  StageRecord rec{"augment", {manifest_path, selected_path}, {{"augment", cfg.augment.to_json()}, {"seed", cfg.seed}}};
  commit_outputs({{out, dump_records(records)}}, rec, &gw);
}

enum class EvalScope { all, featured };

inline EvalResult stage_evaluate(const RunConfig& cfg, Gateway& gw, const fs::path& manifest_path,
                                 const ExperimentConfig& exp, const std::optional<fs::path>& features_path,
                                 const fs::path& out, EvalScope scope = EvalScope::all) {
  std::vector<fs::path> inputs = {manifest_path};
  if (features_path) inputs.push_back(*features_path);
  require_inputs(inputs);
  auto m = CorpusManifest::load(manifest_path);
  EvalParams params = cfg.evaluation;
  FeatureMap fmap;
  if (features_path) {
    auto features = load_features(*features_path);
    fmap = selected_feature_map(features);
    for (const auto& f : features)
      if (f.status == FeatureStatus::selected) params.confusable.emplace(f.target, f.misidentified);
  }
  if (scope == EvalScope::featured) {
    params.concepts.clear();
    for (const auto& [id, list] : fmap) params.concepts.push_back(id);
    if (params.concepts.empty()) throw PreconditionError("evaluate: no concept has selected features");
  }
  auto result = evaluate(gw, m, exp, features_path ? &fmap : nullptr, params);
  std::vector<json> log;
  for (const auto& p : result.probes) log.push_back(p.to_json());
  StageRecord rec{"evaluate",
                  inputs,
                  {{"experiment", exp.to_json()},
                   {"evaluation", params.to_json()},
                   {"scope", scope == EvalScope::all ? "all" : "featured"}}};
  commit_outputs({{out, result.to_json().dump(2) + "\n"}, {sidecar(out, ".probes.jsonl"), dump_records(log)}}, rec, &gw);
  return result;
}

inline std::size_t stage_export(const fs::path& manifest_path, const fs::path& batches_path, const ExperimentConfig& exp,
                                const fs::path& out, ExportScope scope = ExportScope::all) {
  require_inputs({manifest_path, batches_path});
  auto m = CorpusManifest::load(manifest_path);
  auto records = export_finetune(m, load_batches(batches_path), exp, scope);
  StageRecord rec{"export-finetune",
                  {manifest_path, batches_path},
                  {{"experiment", exp.to_json()}, {"scope", scope == ExportScope::all ? "all" : "augmented"}}};
  commit_outputs({{out, dump_records(records)}}, rec, nullptr);
  return records.size();
}

// --- mock corpus and end-to-end run -----------------------------------------

/// <root>/species-XX/img-YYY.img holding mock image records.
inline void make_mock_corpus(const fs::path& root, std::size_t concepts, std::size_t images_per_concept) {
  for (std::size_t c = 0; c < concepts; ++c) {
    char id[32];
    std::snprintf(id, sizeof id, "species-%02zu", c);
    for (std::size_t i = 0; i < images_per_concept; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "img-%03zu.img", i);
      write_file_atomic(root / id / name, mock::real_image(id, i));
    }
  }
}

struct E2EOptions {
  std::size_t concepts = 64;
  std::size_t images_per_concept = 35;
  std::size_t annotation_items = 100;
  std::size_t augment_n = 16;
  /// Option pool for evaluation; a subset keeps the baseline near 1/15.
  std::size_t eval_subset = 15;
};

/// Full pipeline on the mock backend inside `out`. Returns the summary that is
/// also written to <out>/summary.json.
inline json run_e2e(RunConfig cfg, const fs::path& out, const E2EOptions& opts = {}) {
  cfg.mock = true;
  cfg.augment.n = opts.augment_n;
  if (opts.eval_subset > 0) {
    cfg.evaluation.option_pool = OptionPool::subset;
    cfg.evaluation.subset_size = opts.eval_subset;
  }
  cfg.apply_workers();
  auto gw = make_gateway(cfg);
  fs::create_directories(out);
  const fs::path corpus = out / "corpus";
  make_mock_corpus(corpus, opts.concepts, opts.images_per_concept);
  const fs::path manifest = out / "manifest.jsonl";
  stage_ingest(corpus, manifest, cfg.seed, 5, 15, 15);
  stage_discover(cfg, *gw, manifest, out / "pairs.jsonl");
  stage_extract(cfg, *gw, manifest, out / "pairs.jsonl", out / "features.jsonl", {.all_concepts = true});
  stage_filter(cfg, *gw, manifest, out / "features.jsonl", out / "selected.jsonl");
  stage_augment(cfg, *gw, manifest, out / "selected.jsonl", out / "batches.jsonl");

  ExperimentConfig plain;
  plain.name = "no-features";
  plain.seed = cfg.seed;
  ExperimentConfig in_context = plain;
  in_context.name = "in-context-features";
  in_context.in_context_features = true;
  auto baseline = stage_evaluate(cfg, *gw, manifest, plain, out / "selected.jsonl", out / "eval_baseline.json",
                                 EvalScope::featured);
  auto guided = stage_evaluate(cfg, *gw, manifest, in_context, out / "selected.jsonl", out / "eval_in_context.json",
                               EvalScope::featured);

  json exports = json::object();
  for (const auto& ratio : experiment_ratios()) {
    auto exp = ExperimentConfig::from_ratio(ratio, cfg.seed);
    if (exp.mode != ExperimentMode::fixed_real) continue;
    std::string name = ratio;
    std::replace(name.begin(), name.end(), ':', '-');
    exports[ratio] = stage_export(manifest, out / "batches.jsonl", exp, out / "export" / ("finetune_" + name + ".jsonl"),
                                  ExportScope::augmented);
  }

  auto m = CorpusManifest::load(manifest);
  auto selected = load_features(out / "selected.jsonl");
  auto batches = load_batches(out / "batches.jsonl");
  SessionStore store(out / "human_eval");
  json sessions = json::object();
  for (Condition c : {Condition::real_target, Condition::real_misidentified, Condition::synthetic_target}) {
    auto pool = annotation_pool(m, selected, batches, c);
    auto s = create_session(m, selected, batches, c, std::min(opts.annotation_items, pool.size()), cfg.seed,
                            {"annotator-1", "annotator-2", "annotator-3"});
    store.save_session(s);
    sessions[to_string(c)] = s.items.size();
  }

  std::size_t selected_count = 0, mismatched = 0;
  for (const auto& f : selected) {
    if (f.status != FeatureStatus::selected) continue;
    ++selected_count;
    if (mock::find_tag(f.text) != f.target) ++mismatched;
  }
  json summary = {{"seed", cfg.seed},
                  {"concepts", m.concepts.size()},
                  {"selected_features", selected_count},
                  {"selected_with_foreign_tag", mismatched},
                  {"baseline_accuracy", baseline.accuracy ? json(*baseline.accuracy) : json(nullptr)},
                  {"in_context_accuracy", guided.accuracy ? json(*guided.accuracy) : json(nullptr)},
                  {"eval_probes", guided.probes.size()},
                  {"exports", exports},
                  {"annotation_sessions", sessions},
                  {"config", cfg.to_json()}};
  write_file_atomic(out / "summary.json", summary.dump(2) + "\n");
  return summary;
}

}  // namespace coda
