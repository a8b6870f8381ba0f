// coda: command-line entry point for the augmentation pipeline.
//
// Global flags go before the subcommand. `evaluate --config` names an
// experiment config, not the run config.

#include <csignal>
#include <iostream>

#include "CLI11.hpp"
#include "coda/annotation_server.hpp"
#include "coda/pipeline.hpp"

using namespace coda;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!trim(cur).empty()) out.push_back(std::string(trim(cur)));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) out.push_back(std::string(trim(cur)));
  return out;
}

AnnotationServer* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive visual data augmentation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, cache_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  bool use_mock = false;
  app.add_option("--config", config_path, "Run config (JSON, ${VAR} interpolated)");
  app.add_option("--seed", seed, "Run seed");
  app.add_option("--cache-dir", cache_dir, "Response cache directory");
  app.add_option("--workers", workers, "Parallel backend requests per stage");
  app.add_flag("--mock", use_mock, "Use the deterministic mock backend");

  // Each subcommand stores its action here; it runs after the config is resolved.
  std::function<int(RunConfig&)> action;

  // --- corpus ------------------------------------------------------------
  std::string mock_out;
  std::size_t mock_concepts = 64, mock_images = 35;
  auto* mk = app.add_subcommand("make-mock-corpus", "Write a mock image corpus");
  mk->add_option("--out", mock_out, "Corpus root")->required();
  mk->add_option("--concepts", mock_concepts);
  mk->add_option("--images", mock_images, "Images per concept");
  mk->callback([&] {
    action = [&](RunConfig&) {
      make_mock_corpus(mock_out, mock_concepts, mock_images);
      std::cout << "wrote " << mock_concepts * mock_images << " images under " << mock_out << "\n";
      return 0;
    };
  });

  std::string ingest_root, ingest_out;
  std::vector<std::size_t> ingest_split;
  auto* ing = app.add_subcommand("ingest", "Build a corpus manifest from <root>/<concept>/<image>");
  ing->add_option("--root", ingest_root)->required()->check(CLI::ExistingDirectory);
  ing->add_option("--out", ingest_out)->required();
  ing->add_option("--split", ingest_split, "train val test counts per concept")->expected(3)->delimiter(',');
  ing->callback([&] {
    action = [&](RunConfig& cfg) {
      std::size_t t = 0, v = 0, s = 0;
      if (ingest_split.size() == 3) t = ingest_split[0], v = ingest_split[1], s = ingest_split[2];
      stage_ingest(ingest_root, ingest_out, cfg.seed, t, v, s);
      auto m = CorpusManifest::load(ingest_out);
      std::cout << m.concepts.size() << " concepts, " << m.assets.size() << " assets\n";
      return 0;
    };
  });

  std::string split_manifest, split_out;
  std::size_t split_train = 5, split_val = 15, split_test = 15;
  auto* spl = app.add_subcommand("split", "Assign train/val/test splits");
  spl->add_option("--manifest", split_manifest)->required();
  spl->add_option("--train", split_train);
  spl->add_option("--val", split_val);
  spl->add_option("--test", split_test);
  spl->add_option("--out", split_out, "Output manifest (default: overwrite)");
  spl->callback([&] {
    action = [&](RunConfig&) {
      require_inputs({split_manifest});
      auto m = split(CorpusManifest::load(split_manifest), split_train, split_val, split_test);
      fs::path out = split_out.empty() ? fs::path(split_manifest) : fs::path(split_out);
      StageRecord rec{"split", {split_manifest}, {{"split", {split_train, split_val, split_test}}}};
      commit_outputs({{out, dump_records(m.to_records(out))}}, rec, nullptr);
      return 0;
    };
  });

  std::string verify_manifest;
  auto* ver = app.add_subcommand("verify", "Check manifest hashes and invariants");
  ver->add_option("--manifest", verify_manifest)->required();
  ver->callback([&] {
    action = [&](RunConfig&) {
      require_inputs({verify_manifest});
      auto violations = verify(CorpusManifest::load(verify_manifest));
      for (const auto& v : violations) std::cout << v.kind << ": " << v.detail << "\n";
      if (violations.empty()) std::cout << "ok\n";
      return violations.empty() ? 0 : 3;
    };
  });

  // --- pipeline stages ------------------------------------------------------
  std::string dp_manifest, dp_out;
  std::optional<std::size_t> dp_subset, dp_rounds, dp_ipc;
  std::optional<double> dp_threshold;
  auto* dp = app.add_subcommand("discover-pairs", "Probe the vision model and flag confusable pairs");
  dp->add_option("--manifest", dp_manifest)->required();
  dp->add_option("--subset-size", dp_subset);
  dp->add_option("--threshold", dp_threshold);
  dp->add_option("--rounds", dp_rounds, "Subset partitions; rates are pooled across rounds");
  dp->add_option("--images-per-concept", dp_ipc);
  dp->add_option("--out", dp_out)->required();
  dp->callback([&] {
    action = [&](RunConfig& cfg) {
      if (dp_subset) cfg.discovery.subset_size = *dp_subset;
      if (dp_threshold) cfg.discovery.threshold = *dp_threshold;
      if (dp_rounds) cfg.discovery.rounds = *dp_rounds;
      if (dp_ipc) cfg.discovery.images_per_concept = *dp_ipc;
      auto gw = make_gateway(cfg);
      stage_discover(cfg, *gw, dp_manifest, dp_out);
      std::cout << read_records(dp_out).size() << " confusable pairs\n";
      return 0;
    };
  });

  std::string ef_manifest, ef_pairs, ef_out, ef_modes = "textual,visual";
  bool ef_contrastive = false, ef_all = false;
  auto* ef = app.add_subcommand("extract-features", "Extract textual and visual features per pair");
  ef->add_option("--manifest", ef_manifest)->required();
  ef->add_option("--pairs", ef_pairs)->required();
  ef->add_option("--modes", ef_modes, "Comma list of textual, visual");
  ef->add_flag("--contrastive", ef_contrastive);
  ef->add_flag("--all-concepts", ef_all, "Also cover concepts without a flagged pair");
  ef->add_option("--out", ef_out)->required();
  ef->callback([&] {
    action = [&](RunConfig& cfg) {
      cfg.modes.textual = cfg.modes.visual = false;
      for (const auto& m : split_list(ef_modes)) {
        if (m == "textual") cfg.modes.textual = true;
        else if (m == "visual") cfg.modes.visual = true;
        else throw ConfigError("unknown extraction mode '" + m + "'");
      }
      cfg.modes.contrastive = ef_contrastive;
      auto gw = make_gateway(cfg);
      stage_extract(cfg, *gw, ef_manifest, ef_pairs, ef_out, {.all_concepts = ef_all});
      std::cout << read_records(ef_out).size() << " features\n";
      return 0;
    };
  });

  std::string ff_features, ff_manifest, ff_out;
  std::optional<double> ff_d;
  std::optional<std::size_t> ff_k, ff_pairs;
  auto* ff = app.add_subcommand("filter-features", "Score D and G and select features");
  ff->add_option("--features", ff_features)->required();
  ff->add_option("--manifest", ff_manifest)->required();
  ff->add_option("--d-threshold", ff_d);
  ff->add_option("--top-k", ff_k);
  ff->add_option("--max-pairs", ff_pairs, "Image pairs used for D and generated images for G");
  ff->add_option("--out", ff_out)->required();
  ff->callback([&] {
    action = [&](RunConfig& cfg) {
      if (ff_d) cfg.filter.d_threshold = *ff_d;
      if (ff_k) cfg.filter.top_k = *ff_k;
      if (ff_pairs) cfg.filter.max_pairs = *ff_pairs;
      auto gw = make_gateway(cfg);
      stage_filter(cfg, *gw, ff_manifest, ff_features, ff_out);
      std::size_t selected = 0;
      for (const auto& f : load_features(ff_out)) selected += f.status == FeatureStatus::selected;
      std::cout << selected << " selected features\n";
      return 0;
    };
  });

  std::string au_selected, au_manifest, au_out, au_ranking, au_verification;
  std::optional<std::size_t> au_n;
  auto* au = app.add_subcommand("augment", "Generate, verify and rank synthetic images");
  au->add_option("--selected", au_selected)->required();
  au->add_option("--manifest", au_manifest)->required();
  au->add_option("--n", au_n, "Candidates generated per pair");
  au->add_option("--ranking", au_ranking)->check(CLI::IsMember({"mean_similarity", "seeded"}));
  au->add_option("--verification", au_verification)->check(CLI::IsMember({"boolean", "confidence"}));
  au->add_option("--out", au_out)->required();
  au->callback([&] {
    action = [&](RunConfig& cfg) {
      if (au_n) cfg.augment.n = *au_n;
      if (!au_ranking.empty()) cfg.augment.ranking = au_ranking == "seeded" ? Ranking::seeded : Ranking::mean_similarity;
      if (!au_verification.empty())
        cfg.augment.verification.mode =
            au_verification == "confidence" ? VerificationMode::confidence : VerificationMode::boolean;
      auto gw = make_gateway(cfg);
      stage_augment(cfg, *gw, au_manifest, au_selected, au_out);
      std::size_t kept = 0;
      for (const auto& b : load_batches(au_out)) kept += b.kept.size();
      std::cout << kept << " synthetic images kept\n";
      return 0;
    };
  });

  std::string ev_manifest, ev_config, ev_features, ev_out, ev_ratio, ev_pool, ev_scope = "all";
  bool ev_in_context = false;
  std::optional<std::size_t> ev_subset;
  auto* ev = app.add_subcommand("evaluate", "Classify test images with the vision model");
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--config", ev_config, "Experiment config (JSON)");
  ev->add_option("--ratio", ev_ratio, "Experiment ratio R:S when no --config is given");
  ev->add_flag("--in-context", ev_in_context, "Show selected features in the prompt");
  ev->add_option("--features", ev_features);
  ev->add_option("--option-pool", ev_pool)->check(CLI::IsMember({"all", "subset"}));
  ev->add_option("--subset-size", ev_subset);
  ev->add_option("--scope", ev_scope, "all concepts or only concepts with selected features")
      ->check(CLI::IsMember({"all", "featured"}));
  ev->add_option("--out", ev_out)->required();
  ev->callback([&] {
    action = [&](RunConfig& cfg) {
      ExperimentConfig exp;
      if (!ev_config.empty()) {
        require_inputs({ev_config});
        exp = ExperimentConfig::from_json(interpolate_env(json::parse(read_file(ev_config))));
      } else {
        exp = ExperimentConfig::from_ratio(ev_ratio.empty() ? "5:0" : ev_ratio, cfg.seed);
      }
      if (ev_in_context) exp.in_context_features = true;
      if (exp.in_context_features && ev_features.empty())
        throw ConfigError("in-context evaluation needs --features");
      if (!ev_pool.empty()) cfg.evaluation.option_pool = ev_pool == "subset" ? OptionPool::subset : OptionPool::all;
      if (ev_subset) cfg.evaluation.subset_size = *ev_subset;
      auto gw = make_gateway(cfg);
      std::optional<fs::path> features;
      if (!ev_features.empty()) features = ev_features;
      auto r = stage_evaluate(cfg, *gw, ev_manifest, exp, features, ev_out,
                              ev_scope == "featured" ? EvalScope::featured : EvalScope::all);
      std::cout << "accuracy " << (r.accuracy ? std::to_string(*r.accuracy) : std::string("n/a")) << " over "
                << r.probes.size() << " probes" << (r.incomplete ? " (incomplete)" : "") << "\n";
      return r.incomplete ? 4 : 0;
    };
  });

  std::string ex_manifest, ex_batches, ex_ratio, ex_out, ex_scope = "all";
  auto* ex = app.add_subcommand("export-finetune", "Write instruction-tuning records for one ratio");
  ex->add_option("--manifest", ex_manifest)->required();
  ex->add_option("--batches", ex_batches)->required();
  ex->add_option("--ratio", ex_ratio)->required();
  ex->add_option("--scope", ex_scope, "all concepts or only augmented ones")->check(CLI::IsMember({"all", "augmented"}));
  ex->add_option("--out", ex_out)->required();
  ex->callback([&] {
    action = [&](RunConfig& cfg) {
      auto exp = ExperimentConfig::from_ratio(ex_ratio, cfg.seed);
      auto n = stage_export(ex_manifest, ex_batches, exp, ex_out,
                            ex_scope == "augmented" ? ExportScope::augmented : ExportScope::all);
      std::cout << n << " records\n";
      return 0;
    };
  });

  // --- human evaluation -----------------------------------------------------
  auto* he = app.add_subcommand("human-eval", "Annotation sessions");
  he->require_subcommand(1);
  std::string he_dir = "human_eval";
  he->add_option("--dir", he_dir, "Session store directory");

  std::string hc_manifest, hc_features, hc_batches, hc_condition, hc_annotators, hc_id;
  std::size_t hc_items = 100;
  auto* hc = he->add_subcommand("create", "Sample a session");
  hc->add_option("--manifest", hc_manifest)->required();
  hc->add_option("--features", hc_features)->required();
  hc->add_option("--batches", hc_batches);
  hc->add_option("--condition", hc_condition)
      ->required()
      ->check(CLI::IsMember({"real_target", "real_misidentified", "synthetic_target"}));
  hc->add_option("--items", hc_items);
  hc->add_option("--annotators", hc_annotators, "Comma list of annotator ids");
  hc->add_option("--id", hc_id);
  bool hc_names = false;
  hc->add_flag("--show-concept-names", hc_names);
  hc->callback([&] {
    action = [&](RunConfig& cfg) {
      std::vector<fs::path> inputs = {hc_manifest, hc_features};
      if (!hc_batches.empty()) inputs.push_back(hc_batches);
      require_inputs(inputs);
      auto m = CorpusManifest::load(hc_manifest);
      auto features = load_features(hc_features);
      std::vector<AugmentationBatch> batches;
      if (!hc_batches.empty()) batches = load_batches(hc_batches);
      auto s = create_session(m, features, batches, condition_from_string(hc_condition), hc_items, cfg.seed,
                              split_list(hc_annotators), hc_id);
      s.show_concept_names = hc_names;
      SessionStore store(he_dir);
      store.save_session(s);
      std::cout << store.session_path(s.id).string() << "\n";
      return 0;
    };
  });

  std::string hs_id;
  auto* hs = he->add_subcommand("stats", "Positive rate and Fleiss' kappa");
  hs->add_option("--id", hs_id)->required();
  hs->callback([&] {
    action = [&](RunConfig&) {
      SessionStore store(he_dir);
      std::cout << store.stats(hs_id).to_json().dump(2) << "\n";
      return 0;
    };
  });

  std::string hr_id, hr_annotator, hr_judgment;
  std::size_t hr_item = 0;
  auto* hr = he->add_subcommand("record", "Store one judgment");
  hr->add_option("--id", hr_id)->required();
  hr->add_option("--annotator", hr_annotator)->required();
  hr->add_option("--item", hr_item)->required();
  hr->add_option("--judgment", hr_judgment)->required()->check(CLI::IsMember({"yes", "no"}));
  hr->callback([&] {
    action = [&](RunConfig&) {
      SessionStore store(he_dir);
      std::cout << store.record(hr_id, hr_annotator, hr_item, hr_judgment == "yes").to_json().dump() << "\n";
      return 0;
    };
  });

  std::string sa_dir = "human_eval", sa_manifest, sa_ui, sa_host = "127.0.0.1";
  int sa_port = 8080;
  auto* sa = app.add_subcommand("serve-annotation", "Serve the annotation HTTP endpoints");
  sa->add_option("--dir", sa_dir, "Session store directory");
  sa->add_option("--manifest", sa_manifest, "Manifest whose root holds the images")->required();
  sa->add_option("--ui-dir", sa_ui, "Static UI files served at /");
  sa->add_option("--host", sa_host);
  sa->add_option("--port", sa_port, "0 picks a free port");
  sa->callback([&] {
    action = [&](RunConfig&) {
      require_inputs({sa_manifest});
      auto m = CorpusManifest::load(sa_manifest);
      SessionStore store(sa_dir);
      std::optional<fs::path> ui;
      if (!sa_ui.empty()) ui = sa_ui;
      AnnotationServer server(store, m.root, ui);
      int port = sa_port;
      if (port == 0) port = server.bind_to_any_port(sa_host);
      else if (!server.bind(sa_host, port)) throw Error("cannot bind " + sa_host + ":" + std::to_string(port));
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << sa_host << ":" << port << std::endl;
      server.listen_after_bind();
      g_server = nullptr;
      return 0;
    };
  });

  // --- end to end -----------------------------------------------------------
  std::string e2e_out = "e2e-out";
  E2EOptions e2e_opts;
  auto* e2e = app.add_subcommand("e2e", "Run every stage on the mock backend");
  e2e->add_option("--out", e2e_out);
  e2e->add_option("--concepts", e2e_opts.concepts);
  e2e->add_option("--images", e2e_opts.images_per_concept, "Images per concept");
  e2e->add_option("--annotation-items", e2e_opts.annotation_items);
  e2e->callback([&] {
    action = [&](RunConfig& cfg) {
      if (!use_mock) throw ConfigError("e2e runs on the mock backend; pass --mock");
      auto summary = run_e2e(cfg, e2e_out, e2e_opts);
      summary.erase("config");
      std::cout << summary.dump(2) << "\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (seed) cfg.seed = *seed;
    if (!cache_dir.empty()) cfg.cache_dir = cache_dir;
    if (use_mock) cfg.mock = true;
    if (workers) cfg.workers = *workers;
    cfg.mock_config.seed = cfg.seed;
    cfg.apply_workers();
    return action ? action(cfg) : 0;
  } catch (const MissingInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
