#pragma once

#include <atomic>
#include <cmath>
#include <deque>
#include <random>
#include <thread>

#include "coda/pipeline.hpp"

namespace coda::testing {

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    path_ = fs::temp_directory_path() /
            ("coda-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// Backend whose replies are set by the test. Unset roles throw a
/// non-retryable TransportError.
class ScriptedBackend : public Backend {
 public:
  std::function<std::string(const Messages&)> on_chat;
  std::function<std::string(const Bytes&, const Messages&)> on_vision;
  std::function<std::vector<double>(const std::string&)> on_embed_text;
  std::function<std::vector<double>(const Bytes&)> on_embed_image;
  std::function<GeneratedImages(const std::string&, std::size_t, std::uint64_t)> on_generate;

  std::atomic<std::size_t> calls{0};
  std::atomic<std::size_t> in_flight{0};
  std::atomic<std::size_t> peak{0};
  std::chrono::milliseconds delay{0};

 private:
  template <typename F>
  static const F& need(const F& f) {
    if (!f) throw TransportError("not scripted", false, 400);
    return f;
  }

  template <typename Fn>
  auto run(Fn&& fn) {
    ++calls;
    std::size_t now = ++in_flight;
    std::size_t prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    if (delay.count() > 0) std::this_thread::sleep_for(delay);
    try {
      auto r = fn();
      --in_flight;
      return r;
    } catch (...) {
      --in_flight;
      throw;
    }
  }

 public:
  std::string chat(const Messages& p, const DecodeParams&) override {
    return run([&] { return need(on_chat)(p); });
  }
  std::string vision_chat(const Bytes& img, const Messages& p, const DecodeParams&) override {
    return run([&] { return need(on_vision)(img, p); });
  }
  std::vector<double> embed_text(const std::string& t) override {
    return run([&] { return need(on_embed_text)(t); });
  }
  std::vector<double> embed_image(const Bytes& b) override {
    return run([&] { return need(on_embed_image)(b); });
  }
  GeneratedImages generate_image(const std::string& p, std::size_t n, std::uint64_t s) override {
    return run([&] { return need(on_generate)(p, n, s); });
  }
};

inline BackendConfig backend_config(Role role, std::string model = "test-model") {
  BackendConfig c;
  c.role = role;
  c.model_id = std::move(model);
  c.retries = 2;
  c.max_concurrent = 4;
  return c;
}

/// Gateway with every role served by `backend`.
inline std::shared_ptr<Gateway> gateway_for(std::shared_ptr<Backend> backend, std::size_t max_concurrent = 4,
                                            unsigned retries = 2) {
  std::map<Role, std::shared_ptr<Backend>> b;
  std::map<Role, BackendConfig> c;
  for (Role r : kAllRoles) {
    b[r] = backend;
    c[r] = backend_config(r, "model-" + to_string(r));
    c[r].max_concurrent = max_concurrent;
    c[r].retries = retries;
  }
  return std::make_shared<Gateway>(b, c);
}

inline std::shared_ptr<Gateway> mock_gateway(mock::MockConfig cfg = {}, std::size_t workers = 4) {
  RunConfig rc;
  rc.mock = true;
  rc.mock_config = cfg;
  rc.workers = workers;
  return make_gateway(rc);
}

/// Mock corpus on disk plus its split manifest.
inline CorpusManifest mock_manifest(const fs::path& root, std::size_t concepts, std::size_t images,
                                    std::size_t train = 5, std::size_t val = 15, std::size_t test = 15,
                                    std::uint64_t seed = 0) {
  make_mock_corpus(root, concepts, images);
  auto m = ingest(root, {}, seed);
  if (train + val + test > 0) m = split(m, train, val, test);
  return m;
}

inline std::string concept_name(std::size_t i) {
  char id[32];
  std::snprintf(id, sizeof id, "species-%02zu", i);
  return id;
}

// --- independent oracles ----------------------------------------------------
// Written directly from the formulas; none of these call library scoring code.

inline double oracle_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<long double>(a[i]) * b[i];
    aa += static_cast<long double>(a[i]) * a[i];
    bb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>(ab / std::sqrt(aa * bb));
}

inline double oracle_sim(const std::vector<double>& f, const std::vector<double>& img) {
  return (1.0 + oracle_cosine(f, img)) / 2.0;
}

/// mean over i of s(f, a_i) / (s(f, a_i) + s(f, b_i)); 0/0 counts as 1/2.
inline double oracle_ratio_mean(const std::vector<double>& f, const std::vector<std::vector<double>>& a,
                                const std::vector<std::vector<double>>& b) {
  const std::size_t n = std::min(a.size(), b.size());
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double x = oracle_sim(f, a[i]);
    double y = oracle_sim(f, b[i]);
    total += (x + y == 0.0) ? 0.5 : x / (x + y);
  }
  return total / static_cast<double>(n);
}

/// Pairs flagged by a full confusion-matrix recount. Returns
/// (target, misidentified) → (rate t→m, rate m→t).
inline std::map<std::pair<std::string, std::string>, std::pair<double, double>> oracle_flag_pairs(
    const std::vector<ProbeResult>& probes, double threshold) {
  std::set<std::string> ids;
  for (const auto& p : probes) {
    ids.insert(p.gold);
    if (p.predicted != "unparsed") ids.insert(p.predicted);
  }
  std::vector<std::string> v(ids.begin(), ids.end());
  const std::size_t n = v.size();
  std::vector<std::vector<double>> count(n, std::vector<double>(n, 0.0));
  std::vector<double> parsed(n, 0.0);
  auto index = [&](const std::string& s) {
    return static_cast<std::size_t>(std::find(v.begin(), v.end(), s) - v.begin());
  };
  for (const auto& p : probes) {
    if (p.predicted == "unparsed") continue;
    parsed[index(p.gold)] += 1;
    count[index(p.gold)][index(p.predicted)] += 1;
  }
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double ij = parsed[i] > 0 ? count[i][j] / parsed[i] : 0.0;
      double ji = parsed[j] > 0 ? count[j][i] / parsed[j] : 0.0;
      if (!(ij > threshold) && !(ji > threshold)) continue;
      if (ij >= ji) out[{v[i], v[j]}] = {ij, ji};
      else out[{v[j], v[i]}] = {ji, ij};
    }
  return out;
}

/// Fleiss' kappa from a full judgment table (items × raters), computing
/// per-item agreement by enumerating ordered rater pairs.
inline double oracle_kappa(const std::vector<std::vector<bool>>& table) {
  const double N = static_cast<double>(table.size());
  const double n = static_cast<double>(table.front().size());
  double agree_sum = 0.0, yes_total = 0.0;
  for (const auto& row : table) {
    double agree = 0;
    for (std::size_t a = 0; a < row.size(); ++a)
      for (std::size_t b = 0; b < row.size(); ++b)
        if (a != b && row[a] == row[b]) agree += 1;
    agree_sum += agree / (n * (n - 1));
    for (bool j : row) yes_total += j ? 1 : 0;
  }
  const double p_bar = agree_sum / N;
  const double p_yes = yes_total / (N * n);
  const double p_e = p_yes * p_yes + (1 - p_yes) * (1 - p_yes);
  return (p_bar - p_e) / (1 - p_e);
}

}  // namespace coda::testing
