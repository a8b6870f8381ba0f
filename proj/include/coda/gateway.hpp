#pragma once

// Uniform client for the four model roles (chat, vision, embed, imagegen).
// The Gateway adds content-addressed caching, bounded retries, per-role
// concurrency limits and unit-normalization of embeddings on top of any
// Backend implementation.

#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <semaphore>
#include <shared_mutex>
#include <unordered_map>

#include "coda/core.hpp"

namespace coda {

enum class Role { chat, vision, embed, imagegen };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::chat: return "chat";
    case Role::vision: return "vision";
    case Role::embed: return "embed";
    case Role::imagegen: return "imagegen";
  }
  return "?";
}

inline Role role_from_string(const std::string& s) {
  if (s == "chat") return Role::chat;
  if (s == "vision") return Role::vision;
  if (s == "embed") return Role::embed;
  if (s == "imagegen") return Role::imagegen;
  throw ConfigError("unknown backend role: " + s);
}

inline constexpr std::array<Role, 4> kAllRoles = {Role::chat, Role::vision, Role::embed, Role::imagegen};

struct BackendConfig {
  Role role = Role::chat;
  std::string base_url;
  std::string model_id = "mock";
  std::string api_key_env;
  std::size_t max_concurrent = 4;
  std::chrono::milliseconds timeout{60000};
  unsigned retries = 2;
  std::size_t max_image_bytes = 20u << 20;

  void validate() const {
    if (max_concurrent < 1) throw ConfigError(to_string(role) + ": max_concurrent must be >= 1");
    if (retries > 10) throw ConfigError(to_string(role) + ": retries must be <= 10");
    if (model_id.empty()) throw ConfigError(to_string(role) + ": model_id must be set");
  }

  json to_json() const {
    return {{"role", to_string(role)},     {"base_url", base_url},
            {"model_id", model_id},        {"api_key_env", api_key_env},
            {"max_concurrent", max_concurrent}, {"timeout_ms", timeout.count()},
            {"retries", retries},          {"max_image_bytes", max_image_bytes}};
  }

  static BackendConfig from_json(const json& j, Role role) {
    BackendConfig c;
    c.role = role;
    c.base_url = j.value("base_url", "");
    c.model_id = j.value("model_id", c.model_id);
    c.api_key_env = j.value("api_key_env", "");
    c.max_concurrent = j.value("max_concurrent", c.max_concurrent);
    c.timeout = std::chrono::milliseconds(j.value("timeout_ms", static_cast<long>(c.timeout.count())));
    c.retries = j.value("retries", c.retries);
    c.max_image_bytes = j.value("max_image_bytes", c.max_image_bytes);
    c.validate();
    return c;
  }
};

struct Message {
  std::string role;  // "system" | "user" | "assistant"
  std::string text;
};
using Messages = std::vector<Message>;

inline Messages user_prompt(std::string text) { return {Message{"user", std::move(text)}}; }

/// Decoding parameters forwarded to chat/vision backends.
struct DecodeParams {
  double temperature = 0.0;
  double top_p = 1.0;
  int max_tokens = 1024;

  json to_json() const { return {{"temperature", temperature}, {"top_p", top_p}, {"max_tokens", max_tokens}}; }
  static DecodeParams from_json(const json& j) {
    DecodeParams d;
    d.temperature = j.value("temperature", d.temperature);
    d.top_p = j.value("top_p", d.top_p);
    d.max_tokens = j.value("max_tokens", d.max_tokens);
    return d;
  }
};

struct Embedding {
  std::vector<double> vector;
  std::string space_id;

  /// Cosine of two unit vectors from the same space.
  double dot(const Embedding& other) const {
    if (space_id != other.space_id)
      throw IntegrityError("embedding space mismatch: " + space_id + " vs " + other.space_id);
    if (vector.size() != other.vector.size()) throw IntegrityError("embedding dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < vector.size(); ++i) s += vector[i] * other.vector[i];
    return s;
  }
};

struct GeneratedImages {
  std::vector<Bytes> images;
  std::vector<std::string> rejections;  // one reason per rejected image
};

/// Thrown by Backend implementations. `retryable` distinguishes transient
/// transport failures from permanent ones (HTTP 4xx, malformed payloads).
class TransportError : public Error {
 public:
  TransportError(const std::string& what, bool retryable, int status = 0)
      : Error(what), retryable(retryable), status(status) {}
  bool retryable;
  int status;
};

/// Raised by the gateway once a request definitively failed.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, std::string key, unsigned attempts)
      : Error(what), request_key(std::move(key)), attempts(attempts) {}
  std::string request_key;
  unsigned attempts;
};

/// Non-retryable failure: bad credentials, bad request, oversized payload.
class BackendConfigError : public BackendError {
 public:
  using BackendError::BackendError;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string chat(const Messages& prompt, const DecodeParams& decode) = 0;
  virtual std::string vision_chat(const Bytes& image, const Messages& prompt, const DecodeParams& decode) = 0;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
  virtual std::vector<double> embed_image(const Bytes& image) = 0;
  virtual GeneratedImages generate_image(const std::string& prompt, std::size_t n, std::uint64_t seed) = 0;
};

// --- cache ------------------------------------------------------------------

/// Content-addressed response store. In-memory always; mirrored to
/// <dir>/<role>/<key[0:2]>/<key> (+ <key>.meta.json sidecar) when a directory is set.
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(fs::path dir) : dir_(std::move(dir)) {}

  std::optional<std::string> get(Role role, const std::string& key) {
    {
      std::shared_lock lock(mu_);
      auto it = memory_.find(key);
      if (it != memory_.end()) return it->second;
    }
    if (dir_.empty()) return std::nullopt;
    fs::path p = path_for(role, key);
    if (!fs::exists(p)) return std::nullopt;
    std::string value = read_file(p);
    std::unique_lock lock(mu_);
    memory_.emplace(key, value);
    return value;
  }

  void put(Role role, const std::string& key, const std::string& value, const json& request) {
    std::unique_lock lock(mu_);
    if (!memory_.emplace(key, value).second) return;
    if (dir_.empty()) return;
    fs::path p = path_for(role, key);
    write_file_atomic(p, value);
    auto now = std::chrono::duration_cast<std::chrono::seconds>(
                   std::chrono::system_clock::now().time_since_epoch())
                   .count();
    json meta = {{"role", to_string(role)}, {"key", key}, {"created_at", now}, {"request", request}};
    write_file_atomic(fs::path(p.string() + ".meta.json"), meta.dump(2));
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return memory_.size();
  }

  const fs::path& directory() const { return dir_; }

 private:
  fs::path path_for(Role role, const std::string& key) const {
    return dir_ / to_string(role) / key.substr(0, 2) / key;
  }

  fs::path dir_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, std::string> memory_;
};

// --- gateway ----------------------------------------------------------------

struct RoleStats {
  std::size_t requests = 0;       // gateway-level calls
  std::size_t cache_hits = 0;
  std::size_t backend_calls = 0;  // attempts reaching the backend, retries included
  std::size_t max_in_flight = 0;
};

class Gateway {
 public:
  /// Receives (role, canonical request) for every gateway call, hit or miss.
  using Observer = std::function<void(Role, const json&)>;

  Gateway(std::map<Role, std::shared_ptr<Backend>> backends, std::map<Role, BackendConfig> configs,
          std::shared_ptr<ResponseCache> cache = std::make_shared<ResponseCache>())
      : cache_(std::move(cache)) {
    for (auto& [role, backend] : backends) {
      auto it = configs.find(role);
      BackendConfig cfg = it != configs.end() ? it->second : BackendConfig{};
      cfg.role = role;
      cfg.validate();
      slots_[role] = std::make_unique<Slot>(std::move(backend), cfg);
    }
  }

  void set_observer(Observer obs) { observer_ = std::move(obs); }

  bool has(Role role) const { return slots_.count(role) != 0; }
  const BackendConfig& config(Role role) const { return slot(role).config; }
  std::string space_id() const { return config(Role::embed).model_id; }

  RoleStats stats(Role role) const {
    const Slot& s = slot(role);
    std::lock_guard lock(s.stats_mu);
    return s.stats;
  }

  std::string chat(const Messages& prompt, const DecodeParams& decode = {}) {
    json req = base_request(Role::chat);
    req["messages"] = messages_json(prompt);
    req["decode"] = decode.to_json();
    return call(Role::chat, req, [&](Backend& b) { return b.chat(prompt, decode); });
  }

  std::string vision_chat(const Bytes& image, const Messages& prompt, const DecodeParams& decode = {}) {
    json req = base_request(Role::vision);
    req["messages"] = messages_json(prompt);
    req["decode"] = decode.to_json();
    req["image_sha256"] = sha256_hex(image);
    check_image_size(Role::vision, image, req);
    return call(Role::vision, req, [&](Backend& b) { return b.vision_chat(image, prompt, decode); });
  }

  Embedding embed_text(const std::string& text) {
    json req = base_request(Role::embed);
    req["text"] = text;
    auto raw = call(Role::embed, req, [&](Backend& b) { return encode_vector(b.embed_text(text)); });
    return to_embedding(raw);
  }

  Embedding embed_image(const Bytes& image) {
    json req = base_request(Role::embed);
    req["image_sha256"] = sha256_hex(image);
    check_image_size(Role::embed, image, req);
    auto raw = call(Role::embed, req, [&](Backend& b) { return encode_vector(b.embed_image(image)); });
    return to_embedding(raw);
  }

  /// Content-policy rejections are soft: returned alongside the surviving
  /// images. A call producing zero images is an error.
  GeneratedImages generate_image(const std::string& prompt, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw PreconditionError("generate_image: n must be >= 1");
    json req = base_request(Role::imagegen);
    req["prompt"] = prompt;
    req["n"] = n;
    req["seed"] = seed;
    auto raw = call(Role::imagegen, req, [&](Backend& b) {
      auto out = b.generate_image(prompt, n, seed);
      json j = {{"images", json::array()}, {"rejections", out.rejections}};
      for (const auto& img : out.images) j["images"].push_back(base64_encode(img));
      return j.dump();
    });
    json j = json::parse(raw);
    GeneratedImages out;
    for (const auto& b64 : j["images"]) out.images.push_back(base64_decode(b64.get<std::string>()));
    out.rejections = j["rejections"].get<std::vector<std::string>>();
    if (out.images.empty())
      throw BackendError("image generation produced no images (" + std::to_string(out.rejections.size()) +
                             " rejected)",
                         request_key(req), 1);
    return out;
  }

  static std::string request_key(const json& req) { return sha256_hex(req.dump()); }

 private:
  struct Slot {
    Slot(std::shared_ptr<Backend> b, BackendConfig c)
        : backend(std::move(b)), config(std::move(c)), limiter(static_cast<std::ptrdiff_t>(config.max_concurrent)) {}
    std::shared_ptr<Backend> backend;
    BackendConfig config;
    std::counting_semaphore<4096> limiter;
    std::atomic<std::size_t> in_flight{0};
    mutable std::mutex stats_mu;
    RoleStats stats;
  };

  Slot& slot(Role role) const {
    auto it = slots_.find(role);
    if (it == slots_.end()) throw ConfigError("no backend configured for role " + to_string(role));
    return *it->second;
  }

  json base_request(Role role) const {
    return {{"role", to_string(role)}, {"model_id", slot(role).config.model_id}};
  }

  static json messages_json(const Messages& prompt) {
    json arr = json::array();
    for (const auto& m : prompt) arr.push_back({{"role", m.role}, {"text", m.text}});
    return arr;
  }

  void check_image_size(Role role, const Bytes& image, const json& req) const {
    if (image.size() > slot(role).config.max_image_bytes)
      throw BackendConfigError("image of " + std::to_string(image.size()) + " bytes exceeds " + to_string(role) +
                                   " backend limit of " + std::to_string(slot(role).config.max_image_bytes),
                               request_key(req), 0);
  }

  static std::string encode_vector(std::vector<double> v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw TransportError("backend returned a zero or non-finite embedding", false);
    for (double& x : v) x /= norm;
    return json(v).dump();
  }

  Embedding to_embedding(const std::string& raw) {
    Embedding e;
    e.vector = json::parse(raw).get<std::vector<double>>();
    e.space_id = space_id();
    std::lock_guard lock(dims_mu_);
    auto [it, inserted] = dims_.emplace(e.space_id, e.vector.size());
    if (!inserted && it->second != e.vector.size())
      throw IntegrityError("embedding dimension " + std::to_string(e.vector.size()) + " does not match space " +
                           e.space_id + " dimension " + std::to_string(it->second));
    return e;
  }

  template <typename Fn>
  std::string call(Role role, const json& req, Fn&& fn) {
    Slot& s = slot(role);
    if (observer_) observer_(role, req);
    const std::string key = request_key(req);
    {
      std::lock_guard lock(s.stats_mu);
      ++s.stats.requests;
    }
    if (auto hit = cache_->get(role, key)) {
      std::lock_guard lock(s.stats_mu);
      ++s.stats.cache_hits;
      return *hit;
    }

    const unsigned attempts_allowed = s.config.retries + 1;
    std::string last_error;
    for (unsigned attempt = 1; attempt <= attempts_allowed; ++attempt) {
      s.limiter.acquire();
      std::size_t now = ++s.in_flight;
      {
        std::lock_guard lock(s.stats_mu);
        ++s.stats.backend_calls;
        s.stats.max_in_flight = std::max(s.stats.max_in_flight, now);
      }
      try {
        std::string value = fn(*s.backend);
        --s.in_flight;
        s.limiter.release();
        cache_->put(role, key, value, req);
        return value;
      } catch (const TransportError& e) {
        --s.in_flight;
        s.limiter.release();
        if (!e.retryable)
          throw BackendConfigError(to_string(role) + " request " + key + " rejected: " + e.what(), key, attempt);
        last_error = e.what();
      } catch (...) {
        --s.in_flight;
        s.limiter.release();
        throw;
      }
    }
    throw BackendError(to_string(role) + " request " + key + " failed after " + std::to_string(attempts_allowed) +
                           " attempts: " + last_error,
                       key, attempts_allowed);
  }

  std::map<Role, std::unique_ptr<Slot>> slots_;
  std::shared_ptr<ResponseCache> cache_;
  Observer observer_;
  std::mutex dims_mu_;
  std::map<std::string, std::size_t> dims_;
};

}  // namespace coda
