#pragma once

// HTTP backend speaking chat-completion style JSON.
//
//   chat / vision   POST <base>/chat/completions
//       {"model", "messages":[{"role","content"}], "temperature", "top_p", "max_tokens"}
//       vision attaches the image to the last user message as
//       [{"type":"text","text":..},{"type":"image_url","image_url":{"url":"data:<mime>;base64,.."}}]
//       reply: {"choices":[{"message":{"content": "..."}}]}
//   embed           POST <base>/embeddings
//       text:  {"model", "input": "<text>"}
//       image: {"model", "image": "<base64 bytes>"}
//       reply: {"data":[{"embedding":[...]}]}
//   imagegen        POST <base>/images/generations
//       {"model", "prompt", "n", "seed", "response_format":"b64_json"}
//       reply: {"data":[{"b64_json":".."} | {"error":"<rejection reason>"} ...]}
//
// Authorization: "Bearer $<api_key_env>" when api_key_env is set.
// Connection failures, 408, 429 and 5xx are retryable; other 4xx are not.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include "httplib.h"

#include "coda/augmentation.hpp"
#include "coda/gateway.hpp"

namespace coda {

class HttpBackend : public Backend {
 public:
  explicit HttpBackend(BackendConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::string& url = cfg_.base_url;
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("base_url must include a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    origin_ = url.substr(0, path_start);
    prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  std::string chat(const Messages& prompt, const DecodeParams& decode) override {
    json body = chat_body(prompt, decode);
    return content_of(post("/chat/completions", body));
  }

  std::string vision_chat(const Bytes& image, const Messages& prompt, const DecodeParams& decode) override {
    json body = chat_body(prompt, decode);
    auto& messages = body["messages"];
    std::size_t last_user = messages.size();
    for (std::size_t i = 0; i < messages.size(); ++i)
      if (messages[i]["role"] == "user") last_user = i;
    if (last_user == messages.size()) throw TransportError("vision prompt has no user message", false);
    const std::string text = messages[last_user]["content"].get<std::string>();
    messages[last_user]["content"] = json::array(
        {{{"type", "text"}, {"text", text}},
         {{"type", "image_url"}, {"image_url", {{"url", "data:" + mime_type(image) + ";base64," + base64_encode(image)}}}}});
    return content_of(post("/chat/completions", body));
  }

  std::vector<double> embed_text(const std::string& text) override {
    return embedding_of(post("/embeddings", {{"model", cfg_.model_id}, {"input", text}}));
  }

  std::vector<double> embed_image(const Bytes& image) override {
    return embedding_of(post("/embeddings", {{"model", cfg_.model_id}, {"image", base64_encode(image)}}));
  }

  GeneratedImages generate_image(const std::string& prompt, std::size_t n, std::uint64_t seed) override {
    json body = {{"model", cfg_.model_id}, {"prompt", prompt}, {"n", n}, {"seed", seed}, {"response_format", "b64_json"}};
    GeneratedImages out;
    json reply;
    try {
      reply = post("/images/generations", body);
    } catch (const TransportError& e) {
      if (e.status == 400 && std::string(e.what()).find("content_policy") != std::string::npos) {
        for (std::size_t i = 0; i < n; ++i) out.rejections.push_back(e.what());
        return out;
      }
      throw;
    }
    for (const auto& item : reply.value("data", json::array())) {
      if (item.contains("b64_json")) out.images.push_back(base64_decode(item["b64_json"].get<std::string>()));
      else out.rejections.push_back(item.value("error", std::string("rejected")));
    }
    return out;
  }

  static std::string mime_type(const Bytes& b) {
    auto ext = image_extension(b);
    if (ext == ".png") return "image/png";
    if (ext == ".jpg") return "image/jpeg";
    if (ext == ".webp") return "image/webp";
    return "application/octet-stream";
  }

 private:
  json chat_body(const Messages& prompt, const DecodeParams& decode) const {
    json messages = json::array();
    for (const auto& m : prompt) messages.push_back({{"role", m.role}, {"content", m.text}});
    return {{"model", cfg_.model_id},
            {"messages", messages},
            {"temperature", decode.temperature},
            {"top_p", decode.top_p},
            {"max_tokens", decode.max_tokens}};
  }

  json post(const std::string& path, const json& body) const {
    httplib::Client cli(origin_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!cfg_.api_key_env.empty()) {
      const char* key = std::getenv(cfg_.api_key_env.c_str());
      if (key == nullptr) throw TransportError("environment variable " + cfg_.api_key_env + " is not set", false);
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = cli.Post(prefix_ + path, headers, body.dump(), "application/json");
    if (!res) throw TransportError("connection to " + origin_ + " failed: " + httplib::to_string(res.error()), true);
    const int status = res->status;
    if (status >= 200 && status < 300) {
      try {
        return json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw TransportError(std::string("malformed JSON reply: ") + e.what(), false, status);
      }
    }
    const bool retryable = status == 408 || status == 429 || status >= 500;
    throw TransportError("HTTP " + std::to_string(status) + " from " + origin_ + prefix_ + path + ": " + res->body,
                         retryable, status);
  }

  static std::string content_of(const json& reply) {
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw TransportError(std::string("unexpected chat reply shape: ") + e.what(), false);
    }
  }

  static std::vector<double> embedding_of(const json& reply) {
    try {
      return reply.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw TransportError(std::string("unexpected embedding reply shape: ") + e.what(), false);
    }
  }

  BackendConfig cfg_;
  std::string origin_;
  std::string prefix_;
};

}  // namespace coda
