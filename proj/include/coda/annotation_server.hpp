#pragma once

// HTTP endpoints backing the annotation UI.
//
//   GET  /session/{id}[?annotator=a]   session metadata and items (+ a's answers)
//   GET  /item/{asset-id}/image        raw image bytes
//   POST /session/{id}/record          {"annotator","item_index","judgment":"yes"|"no"}
//                                      200 stored record | 409 conflicting stored record
//   GET  /session/{id}/stats           {"positive_rate","fleiss_kappa",...} | 409 incomplete
//
// Field names match the session and record files. When a UI directory is
// given it is served at "/".

#include "httplib.h"

#include "coda/human_eval.hpp"

namespace coda {

class AnnotationServer {
 public:
  AnnotationServer(SessionStore& store, fs::path corpus_root, std::optional<fs::path> ui_dir = std::nullopt)
      : store_(store), corpus_root_(std::move(corpus_root)) {
    if (ui_dir) server_.set_mount_point("/", ui_dir->string());
    routes();
  }

  httplib::Server& server() { return server_; }

  int bind_to_any_port(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

  /// Session payload as served to the UI.
  json session_view(const AnnotationSession& s, const std::string& annotator) {
    json j = s.to_json();
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      json& item = j["items"][i];
      item["index"] = i;
      item["image_url"] = "/item/" + s.items[i].image + "/image";
      if (!s.show_concept_names) item.erase("concept");
    }
    if (!annotator.empty()) {
      json answered = json::object();
      for (const auto& r : store_.records(s.id))
        if (r.annotator == annotator) answered[std::to_string(r.item_index)] = r.judgment ? "yes" : "no";
      j["answered"] = answered;
    }
    return j;
  }

 private:
  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  std::optional<fs::path> image_path(const std::string& asset_id) {
    for (const auto& e : fs::directory_iterator(store_.directory())) {
      const std::string name = e.path().filename().string();
      const std::string suffix = ".session.json";
      if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
      auto s = store_.find_session(name.substr(0, name.size() - suffix.size()));
      if (!s) continue;
      for (const auto& item : s->items)
        if (item.image == asset_id) return corpus_root_ / item.image_path;
    }
    return std::nullopt;
  }

  void routes() {
    server_.Get(R"(/session/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = store_.find_session(req.matches[1]);
      if (!s) return send_json(res, 404, {{"error", "unknown session"}});
      send_json(res, 200, session_view(*s, req.get_param_value("annotator")));
    });

    server_.Get(R"(/item/([^/]+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
      auto p = image_path(req.matches[1]);
      if (!p || !fs::exists(*p)) return send_json(res, 404, {{"error", "unknown image"}});
      Bytes bytes = read_file(*p);
      std::string ext = image_extension(bytes);
      std::string mime = ext == ".png" ? "image/png" : ext == ".jpg" ? "image/jpeg" : ext == ".webp" ? "image/webp"
                                                                                                     : "application/octet-stream";
      res.set_content(bytes, mime);
    });

    server_.Post(R"(/session/([^/]+)/record)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!store_.find_session(id)) return send_json(res, 404, {{"error", "unknown session"}});
      AnnotationRecord rec;
      try {
        json body = json::parse(req.body);
        body["session"] = id;
        rec = AnnotationRecord::from_json(body);
      } catch (const std::exception& e) {
        return send_json(res, 400, {{"error", e.what()}});
      }
      try {
        send_json(res, 200, store_.record(id, rec.annotator, rec.item_index, rec.judgment).to_json());
      } catch (const ConflictError& e) {
        json body = {{"error", e.what()}};
        for (const auto& r : store_.records(id))
          if (r.annotator == rec.annotator && r.item_index == rec.item_index) body["stored"] = r.to_json();
        send_json(res, 409, body);
      } catch (const PreconditionError& e) {
        send_json(res, 400, {{"error", e.what()}});
      }
    });

    server_.Get(R"(/session/([^/]+)/stats)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!store_.find_session(id)) return send_json(res, 404, {{"error", "unknown session"}});
      try {
        send_json(res, 200, store_.stats(id).to_json());
      } catch (const PreconditionError& e) {
        send_json(res, 409, {{"error", e.what()}});
      } catch (const Error& e) {
        send_json(res, 422, {{"error", e.what()}});
      }
    });
  }

  SessionStore& store_;
  fs::path corpus_root_;
  httplib::Server server_;
};

}  // namespace coda
