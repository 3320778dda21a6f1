#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include "nmid/curation.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen internals.
#include <httplib.h>

namespace nmid {

struct CurationServerOptions {
  std::string host = "127.0.0.1";
  int port = 8765;  // 0 picks a free port
  std::string bearer_token;  // empty disables auth
  std::string cors_origin = "*";
  fs::path ui_dir;                 // served under /ui/ when it exists
  fs::path train_manifest;         // base of GET /api/manifest/augmented
};

/// JSON API over a ReviewQueue.
///   GET  /api/queue?status=pending|accepted|rejected
///   GET  /api/items/{id}
///   POST /api/items                      enqueue; 201 new, 200 existing
///   POST /api/items/{id}/decision        {verdict: accept|reject, note}
///   GET  /api/manifest/augmented
///   GET  /assets/{digest}
class CurationServer {
 public:
  CurationServer(ReviewQueue& queue, CurationServerOptions opts) : queue_(queue), opts_(std::move(opts)) { routes(); }

  ~CurationServer() { stop(); }

  /// Binds and serves on a background thread. Returns the bound port.
  int start() {
    if (opts_.port == 0) {
      port_ = server_.bind_to_any_port(opts_.host);
    } else {
      port_ = server_.bind_to_port(opts_.host, opts_.port) ? opts_.port : -1;
    }
    if (port_ <= 0) throw IoError(cat("curation server: cannot bind ", opts_.host, ":", opts_.port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Binds and serves on the calling thread until stop().
  void serve() {
    log(LogLevel::info, "curation server listening on http://", opts_.host, ":", opts_.port);
    if (!server_.listen(opts_.host, opts_.port))
      throw IoError(cat("curation server: cannot listen on ", opts_.host, ":", opts_.port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg) {
    send_json(res, status, nlohmann::ordered_json{{"error", msg}});
  }

  bool authorized(const httplib::Request& req) const {
    if (opts_.bearer_token.empty()) return true;
    return req.get_header_value("Authorization") == "Bearer " + opts_.bearer_token;
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", opts_.cors_origin},
                                 {"Access-Control-Allow-Headers", "Authorization, Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});

    server_.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (req.method == "OPTIONS") {
        res.status = 204;
        return httplib::Server::HandlerResponse::Handled;
      }
      const bool guarded = req.path.starts_with("/api/") || req.path.starts_with("/assets/");
      if (guarded && !authorized(req)) {
        send_error(res, 401, "missing or invalid bearer token");
        return httplib::Server::HandlerResponse::Handled;
      }
      return httplib::Server::HandlerResponse::Unhandled;
    });

    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      } catch (...) {
        send_error(res, 500, "unknown error");
      }
    });

    server_.Get("/api/queue", [this](const httplib::Request& req, httplib::Response& res) {
      std::optional<ReviewStatus> status;
      if (req.has_param("status") && !req.get_param_value("status").empty()) {
        try {
          status = parse_status(req.get_param_value("status"));
        } catch (const ValidationError& e) {
          return send_error(res, 400, e.what());
        }
      }
      nlohmann::ordered_json items = nlohmann::ordered_json::array();
      for (const auto& it : queue_.list(status)) {
        nlohmann::ordered_json s;
        s["id"] = it.id;
        s["source_id"] = it.source_id;
        s["label"] = it.label;
        s["status"] = to_string(it.status);
        s["enqueued_ts"] = it.enqueued_ts;
        s["thumbnail"] = it.source_digest.empty() ? "" : "/assets/" + it.source_digest;
        s["synthetic_count"] = it.synthetics.size();
        items.push_back(std::move(s));
      }
      send_json(res, 200, nlohmann::ordered_json{{"items", items}});
    });

    server_.Get(R"(/api/items/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto it = queue_.get(req.matches[1]);
      if (!it) return send_error(res, 404, cat("unknown item ", req.matches[1].str()));
      send_json(res, 200, to_json(*it));
    });

    server_.Post("/api/items", [this](const httplib::Request& req, httplib::Response& res) {
      ReviewItem item;
      try {
        item = item_content_from_json(nlohmann::json::parse(req.body));
      } catch (const std::exception& e) {
        return send_error(res, 400, cat("malformed item: ", e.what()));
      }
      try {
        bool created = false;
        const auto id = queue_.enqueue(std::move(item), &created);
        send_json(res, created ? 201 : 200, nlohmann::ordered_json{{"id", id}});
      } catch (const ValidationError& e) {
        send_error(res, 400, e.what());
      } catch (const IoError& e) {
        send_error(res, 400, e.what());
      }
    });

    server_.Post(R"(/api/items/([0-9a-f]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
      Verdict verdict;
      std::string note;
      try {
        const auto j = nlohmann::json::parse(req.body);
        verdict = parse_verdict(j.at("verdict").get<std::string>());
        note = j.value("note", std::string{});
      } catch (const std::exception& e) {
        return send_error(res, 400, cat("malformed decision: ", e.what()));
      }
      try {
        send_json(res, 200, to_json(queue_.decide(req.matches[1], verdict, note)));
      } catch (const UnknownItem& e) {
        send_error(res, 404, e.what());
      } catch (const AlreadyDecided& e) {
        send_error(res, 409, e.what());
      }
    });

    server_.Get("/api/manifest/augmented", [this](const httplib::Request&, httplib::Response& res) {
      if (opts_.train_manifest.empty() || !fs::is_regular_file(opts_.train_manifest))
        return send_error(res, 404, "no train manifest configured");
      const auto m = build_augmented_manifest(DatasetManifest::load(opts_.train_manifest), queue_);
      nlohmann::ordered_json recs = nlohmann::ordered_json::array();
      for (const auto& r : m.records()) recs.push_back(to_json(r));
      send_json(res, 200, nlohmann::ordered_json{{"records", recs}});
    });

    server_.Get(R"(/assets/([0-9a-f]{64}))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto p = queue_.asset_path(req.matches[1]);
      if (!p || !fs::is_regular_file(*p)) return send_error(res, 404, "unknown asset");
      const std::string bytes = read_file(*p);
      res.status = 200;
      res.set_content(bytes, mime_for_bytes(bytes));
    });

    if (!opts_.ui_dir.empty() && fs::is_directory(opts_.ui_dir)) server_.set_mount_point("/ui", opts_.ui_dir.string());
  }

  ReviewQueue& queue_;
  CurationServerOptions opts_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace nmid
