#pragma once

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

#include "nmid/common.hpp"
#include "nmid/digest.hpp"
#include "nmid/image.hpp"

namespace nmid {

struct ChatPart {
  enum class Kind { text, image };
  Kind kind = Kind::text;
  std::string text;   // text parts
  std::string mime;   // image parts
  std::string bytes;  // image parts: encoded file bytes
  std::string ref;    // image parts: optional caller-side reference (image id)

  static ChatPart make_text(std::string t) {
    ChatPart p;
    p.text = std::move(t);
    return p;
  }

  static ChatPart make_image(std::string bytes, std::string ref = {}) {
    ChatPart p;
    p.kind = Kind::image;
    p.mime = mime_for_bytes(bytes);
    p.bytes = std::move(bytes);
    p.ref = std::move(ref);
    return p;
  }

  bool is_text() const { return kind == Kind::text; }
  bool is_image() const { return kind == Kind::image; }

  friend bool operator==(const ChatPart&, const ChatPart&) = default;
};

struct ChatRequest {
  std::string backend;
  std::vector<ChatPart> parts;
  std::map<std::string, std::string> params;  // decoding parameters, passed through verbatim

  void validate() const {
    if (parts.empty()) throw ValidationError("chat request has no parts");
    for (const auto& p : parts) {
      if (p.is_image() && p.mime != "image/png" && p.mime != "image/jpeg") {
        throw ValidationError(cat("image part has unsupported mime '", p.mime, "'"));
      }
    }
  }

  friend bool operator==(const ChatRequest&, const ChatRequest&) = default;
};

struct ChatResponse {
  std::string text;
  std::string backend;
  std::map<std::string, long> usage;
  bool cached = false;
  int attempts = 0;
};

// Canonical form used for cache keys: images are represented by digest so
// the key does not depend on transport encoding. Backend id is excluded;
// callers prefix it.
inline nlohmann::ordered_json canonical_json(const ChatRequest& req) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  for (const auto& [k, v] : req.params) params[k] = v;
  j["params"] = params;
  nlohmann::ordered_json parts = nlohmann::ordered_json::array();
  for (const auto& p : req.parts) {
    nlohmann::ordered_json jp;
    if (p.is_text()) {
      jp["type"] = "text";
      jp["text"] = p.text;
    } else {
      jp["type"] = "image";
      jp["mime"] = p.mime;
      jp["ref"] = p.ref;
      jp["sha256"] = sha256_hex(p.bytes);
      jp["size"] = p.bytes.size();
    }
    parts.push_back(std::move(jp));
  }
  j["parts"] = parts;
  return j;
}

// Full wire payload, including image data as base64.
inline std::string serialize_request(const ChatRequest& req) {
  nlohmann::ordered_json j;
  j["backend"] = req.backend;
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  for (const auto& [k, v] : req.params) params[k] = v;
  j["params"] = params;
  nlohmann::ordered_json parts = nlohmann::ordered_json::array();
  for (const auto& p : req.parts) {
    nlohmann::ordered_json jp;
    if (p.is_text()) {
      jp["type"] = "text";
      jp["text"] = p.text;
    } else {
      jp["type"] = "image";
      jp["mime"] = p.mime;
      jp["ref"] = p.ref;
      jp["data"] = base64_encode(p.bytes);
    }
    parts.push_back(std::move(jp));
  }
  j["parts"] = parts;
  return j.dump();
}

inline ChatRequest parse_request(std::string_view payload) {
  const auto j = nlohmann::json::parse(payload);
  ChatRequest req;
  req.backend = j.at("backend").get<std::string>();
  for (const auto& [k, v] : j.at("params").items()) req.params[k] = v.get<std::string>();
  for (const auto& jp : j.at("parts")) {
    if (jp.at("type") == "text") {
      req.parts.push_back(ChatPart::make_text(jp.at("text").get<std::string>()));
    } else {
      ChatPart p;
      p.kind = ChatPart::Kind::image;
      p.mime = jp.at("mime").get<std::string>();
      p.ref = jp.value("ref", std::string{});
      p.bytes = base64_decode(jp.at("data").get<std::string>());
      req.parts.push_back(std::move(p));
    }
  }
  return req;
}

}  // namespace nmid
