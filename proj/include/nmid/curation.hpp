#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "nmid/common.hpp"
#include "nmid/dataset.hpp"
#include "nmid/digest.hpp"
#include "nmid/prompts.hpp"

namespace nmid {

enum class ReviewStatus { pending, accepted, rejected };

inline std::string to_string(ReviewStatus s) {
  switch (s) {
    case ReviewStatus::pending: return "pending";
    case ReviewStatus::accepted: return "accepted";
    case ReviewStatus::rejected: return "rejected";
  }
  return "pending";
}

inline ReviewStatus parse_status(std::string_view s) {
  if (s == "pending") return ReviewStatus::pending;
  if (s == "accepted") return ReviewStatus::accepted;
  if (s == "rejected") return ReviewStatus::rejected;
  throw ValidationError(cat("unknown review status '", s, "'"));
}

enum class Verdict { accept, reject };

inline Verdict parse_verdict(std::string_view s) {
  if (s == "accept") return Verdict::accept;
  if (s == "reject") return Verdict::reject;
  throw ValidationError(cat("unknown verdict '", s, "' (expected accept|reject)"));
}

struct SyntheticRef {
  std::string digest;  // sha256 of the file bytes
  std::string path;
  friend bool operator==(const SyntheticRef&, const SyntheticRef&) = default;
};

struct Decision {
  Verdict verdict = Verdict::reject;
  std::string note;
  std::string ts;
  friend bool operator==(const Decision&, const Decision&) = default;
};

struct ReviewItem {
  std::string id;
  std::string source_id;
  std::string source_path;
  std::string source_digest;
  std::string label;
  VqaTranscript transcript;
  std::vector<SyntheticRef> synthetics;
  std::string salt;  // distinguishes a deliberate re-submission of identical content
  ReviewStatus status = ReviewStatus::pending;
  std::string enqueued_ts;
  std::optional<Decision> decision;

  friend bool operator==(const ReviewItem&, const ReviewItem&) = default;
};

class UnknownItem : public Error {
 public:
  using Error::Error;
};

class AlreadyDecided : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json transcript_json(const VqaTranscript& t) {
  nlohmann::ordered_json j;
  j["image_id"] = t.image_id;
  j["backend"] = t.backend;
  j["ts"] = t.timestamp;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : t.pairs) {
    nlohmann::ordered_json jp;
    jp["prompt_id"] = p.prompt_id;
    jp["question"] = p.question;
    jp["answer"] = p.answer;
    j["pairs"].push_back(std::move(jp));
  }
  return j;
}

inline VqaTranscript transcript_from_json(const nlohmann::json& j) {
  VqaTranscript t;
  t.image_id = j.value("image_id", std::string{});
  t.backend = j.value("backend", std::string{});
  t.timestamp = j.value("ts", std::string{});
  for (const auto& jp : j.at("pairs"))
    t.pairs.push_back(
        {jp.at("prompt_id").get<int>(), jp.at("question").get<std::string>(), jp.at("answer").get<std::string>()});
  return t;
}

// Content fields only: what the submitter provides.
inline nlohmann::ordered_json content_json(const ReviewItem& it) {
  nlohmann::ordered_json j;
  j["source"] = {{"id", it.source_id}, {"path", it.source_path}, {"digest", it.source_digest}, {"label", it.label}};
  j["transcript"] = transcript_json(it.transcript);
  j["synthetics"] = nlohmann::ordered_json::array();
  for (const auto& s : it.synthetics) j["synthetics"].push_back({{"digest", s.digest}, {"path", s.path}});
  j["salt"] = it.salt;
  return j;
}

inline nlohmann::ordered_json to_json(const ReviewItem& it) {
  nlohmann::ordered_json j;
  j["id"] = it.id;
  j["status"] = to_string(it.status);
  j["enqueued_ts"] = it.enqueued_ts;
  const auto content = content_json(it);
  for (const auto& [k, v] : content.items()) j[k] = v;
  if (it.decision) {
    j["decision"] = {{"verdict", it.decision->verdict == Verdict::accept ? "accept" : "reject"},
                     {"note", it.decision->note},
                     {"ts", it.decision->ts}};
  } else {
    j["decision"] = nullptr;
  }
  return j;
}

inline ReviewItem item_content_from_json(const nlohmann::json& j) {
  ReviewItem it;
  const auto& src = j.at("source");
  it.source_id = src.at("id").get<std::string>();
  it.source_path = src.value("path", std::string{});
  it.source_digest = src.value("digest", std::string{});
  it.label = src.at("label").get<std::string>();
  it.transcript = transcript_from_json(j.at("transcript"));
  for (const auto& s : j.at("synthetics"))
    it.synthetics.push_back({s.value("digest", std::string{}), s.value("path", std::string{})});
  it.salt = j.value("salt", std::string{});
  return it;
}

inline std::string content_digest(const ReviewItem& it) { return sha256_hex(content_json(it).dump()); }

inline std::string utc_timestamp() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

// ---------------------------------------------------------------------------
// Review queue over an append-only event log
// ---------------------------------------------------------------------------

inline constexpr const char* kCurationLogName = "curation.log.jsonl";

class ReviewQueue {
 public:
  using Timestamp = std::function<std::string()>;

  /// Opens (or creates) `<dir>/curation.log.jsonl` and replays it.
  explicit ReviewQueue(const fs::path& dir, Timestamp ts = utc_timestamp) : log_path_(dir / kCurationLogName), ts_(std::move(ts)) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw IoError(cat("curation: cannot create ", dir.string()));
    if (fs::exists(log_path_)) replay();
  }

  const fs::path& log_path() const { return log_path_; }

  /// Validates, fills digests, appends an `enqueued` event unless an item
  /// with identical content already exists. Returns the item id.
  std::string enqueue(ReviewItem item, bool* created = nullptr) {
    validate_content(item);
    for (auto& s : item.synthetics) {
      if (s.digest.empty()) s.digest = sha256_hex(read_file(s.path));
    }
    if (item.source_digest.empty() && !item.source_path.empty() && fs::is_regular_file(item.source_path))
      item.source_digest = sha256_hex(read_file(item.source_path));
    std::lock_guard l(mu_);
    item.id = content_digest(item);
    if (created) *created = false;
    if (items_.count(item.id)) return item.id;
    item.status = ReviewStatus::pending;
    item.decision.reset();
    item.enqueued_ts = ts_();
    nlohmann::ordered_json ev;
    ev["event"] = "enqueued";
    ev["id"] = item.id;
    ev["payload"] = content_json(item);
    ev["ts"] = item.enqueued_ts;
    append(ev);
    apply_enqueue(std::move(item));
    if (created) *created = true;
    return order_.back();
  }

  ReviewItem decide(const std::string& id, Verdict verdict, std::string note = {}) {
    std::lock_guard l(mu_);
    auto it = items_.find(id);
    if (it == items_.end()) throw UnknownItem(cat("unknown review item ", id));
    if (it->second.status != ReviewStatus::pending) throw AlreadyDecided(cat("review item ", id, " already decided"));
    Decision d{verdict, std::move(note), ts_()};
    nlohmann::ordered_json ev;
    ev["event"] = "decided";
    ev["id"] = id;
    ev["payload"] = {{"verdict", verdict == Verdict::accept ? "accept" : "reject"}, {"note", d.note}};
    ev["ts"] = d.ts;
    append(ev);
    apply_decision(id, std::move(d));
    return it->second;
  }

  std::optional<ReviewItem> get(const std::string& id) const {
    std::lock_guard l(mu_);
    auto it = items_.find(id);
    if (it == items_.end()) return std::nullopt;
    return it->second;
  }

  /// Items in enqueue order, optionally filtered by status.
  std::vector<ReviewItem> list(std::optional<ReviewStatus> status = std::nullopt) const {
    std::lock_guard l(mu_);
    std::vector<ReviewItem> out;
    for (const auto& id : order_) {
      const auto& it = items_.at(id);
      if (!status || it.status == *status) out.push_back(it);
    }
    return out;
  }

  /// Accepted item ids in decision order.
  std::vector<std::string> accepted_in_decision_order() const {
    std::lock_guard l(mu_);
    std::vector<std::string> out;
    for (const auto& id : decided_)
      if (items_.at(id).status == ReviewStatus::accepted) out.push_back(id);
    return out;
  }

  // Path of a known asset (source or synthetic) by digest.
  std::optional<fs::path> asset_path(const std::string& digest) const {
    std::lock_guard l(mu_);
    for (const auto& [id, it] : items_) {
      if (it.source_digest == digest && !it.source_path.empty()) return fs::path(it.source_path);
      for (const auto& s : it.synthetics)
        if (s.digest == digest) return fs::path(s.path);
    }
    return std::nullopt;
  }

 private:
  static void validate_content(const ReviewItem& item) {
    if (item.source_id.empty()) throw ValidationError("review item: missing source image id");
    if (item.label.empty()) throw ValidationError("review item: missing label");
    if (item.transcript.pairs.empty()) throw ValidationError("review item: empty transcript");
    item.transcript.validate();
    if (item.synthetics.empty()) throw ValidationError("review item: at least one synthetic image required");
    for (const auto& s : item.synthetics) {
      if (s.path.empty()) throw ValidationError("review item: synthetic image without path");
      if (s.digest.empty() && !fs::is_regular_file(s.path))
        throw ValidationError(cat("review item: synthetic image not found: ", s.path));
    }
  }

  void append(const nlohmann::ordered_json& ev) {
    std::ofstream out(log_path_, std::ios::app | std::ios::binary);
    if (!out) throw IoError(cat("curation: cannot append to ", log_path_.string()));
    out << ev.dump() << '\n';
    out.flush();
    if (!out) throw IoError(cat("curation: write failed on ", log_path_.string()));
  }

  void apply_enqueue(ReviewItem item) {
    order_.push_back(item.id);
    const std::string id = item.id;
    items_.emplace(id, std::move(item));
  }

  void apply_decision(const std::string& id, Decision d) {
    auto& it = items_.at(id);
    it.status = d.verdict == Verdict::accept ? ReviewStatus::accepted : ReviewStatus::rejected;
    it.decision = std::move(d);
    decided_.push_back(id);
  }

  void replay() {
    std::size_t n = 0;
    for (const auto& line : read_lines(log_path_)) {
      ++n;
      if (line.empty()) continue;
      try {
        const auto ev = nlohmann::json::parse(line);
        const auto kind = ev.at("event").get<std::string>();
        const auto id = ev.at("id").get<std::string>();
        if (kind == "enqueued") {
          ReviewItem it = item_content_from_json(ev.at("payload"));
          it.id = id;
          it.enqueued_ts = ev.at("ts").get<std::string>();
          if (content_digest(it) != id) throw FormatError("content digest mismatch");
          if (!items_.count(id)) apply_enqueue(std::move(it));
        } else if (kind == "decided") {
          auto found = items_.find(id);
          if (found == items_.end()) throw FormatError("decision for unknown item");
          if (found->second.status != ReviewStatus::pending) throw FormatError("second decision for item");
          const auto& p = ev.at("payload");
          apply_decision(id, {parse_verdict(p.at("verdict").get<std::string>()), p.value("note", std::string{}),
                              ev.at("ts").get<std::string>()});
        } else {
          throw FormatError(cat("unknown event '", kind, "'"));
        }
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(cat(log_path_.string(), ":", n, ": ", e.what()));
      } catch (const Error& e) {
        throw FormatError(cat(log_path_.string(), ":", n, ": ", e.what()));
      }
    }
  }

  fs::path log_path_;
  Timestamp ts_;
  mutable std::mutex mu_;
  std::map<std::string, ReviewItem> items_;
  std::vector<std::string> order_;
  std::vector<std::string> decided_;
};

/// Train records of `train` followed by one record per synthetic image of
/// every accepted item, in decision order. Labels are inherited from the
/// source image.
inline DatasetManifest build_augmented_manifest(const DatasetManifest& train, const ReviewQueue& queue) {
  std::vector<ManifestRecord> out;
  for (const auto& r : train.records())
    if (r.split == Split::train) out.push_back(r);
  for (const auto& id : queue.accepted_in_decision_order()) {
    const ReviewItem it = *queue.get(id);
    for (std::size_t k = 0; k < it.synthetics.size(); ++k) {
      const auto& s = it.synthetics[k];
      if (!fs::is_regular_file(s.path)) throw IoError(cat("augmented manifest: missing synthetic file ", s.path));
      ManifestRecord r;
      r.id = cat("synthetic/", id.substr(0, 16), "/", k);
      r.path = s.path;
      r.label = it.label;
      r.split = Split::train;
      r.provenance = id;
      out.push_back(std::move(r));
    }
  }
  return DatasetManifest(std::move(out));
}

}  // namespace nmid
