#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "nmid/chat.hpp"
#include "nmid/common.hpp"
#include "nmid/digest.hpp"
#include "nmid/image.hpp"

namespace nmid {

// ---------------------------------------------------------------------------
// Requests, policy, errors
// ---------------------------------------------------------------------------

struct ImageGenRequest {
  std::string prompt;
  int n = 1;
  int width = 256;
  int height = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (prompt.empty()) throw ValidationError("image request: empty prompt");
    if (n < 1) throw ValidationError(cat("image request: n must be >= 1, got ", n));
    if (width < 1 || height < 1) throw ValidationError("image request: size must be positive");
  }
};

inline nlohmann::ordered_json canonical_json(const ImageGenRequest& r) {
  nlohmann::ordered_json j;
  j["prompt"] = r.prompt;
  j["n"] = r.n;
  j["width"] = r.width;
  j["height"] = r.height;
  j["seed"] = r.seed;
  return j;
}

struct GatewayPolicy {
  int max_retries = 3;
  double backoff_base_s = 0.5;
  double backoff_max_s = 30.0;
  double jitter = 0.25;  // backoff multiplied by 1 + jitter * U[0,1)
  double rate_per_s = 5.0;
  double burst = 5.0;
  int max_concurrency = 4;
  double timeout_s = 120.0;
  fs::path cache_dir;  // empty disables the response cache
  std::uint64_t seed = 0;

  void validate() const {
    if (max_retries < 0) throw ValidationError("gateway: max_retries must be >= 0");
    if (!(rate_per_s > 0.0)) throw ValidationError("gateway: rate must be > 0");
    if (!(burst >= 1.0)) throw ValidationError("gateway: burst must be >= 1");
    if (max_concurrency < 1) throw ValidationError("gateway: max_concurrency must be >= 1");
    if (backoff_base_s < 0.0 || jitter < 0.0) throw ValidationError("gateway: backoff must be non-negative");
  }
};

class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable) : Error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

 private:
  bool retryable_;
};

// ---------------------------------------------------------------------------
// Network guard
// ---------------------------------------------------------------------------

// Every outbound network call goes through note_network_call(). Tests use
// the counter and the block flag to prove code paths stay offline.
struct NetworkGuard {
  static std::atomic<long>& calls() {
    static std::atomic<long> n{0};
    return n;
  }
  static std::atomic<int>& blocks() {
    static std::atomic<int> n{0};
    return n;
  }
  static void note_network_call(std::string_view target) {
    if (blocks().load() > 0) throw Error(cat("network access blocked by guard: ", target));
    calls().fetch_add(1);
  }

  // RAII block scope.
  class Block {
   public:
    Block() { blocks().fetch_add(1); }
    ~Block() { blocks().fetch_sub(1); }
    Block(const Block&) = delete;
    Block& operator=(const Block&) = delete;
  };
};

// ---------------------------------------------------------------------------
// Clock and rate limiting
// ---------------------------------------------------------------------------

struct Clock {
  std::function<double()> now;           // seconds, monotonic
  std::function<void(double)> sleep;     // seconds

  static Clock system() {
    return {[] {
              return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
            },
            [](double s) {
              if (s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(s));
            }};
  }
};

// Fake clock for tests: sleeping advances time instantly.
class ManualClock {
 public:
  Clock clock() {
    return {[this] {
              std::lock_guard l(mu_);
              return t_;
            },
            [this](double s) {
              std::lock_guard l(mu_);
              if (s > 0) {
                t_ += s;
                sleeps_.push_back(s);
              }
            }};
  }
  void advance(double s) {
    std::lock_guard l(mu_);
    t_ += s;
  }
  double time() const {
    std::lock_guard l(mu_);
    return t_;
  }
  std::vector<double> sleeps() const {
    std::lock_guard l(mu_);
    return sleeps_;
  }

 private:
  mutable std::mutex mu_;
  double t_ = 0.0;
  std::vector<double> sleeps_;
};

class TokenBucket {
 public:
  TokenBucket(double rate, double burst, Clock clock)
      : rate_(rate), burst_(burst), tokens_(burst), clock_(std::move(clock)), last_(clock_.now()) {
    if (!(rate > 0.0) || !(burst >= 1.0)) throw ValidationError("token bucket: rate > 0 and burst >= 1 required");
  }

  // Blocks until one token is available. Returns the wait time in seconds.
  double acquire() {
    double waited = 0.0;
    for (;;) {
      double wait = 0.0;
      {
        std::lock_guard l(mu_);
        if (shutdown_) throw Error("rate limiter shut down");
        refill();
        if (tokens_ >= 1.0) {
          tokens_ -= 1.0;
          return waited;
        }
        wait = (1.0 - tokens_) / rate_;
      }
      clock_.sleep(wait);
      waited += wait;
    }
  }

  void shutdown() {
    std::lock_guard l(mu_);
    shutdown_ = true;
  }

  double tokens() {
    std::lock_guard l(mu_);
    refill();
    return tokens_;
  }

 private:
  void refill() {
    const double t = clock_.now();
    tokens_ = std::min(burst_, tokens_ + (t - last_) * rate_);
    last_ = t;
  }

  std::mutex mu_;
  double rate_;
  double burst_;
  double tokens_;
  Clock clock_;
  double last_;
  bool shutdown_ = false;
};

class Semaphore {
 public:
  explicit Semaphore(int n) : n_(n) {}
  void acquire() {
    std::unique_lock l(mu_);
    cv_.wait(l, [&] { return n_ > 0; });
    --n_;
  }
  void release() {
    {
      std::lock_guard l(mu_);
      ++n_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int n_;
};

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  virtual bool supports_chat() const { return false; }
  virtual bool supports_images() const { return false; }
  // Mixed into cache keys when the answer depends on state outside the request.
  virtual std::string cache_salt() const { return {}; }
  virtual ChatResponse chat(const ChatRequest&) { throw ValidationError(cat("backend ", id(), " has no chat")); }
  virtual std::vector<RasterImage> generate(const ImageGenRequest&) {
    throw ValidationError(cat("backend ", id(), " has no image generation"));
  }
};

/// Real backend: minimal JSON schema over HTTP(S).
///   POST {base}/v1/chat   body = serialize_request(req)     -> {"text": ..., "usage": {...}}
///   POST {base}/v1/images body = {prompt, n, width, height, seed} -> {"images": [base64 png, ...]}
class HttpBackend : public Backend {
 public:
  HttpBackend(std::string id, std::string base_url, std::string key, double timeout_s = 120.0)
      : id_(std::move(id)), base_(std::move(base_url)), key_(std::move(key)), timeout_s_(timeout_s) {
    if (base_.empty()) throw ValidationError(cat("backend ", id_, ": base URL not set (NMID_BACKEND_URL)"));
  }

  static std::unique_ptr<HttpBackend> from_env(std::string id = "gpt4v-like", double timeout_s = 120.0) {
    const char* url = std::getenv("NMID_BACKEND_URL");
    const char* key = std::getenv("NMID_BACKEND_KEY");
    return std::make_unique<HttpBackend>(std::move(id), url ? url : "", key ? key : "", timeout_s);
  }

  std::string id() const override { return id_; }
  bool supports_chat() const override { return true; }
  bool supports_images() const override { return true; }

  ChatResponse chat(const ChatRequest& req) override {
    const auto j = post("/v1/chat", serialize_request(req));
    ChatResponse r;
    r.backend = id_;
    r.text = j.value("text", std::string{});
    if (j.contains("usage"))
      for (const auto& [k, v] : j["usage"].items())
        if (v.is_number_integer()) r.usage[k] = v.get<long>();
    return r;
  }

  std::vector<RasterImage> generate(const ImageGenRequest& req) override {
    const auto j = post("/v1/images", canonical_json(req).dump());
    std::vector<RasterImage> out;
    for (const auto& b : j.at("images")) out.push_back(decode_image(base64_decode(b.get<std::string>())));
    return out;
  }

 private:
  nlohmann::json post(const std::string& path, const std::string& body);

  std::string id_;
  std::string base_;
  std::string key_;
  double timeout_s_;
};

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

struct ImageRef {
  std::string digest;  // sha256 of PNG bytes
  fs::path path;
  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

struct ImageGenResult {
  std::vector<ImageRef> images;
  bool cached = false;
  int attempts = 0;
};

struct GatewayStats {
  std::map<std::string, long> backend_calls;  // invocations including failed attempts
  long cache_hits = 0;
  long cache_misses = 0;
  long cache_errors = 0;
};

class Gateway {
 public:
  explicit Gateway(GatewayPolicy policy = {}, Clock clock = Clock::system())
      : policy_((policy.validate(), policy)),
        clock_(clock),
        bucket_(policy_.rate_per_s, policy_.burst, clock),
        inflight_(policy_.max_concurrency),
        rng_(policy_.seed) {}

  const GatewayPolicy& policy() const { return policy_; }

  void register_backend(std::shared_ptr<Backend> b) {
    std::lock_guard l(mu_);
    const auto name = b->id();
    backends_[name] = std::move(b);
  }

  bool has_backend(const std::string& name) const {
    std::lock_guard l(mu_);
    return backends_.count(name) > 0;
  }

  GatewayStats stats() const {
    std::lock_guard l(mu_);
    return stats_;
  }

  void shutdown() { bucket_.shutdown(); }

  static std::string chat_cache_key(const std::string& backend, const ChatRequest& req,
                                    const std::string& salt = {}) {
    return sha256_hex(backend + "\n" + (salt.empty() ? "" : salt + "\n") + canonical_json(req).dump());
  }
  static std::string image_cache_key(const std::string& backend, const ImageGenRequest& req,
                                     const std::string& salt = {}) {
    return sha256_hex(backend + "\n" + (salt.empty() ? "" : salt + "\n") + canonical_json(req).dump());
  }

  fs::path cache_entry(const std::string& backend, const std::string& digest) const {
    return policy_.cache_dir / backend / (digest + ".json");
  }

  ChatResponse send_chat(const std::string& backend, ChatRequest req) {
    req.backend = backend;
    req.validate();
    Backend& b = lookup(backend);
    if (!b.supports_chat()) throw ValidationError(cat("backend ", backend, " does not support chat"));
    const std::string key = chat_cache_key(backend, req, b.cache_salt());
    if (auto hit = probe(backend, key)) {
      ChatResponse r;
      r.text = hit->at("text").get<std::string>();
      r.backend = backend;
      for (const auto& [k, v] : hit->at("usage").items()) r.usage[k] = v.get<long>();
      r.cached = true;
      return r;
    }
    int attempts = 0;
    ChatResponse r = with_retries(backend, attempts, [&] {
      ChatResponse out = b.chat(req);
      if (out.text.empty()) throw BackendError(cat("backend ", backend, " returned empty text"), true);
      return out;
    });
    r.backend = backend;
    r.cached = false;
    r.attempts = attempts;
    nlohmann::ordered_json entry;
    entry["text"] = r.text;
    entry["usage"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.usage) entry["usage"][k] = v;
    store(backend, key, entry.dump());
    return r;
  }

  /// Images are written as `<cache>/<backend>/<png digest>.png`.
  ImageGenResult generate_images(const std::string& backend, const ImageGenRequest& req) {
    req.validate();
    if (policy_.cache_dir.empty()) throw ValidationError("image generation needs a cache directory");
    Backend& b = lookup(backend);
    if (!b.supports_images()) throw ValidationError(cat("backend ", backend, " does not support images"));
    const std::string key = image_cache_key(backend, req, b.cache_salt());
    if (auto hit = probe(backend, key)) {
      ImageGenResult out;
      bool complete = true;
      for (const auto& d : hit->at("images")) {
        const auto digest = d.get<std::string>();
        const fs::path p = policy_.cache_dir / backend / (digest + ".png");
        if (!fs::is_regular_file(p)) complete = false;
        out.images.push_back({digest, p});
      }
      if (complete) {
        out.cached = true;
        return out;
      }
      log(LogLevel::warn, "gateway: cache entry ", key, " references missing images; regenerating");
    }
    int attempts = 0;
    auto images = with_retries(backend, attempts, [&] {
      auto imgs = b.generate(req);
      if (static_cast<int>(imgs.size()) != req.n)
        throw BackendError(cat("backend ", backend, " returned ", imgs.size(), " images, expected ", req.n), true);
      return imgs;
    });
    ImageGenResult out;
    out.attempts = attempts;
    nlohmann::ordered_json entry;
    entry["images"] = nlohmann::ordered_json::array();
    for (const auto& img : images) {
      const std::string png = encode_png(img);
      const std::string digest = sha256_hex(png);
      const fs::path p = policy_.cache_dir / backend / (digest + ".png");
      if (!fs::is_regular_file(p)) {
        fs::create_directories(p.parent_path());
        write_file_atomic(p, png);
      }
      out.images.push_back({digest, p});
      entry["images"].push_back(digest);
    }
    store(backend, key, entry.dump());
    return out;
  }

 private:
  Backend& lookup(const std::string& name) {
    std::lock_guard l(mu_);
    auto it = backends_.find(name);
    if (it == backends_.end()) throw ValidationError(cat("backend '", name, "' is not registered"));
    return *it->second;
  }

  std::optional<nlohmann::json> probe(const std::string& backend, const std::string& key) {
    if (policy_.cache_dir.empty()) return std::nullopt;
    const fs::path p = cache_entry(backend, key);
    try {
      if (fs::is_regular_file(p)) {
        auto j = nlohmann::json::parse(read_file(p));
        std::lock_guard l(mu_);
        ++stats_.cache_hits;
        return j;
      }
    } catch (const std::exception& e) {
      log(LogLevel::warn, "gateway: unreadable cache entry ", p.string(), ": ", e.what());
      std::lock_guard l(mu_);
      ++stats_.cache_errors;
      return std::nullopt;
    }
    std::lock_guard l(mu_);
    ++stats_.cache_misses;
    return std::nullopt;
  }

  void store(const std::string& backend, const std::string& key, const std::string& body) {
    if (policy_.cache_dir.empty()) return;
    const fs::path p = cache_entry(backend, key);
    try {
      fs::create_directories(p.parent_path());
      write_file_atomic(p, body);
    } catch (const std::exception& e) {
      log(LogLevel::warn, "gateway: cache write failed, continuing uncached: ", e.what());
      std::lock_guard l(mu_);
      ++stats_.cache_errors;
    }
  }

  double backoff(int attempt) {
    double u;
    {
      std::lock_guard l(mu_);
      u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    }
    const double base = std::min(policy_.backoff_max_s, policy_.backoff_base_s * std::ldexp(1.0, attempt - 1));
    return base * (1.0 + policy_.jitter * u);
  }

  template <typename Fn>
  auto with_retries(const std::string& backend, int& attempts, Fn&& fn) -> decltype(fn()) {
    for (attempts = 1;; ++attempts) {
      bucket_.acquire();
      inflight_.acquire();
      {
        std::lock_guard l(mu_);
        ++stats_.backend_calls[backend];
      }
      try {
        auto out = fn();
        inflight_.release();
        return out;
      } catch (const BackendError& e) {
        inflight_.release();
        if (!e.retryable() || attempts > policy_.max_retries) {
          throw BackendError(cat("backend ", backend, " failed after ", attempts, " attempt(s): ", e.what()),
                             e.retryable());
        }
        const double wait = backoff(attempts);
        log(LogLevel::warn, "backend ", backend, " attempt ", attempts, " failed (", e.what(), "); retrying in ",
            wait, "s");
        clock_.sleep(wait);
      } catch (...) {
        inflight_.release();
        throw;
      }
    }
  }

  GatewayPolicy policy_;
  Clock clock_;
  TokenBucket bucket_;
  Semaphore inflight_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Backend>> backends_;
  GatewayStats stats_;
  std::mt19937_64 rng_;
};

}  // namespace nmid

// httplib is heavy; keep it out of the header surface above.
#include <httplib.h>

namespace nmid {

inline nlohmann::json HttpBackend::post(const std::string& path, const std::string& body) {
  NetworkGuard::note_network_call(base_ + path);
  httplib::Client cli(base_);
  const auto secs = static_cast<time_t>(timeout_s_);
  cli.set_connection_timeout(secs, 0);
  cli.set_read_timeout(secs, 0);
  cli.set_write_timeout(secs, 0);
  httplib::Headers headers;
  if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);
  auto res = cli.Post(path, headers, body, "application/json");
  if (!res) throw BackendError(cat("transport error: ", httplib::to_string(res.error())), true);
  if (res->status == 429 || res->status >= 500)
    throw BackendError(cat("HTTP ", res->status, " from ", path), true);
  if (res->status != 200) throw BackendError(cat("HTTP ", res->status, " from ", path, ": ", res->body), false);
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(cat("malformed response from ", path, ": ", e.what()), false);
  }
}

}  // namespace nmid
