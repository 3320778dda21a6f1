#pragma once

#include <nlohmann/json.hpp>

#include <cctype>
#include <charconv>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "nmid/common.hpp"
#include "nmid/dataset.hpp"
#include "nmid/encoder.hpp"
#include "nmid/gateway.hpp"
#include "nmid/index.hpp"
#include "nmid/miner.hpp"
#include "nmid/trainer.hpp"

namespace nmid {

// ---------------------------------------------------------------------------
// TOML subset: [table] and [a.b] headers, key = value, strings (basic and
// literal), integers, floats, booleans, arrays of scalars, # comments.
// Keys are flattened to "table.key".
// ---------------------------------------------------------------------------

using TomlScalar = std::variant<bool, long long, double, std::string>;
using TomlValue = std::variant<bool, long long, double, std::string, std::vector<TomlScalar>>;
using TomlDocument = std::map<std::string, TomlValue>;

class TomlParser {
 public:
  TomlParser(std::string_view text, std::string origin) : s_(text), origin_(std::move(origin)) {}

  TomlDocument parse() {
    TomlDocument doc;
    std::string table;
    while (true) {
      skip_ws_comments_newlines();
      if (eof()) break;
      if (peek() == '[') {
        ++i_;
        skip_inline_ws();
        table = parse_key();
        skip_inline_ws();
        expect(']');
        end_of_line();
        continue;
      }
      const std::string key = parse_key();
      skip_inline_ws();
      expect('=');
      skip_inline_ws();
      TomlValue v = parse_value();
      end_of_line();
      const std::string full = table.empty() ? key : table + "." + key;
      if (!doc.emplace(full, std::move(v)).second) fail(cat("duplicate key '", full, "'"));
    }
    return doc;
  }

  static TomlValue parse_single_value(std::string_view text) {
    TomlParser p(text, "<override>");
    p.skip_inline_ws();
    TomlValue v = p.parse_value();
    p.skip_inline_ws();
    if (!p.eof()) p.fail("trailing characters in value");
    return v;
  }

 private:
  bool eof() const { return i_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[i_]; }

  [[noreturn]] void fail(const std::string& msg) const {
    std::size_t line = 1;
    for (std::size_t k = 0; k < i_ && k < s_.size(); ++k)
      if (s_[k] == '\n') ++line;
    throw FormatError(cat(origin_, ":", line, ": ", msg));
  }

  void expect(char c) {
    if (peek() != c) fail(cat("expected '", c, "'"));
    ++i_;
  }

  void skip_inline_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++i_;
  }

  void skip_comment() {
    if (peek() == '#')
      while (!eof() && peek() != '\n') ++i_;
  }

  void skip_ws_comments_newlines() {
    while (!eof()) {
      const char c = peek();
      if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++i_;
      } else if (c == '#') {
        skip_comment();
      } else {
        break;
      }
    }
  }

  void end_of_line() {
    skip_inline_ws();
    skip_comment();
    if (peek() == '\r') ++i_;
    if (!eof() && peek() != '\n') fail("expected end of line");
  }

  std::string parse_key() {
    std::string key;
    while (true) {
      skip_inline_ws();
      std::string part;
      if (peek() == '"') {
        part = parse_basic_string();
      } else {
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-'))
          part += s_[i_++];
      }
      if (part.empty()) fail("expected key");
      key += key.empty() ? part : "." + part;
      skip_inline_ws();
      if (peek() != '.') break;
      ++i_;
    }
    return key;
  }

  std::string parse_basic_string() {
    expect('"');
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = s_[i_++];
      if (c == '"') break;
      if (c == '\\') {
        if (eof()) fail("unterminated escape");
        const char e = s_[i_++];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(cat("unsupported escape \\", e));
        }
      } else {
        out += c;
      }
    }
    return out;
  }

  std::string parse_literal_string() {
    expect('\'');
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = s_[i_++];
      if (c == '\'') break;
      out += c;
    }
    return out;
  }

  TomlScalar parse_scalar() {
    const char c = peek();
    if (c == '"') return parse_basic_string();
    if (c == '\'') return parse_literal_string();
    std::string tok;
    while (!eof() && !std::isspace(static_cast<unsigned char>(peek())) && peek() != ',' && peek() != ']' &&
           peek() != '#')
      tok += s_[i_++];
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok.empty()) fail("expected value");
    std::string num;
    for (char ch : tok)
      if (ch != '_') num += ch;
    if (num.front() == '+') num.erase(0, 1);
    const bool is_float = num.find_first_of(".eE") != std::string::npos || num == "inf" || num == "-inf" ||
                          num == "nan";
    if (is_float) {
      try {
        std::size_t used = 0;
        const double v = std::stod(num, &used);
        if (used == num.size()) return v;
      } catch (const std::exception&) {
      }
      fail(cat("invalid number '", tok, "'"));
    }
    long long v = 0;
    auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
    if (ec != std::errc() || p != num.data() + num.size()) fail(cat("invalid value '", tok, "'"));
    return v;
  }

  TomlValue parse_value() {
    if (peek() != '[') {
      return std::visit([](auto&& x) -> TomlValue { return x; }, parse_scalar());
    }
    ++i_;
    std::vector<TomlScalar> arr;
    while (true) {
      skip_ws_comments_newlines();
      if (peek() == ']') {
        ++i_;
        break;
      }
      arr.push_back(parse_scalar());
      skip_ws_comments_newlines();
      if (peek() == ',') {
        ++i_;
        continue;
      }
      if (peek() == ']') {
        ++i_;
        break;
      }
      fail("expected ',' or ']' in array");
    }
    return arr;
  }

  std::string_view s_;
  std::string origin_;
  std::size_t i_ = 0;
};

inline TomlDocument parse_toml(std::string_view text, const std::string& origin = "<config>") {
  return TomlParser(text, origin).parse();
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

struct SyntheticDataConfig {
  bool enabled = true;  // gen-data writes the dataset when dataset.root is unset
  int n_classes = 10;
  int per_class = 200;
  int size = 64;
  std::uint64_t seed = 7;
};

struct RetrievalConfig {
  Metric metric = Metric::cosine;
  int k = 5;
  std::string sampler = "similarity";  // similarity | random
  std::uint64_t seed = 0;
};

struct BackendSelection {
  std::string vqa = "mock-vqa";
  std::string classifier = "mock-classifier";
  std::string imagegen = "mock-imagegen";
};

struct DescribeConfig {
  int per_class = 1;           // train images described per class
  bool category_hint = false;  // include the true category in the preamble
};

struct SynthesizeConfig {
  int images_per_item = 2;
  int width = 64;
  int height = 64;
};

struct ReviewConfig {
  std::string host = "127.0.0.1";
  int port = 8765;
  std::string token;
  std::string ui_dir;
};

struct PipelineConfig {
  fs::path out_dir = "out";
  fs::path dataset_root;  // empty -> <out>/gen-data/images
  SyntheticDataConfig synthetic;
  EncoderConfig encoder;
  TrainConfig train;
  AugmentationConfig augment;
  MiningConfig mining;
  RetrievalConfig retrieval;
  BackendSelection backends;
  GatewayPolicy gateway;  // cache_dir empty -> <out>/cache
  DescribeConfig describe;
  SynthesizeConfig synthesize;
  ReviewConfig review;
  int workers = 0;
  std::string log_level = "info";

  fs::path stage_dir(const std::string& stage) const { return out_dir / stage; }
  fs::path resolved_dataset_root() const {
    return dataset_root.empty() ? out_dir / "gen-data" / "images" : dataset_root;
  }
  fs::path cache_dir() const { return gateway.cache_dir.empty() ? out_dir / "cache" : gateway.cache_dir; }

  void validate() const {
    encoder.validate();
    train.validate();
    augment.validate();
    gateway.validate();
    if (mining.clusters < 1) throw ValidationError("mining.clusters must be >= 1");
    if (!(mining.test_fraction > 0.0 && mining.test_fraction < 1.0))
      throw ValidationError("mining.test_fraction must be in (0,1)");
    if (!(mining.variance_target > 0.0 && mining.variance_target <= 1.0))
      throw ValidationError("mining.variance_target must be in (0,1]");
    if (mining.max_components < 1) throw ValidationError("mining.max_components must be >= 1");
    if (mining.target_height < 1 || mining.target_width < 1) throw ValidationError("mining size must be positive");
    if (retrieval.k < 0) throw ValidationError("retrieval.k must be >= 0");
    if (retrieval.sampler != "similarity" && retrieval.sampler != "random")
      throw ValidationError(cat("retrieval.sampler must be similarity|random, got '", retrieval.sampler, "'"));
    if (describe.per_class < 1) throw ValidationError("describe.per_class must be >= 1");
    if (synthesize.images_per_item < 1) throw ValidationError("synthesize.images_per_item must be >= 1");
    if (synthesize.width < 8 || synthesize.height < 8) throw ValidationError("synthesize size must be >= 8");
    if (synthetic.n_classes < 2 || synthetic.per_class < 2 || synthetic.size < 8)
      throw ValidationError("synthetic dataset: n_classes >= 2, per_class >= 2, size >= 8 required");
    if (review.port < 0 || review.port > 65535) throw ValidationError("review.port out of range");
  }
};

namespace detail {

template <typename T>
T toml_as(const TomlValue& v, const std::string& key);

template <>
inline bool toml_as<bool>(const TomlValue& v, const std::string& key) {
  if (auto p = std::get_if<bool>(&v)) return *p;
  throw ValidationError(cat("config key ", key, ": expected boolean"));
}
template <>
inline long long toml_as<long long>(const TomlValue& v, const std::string& key) {
  if (auto p = std::get_if<long long>(&v)) return *p;
  throw ValidationError(cat("config key ", key, ": expected integer"));
}
template <>
inline double toml_as<double>(const TomlValue& v, const std::string& key) {
  if (auto p = std::get_if<double>(&v)) return *p;
  if (auto p = std::get_if<long long>(&v)) return static_cast<double>(*p);
  throw ValidationError(cat("config key ", key, ": expected number"));
}
template <>
inline std::string toml_as<std::string>(const TomlValue& v, const std::string& key) {
  if (auto p = std::get_if<std::string>(&v)) return *p;
  throw ValidationError(cat("config key ", key, ": expected string"));
}

class ConfigBinder {
 public:
  explicit ConfigBinder(const TomlDocument& doc) : doc_(doc) {}

  void boolean(const std::string& key, bool& out) { bind(key, out); }
  void string(const std::string& key, std::string& out) { bind(key, out); }
  void real(const std::string& key, double& out) { bind(key, out); }
  void path(const std::string& key, fs::path& out) {
    std::string s;
    if (bind(key, s)) out = s;
  }
  template <typename Int>
  void integer(const std::string& key, Int& out) {
    long long v = 0;
    if (!bind(key, v)) return;
    if constexpr (std::is_unsigned_v<Int>) {
      if (v < 0) throw ValidationError(cat("config key ", key, ": must be non-negative"));
    }
    out = static_cast<Int>(v);
  }

  void reject_unknown() const {
    for (const auto& [k, v] : doc_)
      if (!used_.count(k)) throw ValidationError(cat("unknown config key '", k, "'"));
  }

 private:
  template <typename T>
  bool bind(const std::string& key, T& out) {
    used_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return false;
    out = toml_as<T>(it->second, key);
    return true;
  }

  const TomlDocument& doc_;
  std::set<std::string> used_;
};

}  // namespace detail

inline PipelineConfig config_from_toml(const TomlDocument& doc) {
  PipelineConfig c;
  detail::ConfigBinder b(doc);
  b.path("out_dir", c.out_dir);
  b.integer("workers", c.workers);
  b.string("log_level", c.log_level);

  b.path("dataset.root", c.dataset_root);
  b.boolean("dataset.synthetic.enabled", c.synthetic.enabled);
  b.integer("dataset.synthetic.n_classes", c.synthetic.n_classes);
  b.integer("dataset.synthetic.per_class", c.synthetic.per_class);
  b.integer("dataset.synthetic.size", c.synthetic.size);
  b.integer("dataset.synthetic.seed", c.synthetic.seed);

  auto& e = c.encoder;
  b.integer("encoder.patch_size", e.patch_size);
  b.integer("encoder.embed_dim", e.embed_dim);
  b.integer("encoder.layers", e.layers);
  b.integer("encoder.heads", e.heads);
  b.integer("encoder.head_dim", e.head_dim);
  b.integer("encoder.local_window", e.local_window);
  b.integer("encoder.ff_dim", e.ff_dim);
  b.integer("encoder.image_height", e.image_height);
  b.integer("encoder.image_width", e.image_width);
  b.integer("encoder.channels", e.channels);
  b.integer("encoder.seed", e.seed);

  auto& t = c.train;
  b.integer("train.epochs", t.epochs);
  b.real("train.lr", t.lr);
  b.integer("train.batch_size", t.batch_size);
  b.real("train.temperature", t.temperature);
  b.integer("train.patience", t.patience);
  b.integer("train.lr_halving_patience", t.lr_halving_patience);
  b.real("train.val_fraction", t.val_fraction);
  b.real("train.min_improvement", t.min_improvement);
  b.integer("train.seed", t.seed);

  auto& a = c.augment;
  b.real("augment.crop_min", a.crop_min);
  b.real("augment.crop_max", a.crop_max);
  b.real("augment.flip_prob", a.flip_prob);
  b.real("augment.noise_sigma", a.noise_sigma);
  b.real("augment.brightness_delta", a.brightness_delta);
  b.integer("augment.seed", a.seed);

  auto& m = c.mining;
  b.integer("mining.height", m.target_height);
  b.integer("mining.width", m.target_width);
  b.integer("mining.clusters", m.clusters);
  b.real("mining.variance_target", m.variance_target);
  b.integer("mining.max_components", m.max_components);
  b.real("mining.test_fraction", m.test_fraction);
  b.integer("mining.seed", m.seed);
  b.integer("mining.max_iters", m.max_iters);
  b.real("mining.tol", m.tol);

  std::string metric = to_string(c.retrieval.metric);
  b.string("retrieval.metric", metric);
  c.retrieval.metric = parse_metric(metric);
  b.integer("retrieval.k", c.retrieval.k);
  b.string("retrieval.sampler", c.retrieval.sampler);
  b.integer("retrieval.seed", c.retrieval.seed);

  b.string("backends.vqa", c.backends.vqa);
  b.string("backends.classifier", c.backends.classifier);
  b.string("backends.imagegen", c.backends.imagegen);

  auto& g = c.gateway;
  b.integer("gateway.max_retries", g.max_retries);
  b.real("gateway.backoff_base_s", g.backoff_base_s);
  b.real("gateway.backoff_max_s", g.backoff_max_s);
  b.real("gateway.jitter", g.jitter);
  b.real("gateway.rate_per_s", g.rate_per_s);
  b.real("gateway.burst", g.burst);
  b.integer("gateway.max_concurrency", g.max_concurrency);
  b.real("gateway.timeout_s", g.timeout_s);
  b.path("gateway.cache_dir", g.cache_dir);
  b.integer("gateway.seed", g.seed);

  b.integer("describe.per_class", c.describe.per_class);
  b.boolean("describe.category_hint", c.describe.category_hint);

  b.integer("synthesize.images_per_item", c.synthesize.images_per_item);
  b.integer("synthesize.width", c.synthesize.width);
  b.integer("synthesize.height", c.synthesize.height);

  b.string("review.host", c.review.host);
  b.integer("review.port", c.review.port);
  b.string("review.token", c.review.token);
  b.string("review.ui_dir", c.review.ui_dir);

  b.reject_unknown();
  c.train.workers = static_cast<unsigned>(c.workers);
  return c;
}

/// Applies "key=value" overrides (value in TOML syntax; bare words are
/// taken as strings) on top of `doc`.
inline void apply_overrides(TomlDocument& doc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError(cat("override '", o, "' is not key=value"));
    const std::string key = o.substr(0, eq);
    const std::string val = o.substr(eq + 1);
    try {
      doc[key] = TomlParser::parse_single_value(val);
    } catch (const FormatError&) {
      doc[key] = val;
    }
  }
}

inline PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  TomlDocument doc;
  if (!path.empty()) {
    if (!fs::is_regular_file(path)) throw IoError(cat("config file not found: ", path.string()));
    doc = parse_toml(read_file(path), path.string());
  }
  apply_overrides(doc, overrides);
  PipelineConfig c = config_from_toml(doc);
  c.validate();
  return c;
}

}  // namespace nmid
