#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "nmid/autodiff.hpp"
#include "nmid/common.hpp"
#include "nmid/dataset.hpp"

namespace nmid {

struct EncoderConfig {
  int patch_size = 32;
  int embed_dim = 128;
  int layers = 2;
  int heads = 4;
  int head_dim = 32;
  int local_window = 2;  // Chebyshev radius on the patch grid
  int ff_dim = 0;        // 0 -> 4 * embed_dim
  int image_height = 224;
  int image_width = 224;
  int channels = 3;
  std::uint64_t seed = 0;

  int ff_width() const { return ff_dim > 0 ? ff_dim : 4 * embed_dim; }
  int grid_rows() const { return image_height / patch_size; }
  int grid_cols() const { return image_width / patch_size; }
  int num_patches() const { return grid_rows() * grid_cols(); }
  int patch_features() const { return patch_size * patch_size * channels; }

  void validate() const {
    if (patch_size <= 0 || embed_dim <= 0 || layers < 0 || heads <= 0 || head_dim <= 0) {
      throw ValidationError("encoder config: sizes must be positive");
    }
    if (image_height <= 0 || image_width <= 0) throw ValidationError("encoder config: image dims must be positive");
    if (image_height % patch_size != 0 || image_width % patch_size != 0) {
      throw ValidationError(cat("encoder config: image ", image_height, "x", image_width,
                                " not divisible by patch size ", patch_size));
    }
    if (heads * head_dim != embed_dim) {
      throw ValidationError(cat("encoder config: heads*head_dim (", heads * head_dim, ") != embed_dim (", embed_dim, ")"));
    }
    if (local_window < 1) throw ValidationError("encoder config: local_window must be >= 1");
    if (channels != 1 && channels != 3) throw ValidationError("encoder config: channels must be 1 or 3");
  }

  // Same architecture (tensor shapes) regardless of seed.
  bool same_architecture(const EncoderConfig& o) const {
    return patch_size == o.patch_size && embed_dim == o.embed_dim && layers == o.layers && heads == o.heads &&
           head_dim == o.head_dim && local_window == o.local_window && ff_width() == o.ff_width() &&
           image_height == o.image_height && image_width == o.image_width && channels == o.channels;
  }

  PreprocessConfig preprocess() const {
    return PreprocessConfig{image_height, image_width, PreprocessMode::encoder_signed, channels};
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline nlohmann::ordered_json to_json(const EncoderConfig& c) {
  nlohmann::ordered_json j;
  j["patch_size"] = c.patch_size;
  j["embed_dim"] = c.embed_dim;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["local_window"] = c.local_window;
  j["ff_dim"] = c.ff_width();
  j["image_height"] = c.image_height;
  j["image_width"] = c.image_width;
  j["channels"] = c.channels;
  j["seed"] = c.seed;
  return j;
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.patch_size = j.at("patch_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.local_window = j.at("local_window").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.image_height = j.at("image_height").get<int>();
  c.image_width = j.at("image_width").get<int>();
  c.channels = j.at("channels").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// Named tensors in a fixed order. Also used for gradients and optimizer moments.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Matrix value;
  };

  void add(std::string name, Matrix value) {
    if (index_.count(name)) throw ValidationError(cat("duplicate parameter name ", name));
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Matrix& operator[](const std::string& name) { return entries_[lookup(name)].value; }
  const Matrix& operator[](const std::string& name) const { return entries_[lookup(name)].value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet z;
    for (const auto& e : entries_) z.add(e.name, Matrix::Zero(e.value.rows(), e.value.cols()));
    return z;
  }

  bool same_shapes(const ParameterSet& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = o.entries_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.value.allFinite()) return false;
    return true;
  }

  void add_scaled(const ParameterSet& o, double s) {
    if (!same_shapes(o)) throw ShapeError("parameter sets differ in shape");
    for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value += s * o.entries_[i].value;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (!a.same_shapes(b)) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].value != b.entries_[i].value) return false;
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError(cat("missing parameter ", name));
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

inline std::vector<std::pair<std::string, std::pair<int, int>>> expected_shapes(const EncoderConfig& cfg) {
  const int d = cfg.embed_dim;
  const int f = cfg.ff_width();
  std::vector<std::pair<std::string, std::pair<int, int>>> s;
  s.push_back({"patch_proj.weight", {cfg.patch_features(), d}});
  s.push_back({"patch_proj.bias", {1, d}});
  s.push_back({"pos_embed", {cfg.num_patches() + 1, d}});
  s.push_back({"cls_token", {1, d}});
  for (int l = 0; l < cfg.layers; ++l) {
    for (const char* stage : {"local", "global"}) {
      const std::string p = cat("layers.", l, ".", stage, ".");
      s.push_back({p + "ln1.gamma", {1, d}});
      s.push_back({p + "ln1.beta", {1, d}});
      for (const char* proj : {"q", "k", "v", "o"}) {
        s.push_back({p + proj + ".weight", {d, d}});
        s.push_back({p + proj + ".bias", {1, d}});
      }
      s.push_back({p + "ln2.gamma", {1, d}});
      s.push_back({p + "ln2.beta", {1, d}});
      s.push_back({p + "ff1.weight", {d, f}});
      s.push_back({p + "ff1.bias", {1, f}});
      s.push_back({p + "ff2.weight", {f, d}});
      s.push_back({p + "ff2.bias", {1, d}});
    }
  }
  return s;
}

/// Seeded init: Xavier-uniform projections, zero biases, unit layer-norm
/// gains, normal(0, 0.02) positional embeddings and cls token.
inline ParameterSet init_parameters(const EncoderConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ParameterSet ps;
  for (const auto& [name, shape] : expected_shapes(cfg)) {
    const auto [rows, cols] = shape;
    Matrix m = Matrix::Zero(rows, cols);
    const bool is_weight = name.ends_with(".weight");
    if (is_weight) {
      const double limit = std::sqrt(6.0 / (rows + cols));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    } else if (name == "pos_embed" || name == "cls_token") {
      std::normal_distribution<double> n(0.0, 0.02);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    } else if (name.ends_with(".gamma")) {
      m.setOnes();
    }
    ps.add(name, std::move(m));
  }
  return ps;
}

inline ParameterSet zero_parameters(const EncoderConfig& cfg) {
  cfg.validate();
  ParameterSet ps;
  for (const auto& [name, shape] : expected_shapes(cfg)) ps.add(name, Matrix::Zero(shape.first, shape.second));
  return ps;
}

inline void check_parameters(const ParameterSet& params, const EncoderConfig& cfg) {
  const auto shapes = expected_shapes(cfg);
  if (shapes.size() != params.size()) {
    throw ShapeError(cat("parameter count ", params.size(), " does not match config (", shapes.size(), ")"));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& e = params.entries()[i];
    const auto& [name, shape] = shapes[i];
    if (e.name != name || e.value.rows() != shape.first || e.value.cols() != shape.second) {
      throw ShapeError(cat("parameter ", e.name, " has shape ", e.value.rows(), "x", e.value.cols(), "; expected ", name,
                           " ", shape.first, "x", shape.second));
    }
  }
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

struct PatchSequence {
  Matrix tokens;  // n x (P*P*C), raster order over the patch grid
  int rows = 0;
  int cols = 0;
};

inline PatchSequence tokenize(const ImageTensor& img, const EncoderConfig& cfg) {
  const int P = cfg.patch_size;
  if (P <= 0) throw ValidationError("patch size must be positive");
  if (img.height % P != 0 || img.width % P != 0) {
    throw ShapeError(cat("image ", img.height, "x", img.width, " not divisible by patch size ", P));
  }
  if (img.channels != cfg.channels) {
    throw ShapeError(cat("image has ", img.channels, " channels, encoder expects ", cfg.channels));
  }
  PatchSequence seq;
  seq.rows = img.height / P;
  seq.cols = img.width / P;
  const int C = img.channels;
  seq.tokens.resize(seq.rows * seq.cols, P * P * C);
  for (int gr = 0; gr < seq.rows; ++gr) {
    for (int gc = 0; gc < seq.cols; ++gc) {
      const int n = gr * seq.cols + gc;
      int k = 0;
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px)
          for (int c = 0; c < C; ++c) seq.tokens(n, k++) = img.at(gr * P + py, gc * P + px, c);
    }
  }
  return seq;
}

// Local attention mask over patch tokens: Chebyshev distance <= window.
inline ad::Mask local_window_mask(int rows, int cols, int window) {
  const int n = rows * cols;
  ad::Mask m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      m(i, j) = std::max(std::abs(i / cols - j / cols), std::abs(i % cols - j % cols)) <= window;
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Attention probabilities captured during a forward pass, for inspection.
struct AttentionTrace {
  struct Record {
    int layer;
    std::string stage;  // "local" | "global"
    int head;
    Matrix weights;
  };
  std::vector<Record> records;
};

class EncoderGraph {
 public:
  // `grads` (optional) must have the parameters' shapes or be empty; it
  // receives d(seed)/d(param) on backward().
  EncoderGraph(const ParameterSet& params, const EncoderConfig& cfg, ParameterSet* grads, bool grad_enabled)
      : tape_(grad_enabled), params_(params), cfg_(cfg), grads_(grads) {}

  ad::Tape& tape() { return tape_; }

  ad::Var p(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    Matrix* sink = grads_ ? &(*grads_)[name] : nullptr;
    ad::Var v = tape_.param(params_[name], sink);
    leaves_.emplace(name, v);
    return v;
  }

  ad::Var linear(ad::Var x, const std::string& prefix) {
    return ad::add_row(tape_, ad::matmul(tape_, x, p(prefix + ".weight")), p(prefix + ".bias"));
  }

  ad::Var multi_head_attention(ad::Var x, const std::string& prefix, const ad::Mask* mask, int layer,
                               const char* stage, AttentionTrace* trace) {
    ad::Var q = linear(x, prefix + "q");
    ad::Var k = linear(x, prefix + "k");
    ad::Var v = linear(x, prefix + "v");
    const int dh = cfg_.head_dim;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> heads;
    for (int h = 0; h < cfg_.heads; ++h) {
      ad::Var qh = ad::slice_cols(tape_, q, h * dh, dh);
      ad::Var kh = ad::slice_cols(tape_, k, h * dh, dh);
      ad::Var vh = ad::slice_cols(tape_, v, h * dh, dh);
      ad::Var scores = ad::scale(tape_, ad::matmul_nt(tape_, qh, kh), inv_sqrt);
      ad::Var probs = ad::masked_softmax(tape_, scores, mask);
      if (trace) trace->records.push_back({layer, stage, h, tape_.value(probs)});
      heads.push_back(ad::matmul(tape_, probs, vh));
    }
    return linear(ad::concat_cols(tape_, heads), prefix + "o");
  }

  // Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)).
  ad::Var attention_block(ad::Var x, const std::string& prefix, const ad::Mask* mask, int layer, const char* stage,
                          AttentionTrace* trace) {
    ad::Var n1 = ad::layer_norm(tape_, x, p(prefix + "ln1.gamma"), p(prefix + "ln1.beta"));
    ad::Var h = ad::add(tape_, x, multi_head_attention(n1, prefix, mask, layer, stage, trace));
    ad::Var n2 = ad::layer_norm(tape_, h, p(prefix + "ln2.gamma"), p(prefix + "ln2.beta"));
    ad::Var f = linear(ad::gelu(tape_, linear(n2, prefix + "ff1")), prefix + "ff2");
    return ad::add(tape_, h, f);
  }

  // Returns the (n+1) x d token matrix after all layers; row 0 is cls.
  ad::Var run(const ImageTensor& img, AttentionTrace* trace = nullptr) {
    PatchSequence seq = tokenize(img, cfg_);
    const int n = seq.rows * seq.cols;
    const ad::Mask local = local_window_mask(seq.rows, seq.cols, cfg_.local_window);
    ad::Var tokens = tape_.constant(std::move(seq.tokens));
    ad::Var emb = linear(tokens, "patch_proj");
    ad::Var pos = p("pos_embed");
    emb = ad::add(tape_, emb, ad::slice_rows(tape_, pos, 1, n));
    ad::Var cls = ad::add(tape_, p("cls_token"), ad::slice_rows(tape_, pos, 0, 1));
    ad::Var x = ad::concat_rows(tape_, {cls, emb});
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string base = cat("layers.", l, ".");
      ad::Var cls_row = ad::slice_rows(tape_, x, 0, 1);
      ad::Var patches = ad::slice_rows(tape_, x, 1, n);
      patches = attention_block(patches, base + "local.", &local, l, "local", trace);
      x = ad::concat_rows(tape_, {cls_row, patches});
      x = attention_block(x, base + "global.", nullptr, l, "global", trace);
      if (!tape_.value(x).allFinite()) throw NumericError(cat("non-finite activation after layer ", l));
    }
    return x;
  }

  ad::Var embed(const ImageTensor& img, AttentionTrace* trace = nullptr) {
    return ad::slice_rows(tape_, run(img, trace), 0, 1);
  }

 private:
  ad::Tape tape_;
  const ParameterSet& params_;
  const EncoderConfig& cfg_;
  ParameterSet* grads_;
  std::map<std::string, ad::Var> leaves_;
};

using Embedding = Vector;

inline Embedding forward(const ImageTensor& img, const ParameterSet& params, const EncoderConfig& cfg,
                         AttentionTrace* trace = nullptr) {
  EncoderGraph g(params, cfg, nullptr, false);
  ad::Var out = g.embed(img, trace);
  return g.tape().value(out).row(0).transpose();
}

// Runs fn(i) for i in [0,n) over up to `workers` threads. Each index is
// handled by exactly one thread; callers reduce results in index order.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline unsigned default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

inline std::vector<Embedding> forward_batch(const std::vector<ImageTensor>& imgs, const ParameterSet& params,
                                            const EncoderConfig& cfg, unsigned workers = default_workers()) {
  check_parameters(params, cfg);
  std::vector<Embedding> out(imgs.size());
  parallel_for(imgs.size(), workers, [&](std::size_t i) { out[i] = forward(imgs[i], params, cfg); });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file: one-line JSON header, newline, little-endian payload.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr const char* kCheckpointMagic = "NMID-CKPT";
inline constexpr int kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const ParameterSet& params, const EncoderConfig& cfg) {
  check_parameters(params, cfg);
  nlohmann::ordered_json header;
  header["magic"] = kCheckpointMagic;
  header["version"] = kCheckpointVersion;
  header["config"] = to_json(cfg);
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& e : params.entries()) {
    const std::size_t len = static_cast<std::size_t>(e.value.size()) * sizeof(double);
    nlohmann::ordered_json t;
    t["name"] = e.name;
    t["shape"] = {e.value.rows(), e.value.cols()};
    t["dtype"] = "f64";
    t["byte_offset"] = offset;
    t["byte_len"] = len;
    table.push_back(t);
    offset += len;
  }
  header["tensor_table"] = table;
  std::string out = header.dump();
  out += '\n';
  for (const auto& e : params.entries()) {
    out.append(reinterpret_cast<const char*>(e.value.data()), static_cast<std::size_t>(e.value.size()) * sizeof(double));
  }
  return out;
}

struct Checkpoint {
  ParameterSet params;
  EncoderConfig config;
};

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw FormatError("checkpoint: missing header terminator");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception&) {
    throw FormatError("checkpoint: version error: header is not NMID-CKPT JSON");
  }
  if (!header.is_object() || header.value("magic", std::string{}) != kCheckpointMagic) {
    throw FormatError("checkpoint: version error: bad magic");
  }
  if (header.value("version", -1) != kCheckpointVersion) {
    throw FormatError(cat("checkpoint: version error: unsupported version ", header.value("version", -1)));
  }
  Checkpoint ck;
  ck.config = encoder_config_from_json(header.at("config"));
  ck.config.validate();
  const std::string_view payload = bytes.substr(nl + 1);
  const auto shapes = expected_shapes(ck.config);
  const auto& table = header.at("tensor_table");
  if (table.size() != shapes.size()) throw ShapeError("checkpoint: tensor count does not match config");
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& t = table[i];
    const std::string name = t.at("name").get<std::string>();
    const int rows = t.at("shape").at(0).get<int>();
    const int cols = t.at("shape").at(1).get<int>();
    if (name != shapes[i].first || rows != shapes[i].second.first || cols != shapes[i].second.second) {
      throw ShapeError(cat("checkpoint: tensor ", name, " ", rows, "x", cols, " does not match config (expected ",
                           shapes[i].first, " ", shapes[i].second.first, "x", shapes[i].second.second, ")"));
    }
    const std::string dtype = t.at("dtype").get<std::string>();
    const std::size_t off = t.at("byte_offset").get<std::size_t>();
    const std::size_t len = t.at("byte_len").get<std::size_t>();
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
    if (width == 0) throw FormatError(cat("checkpoint: unsupported dtype ", dtype));
    if (len != count * width) throw ShapeError(cat("checkpoint: tensor ", name, " byte_len mismatch"));
    if (off + len > payload.size()) throw FormatError(cat("checkpoint: truncated payload at tensor ", name));
    Matrix m(rows, cols);
    if (width == 8) {
      std::memcpy(m.data(), payload.data() + off, len);
    } else {
      std::vector<float> tmp(count);
      std::memcpy(tmp.data(), payload.data() + off, len);
      for (std::size_t k = 0; k < count; ++k) m.data()[k] = tmp[k];
    }
    ck.params.add(name, std::move(m));
  }
  return ck;
}

inline void save_checkpoint(const ParameterSet& params, const EncoderConfig& cfg, const fs::path& path) {
  write_file_atomic(path, serialize_checkpoint(params, cfg));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(cat(path.string(), ": malformed checkpoint header: ", e.what()));
  }
}

// Loads and checks the stored architecture against `expected`.
inline Checkpoint load_checkpoint(const fs::path& path, const EncoderConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.config.same_architecture(expected)) {
    throw ShapeError(cat(path.string(), ": checkpoint architecture (patch_size=", ck.config.patch_size,
                         ", embed_dim=", ck.config.embed_dim, ") does not match expected (patch_size=",
                         expected.patch_size, ", embed_dim=", expected.embed_dim, ")"));
  }
  return ck;
}

}  // namespace nmid
