#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nmid/encoder.hpp"

namespace nmid {

enum class Metric { cosine, euclidean };

inline std::string to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

inline Metric parse_metric(std::string_view s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "euclidean") return Metric::euclidean;
  throw ValidationError(cat("unknown metric '", s, "' (expected cosine|euclidean)"));
}

inline double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine of a zero vector");
  return a.dot(b) / (na * nb);
}

struct Neighbor {
  std::string id;
  std::optional<double> score;  // similarity (cosine) or distance (euclidean); absent for random samples
};

using NeighborList = std::vector<Neighbor>;

class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  EmbeddingStore(std::vector<std::string> ids, Matrix matrix, Metric metric = Metric::cosine)
      : ids_(std::move(ids)), matrix_(std::move(matrix)), metric_(metric) {
    if (static_cast<Eigen::Index>(ids_.size()) != matrix_.rows()) throw ShapeError("store: ids and rows differ");
    if (!matrix_.allFinite()) throw NumericError("store: non-finite embedding");
    norms_ = matrix_.rowwise().norm();
  }

  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& matrix() const { return matrix_; }
  const Vector& norms() const { return norms_; }
  Metric metric() const { return metric_; }
  std::size_t size() const { return ids_.size(); }
  int dim() const { return static_cast<int>(matrix_.cols()); }

  std::optional<std::size_t> row_of(std::string_view id) const {
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (ids_[i] == id) return i;
    return std::nullopt;
  }

  Vector row(std::size_t i) const { return matrix_.row(static_cast<Eigen::Index>(i)).transpose(); }

  // JSON header line + little-endian f32 row-major blob.
  std::string serialize() const {
    nlohmann::ordered_json h;
    h["version"] = 1;
    h["d"] = dim();
    h["metric"] = to_string(metric_);
    h["ids"] = ids_;
    std::string out = h.dump();
    out += '\n';
    std::vector<float> blob(static_cast<std::size_t>(matrix_.size()));
    for (Eigen::Index i = 0; i < matrix_.size(); ++i) blob[static_cast<std::size_t>(i)] = static_cast<float>(matrix_.data()[i]);
    out.append(reinterpret_cast<const char*>(blob.data()), blob.size() * sizeof(float));
    return out;
  }

  static EmbeddingStore parse(std::string_view bytes) {
    const auto nl = bytes.find('\n');
    if (nl == std::string_view::npos) throw FormatError("store: missing header line");
    nlohmann::json h;
    try {
      h = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(cat("store: bad header: ", e.what()));
    }
    if (h.value("version", 0) != 1) throw FormatError("store: unsupported version");
    const int d = h.at("d").get<int>();
    auto ids = h.at("ids").get<std::vector<std::string>>();
    const std::string_view blob = bytes.substr(nl + 1);
    const std::size_t count = ids.size() * static_cast<std::size_t>(d);
    if (blob.size() != count * sizeof(float)) throw FormatError("store: payload size does not match header");
    std::vector<float> vals(count);
    if (count) std::memcpy(vals.data(), blob.data(), blob.size());
    Matrix m(static_cast<Eigen::Index>(ids.size()), d);
    for (std::size_t i = 0; i < count; ++i) m.data()[i] = vals[i];
    return EmbeddingStore(std::move(ids), std::move(m), parse_metric(h.at("metric").get<std::string>()));
  }

  void save(const fs::path& path) const { write_file_atomic(path, serialize()); }
  static EmbeddingStore load(const fs::path& path) { return parse(read_file(path)); }

 private:
  std::vector<std::string> ids_;
  Matrix matrix_;
  Vector norms_;
  Metric metric_ = Metric::cosine;
};

struct IndexBuild {
  EmbeddingStore store;
  std::vector<std::string> warnings;
};

inline ImageTensor load_encoder_input(const fs::path& path, const EncoderConfig& cfg) {
  return preprocess_encoder(read_image(path), cfg.preprocess());
}

/// Embed every train-split image of `manifest` with the checkpoint.
inline IndexBuild build_index(const DatasetManifest& manifest, const Checkpoint& ck, Metric metric = Metric::cosine,
                              unsigned workers = default_workers()) {
  std::vector<const ManifestRecord*> recs;
  for (const auto& r : manifest.records())
    if (r.split == Split::train) recs.push_back(&r);
  if (recs.empty()) throw ValidationError("build_index: train split is empty");
  IndexBuild out;
  std::vector<std::optional<Embedding>> emb(recs.size());
  std::vector<std::string> errs(recs.size());
  parallel_for(recs.size(), workers, [&](std::size_t i) {
    try {
      emb[i] = forward(load_encoder_input(recs[i]->path, ck.config), ck.params, ck.config);
    } catch (const FormatError& e) {
      errs[i] = e.what();
    } catch (const IoError& e) {
      errs[i] = e.what();
    }
  });
  std::vector<std::string> ids;
  std::vector<Embedding> rows;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (!emb[i]) {
      out.warnings.push_back(errs[i]);
      log(LogLevel::warn, "build_index: skipping ", recs[i]->id, ": ", errs[i]);
      continue;
    }
    ids.push_back(recs[i]->id);
    rows.push_back(std::move(*emb[i]));
  }
  if (rows.empty()) throw ValidationError("build_index: no image could be embedded");
  Matrix m(static_cast<Eigen::Index>(rows.size()), ck.config.embed_dim);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  out.store = EmbeddingStore(std::move(ids), std::move(m), metric);
  return out;
}

/// Exact scan. Cosine ranks by descending similarity, Euclidean by ascending
/// distance; ties go to the smaller id.
inline NeighborList top_k_similar(const EmbeddingStore& store, const Vector& query, std::size_t k, Metric metric) {
  if (k == 0) return {};
  if (query.size() != store.dim()) throw ShapeError("top_k: query dimension mismatch");
  const std::size_t M = store.size();
  std::vector<double> score(M);
  if (metric == Metric::cosine) {
    const double qn = query.norm();
    if (!(qn > 0.0)) throw NumericError("top_k: zero-norm query under cosine");
    for (std::size_t i = 0; i < M; ++i) {
      const double rn = store.norms()(static_cast<Eigen::Index>(i));
      score[i] = rn > 0.0 ? store.matrix().row(static_cast<Eigen::Index>(i)).dot(query) / (rn * qn) : -2.0;
    }
  } else {
    for (std::size_t i = 0; i < M; ++i) score[i] = (store.matrix().row(static_cast<Eigen::Index>(i)).transpose() - query).norm();
  }
  std::vector<std::size_t> idx(M);
  std::iota(idx.begin(), idx.end(), 0);
  const auto& ids = store.ids();
  auto better = [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return metric == Metric::cosine ? score[a] > score[b] : score[a] < score[b];
    return ids[a] < ids[b];
  };
  const std::size_t take = std::min(k, M);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), better);
  NeighborList out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({ids[idx[i]], score[idx[i]]});
  return out;
}

/// Uniform sample of `k` distinct ids, without scores.
inline NeighborList sample_random(const EmbeddingStore& store, std::size_t k, std::uint64_t seed) {
  const std::size_t M = store.size();
  if (k > M) throw ValidationError(cat("sample_random: K=", k, " exceeds store size ", M));
  std::vector<std::size_t> idx(M);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, M - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  NeighborList out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({store.ids()[idx[i]], std::nullopt});
  return out;
}

}  // namespace nmid
