#pragma once

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "nmid/common.hpp"
#include "nmid/dataset.hpp"

namespace nmid {

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaModel {
  RowVector mean;
  Matrix components;  // n_components x D, orthonormal rows, descending eigenvalue
  Vector eigenvalues;
  double total_variance = 0.0;  // trace of the sample covariance
  bool degenerate = false;      // data has (numerically) no variance
};

namespace detail {

// Orthonormal completion of `rows` filled rows of `basis` via Gram-Schmidt
// against the standard basis.
inline void complete_basis(Matrix& basis, Eigen::Index filled) {
  const Eigen::Index D = basis.cols();
  Eigen::Index next = filled;
  for (Eigen::Index e = 0; e < D && next < basis.rows(); ++e) {
    RowVector v = RowVector::Zero(D);
    v(e) = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index r = 0; r < next; ++r) v -= v.dot(basis.row(r)) * basis.row(r);
    const double n = v.norm();
    if (n > 1e-6) basis.row(next++) = v / n;
  }
}

inline void fix_sign(Matrix& components) {
  for (Eigen::Index r = 0; r < components.rows(); ++r) {
    Eigen::Index arg = 0;
    components.row(r).cwiseAbs().maxCoeff(&arg);
    if (components(r, arg) < 0) components.row(r) *= -1.0;
  }
}

// Full eigen spectrum (descending) of the sample covariance of X, plus the
// leading `keep` eigenvectors in data space.
inline void covariance_eigs(const Matrix& Xc, Eigen::Index keep, Vector& eigenvalues, Matrix& components,
                            bool& degenerate) {
  const Eigen::Index M = Xc.rows();
  const Eigen::Index D = Xc.cols();
  const double denom = static_cast<double>(M - 1);
  components = Matrix::Zero(keep, D);
  Eigen::Index filled = 0;
  if (D <= M) {
    Matrix C = (Xc.transpose() * Xc) / denom;
    Eigen::SelfAdjointEigenSolver<Matrix> es(C);
    if (es.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
    eigenvalues = es.eigenvalues().reverse().cwiseMax(0.0);
    for (Eigen::Index i = 0; i < keep; ++i) components.row(i) = es.eigenvectors().col(D - 1 - i).transpose();
    filled = keep;
  } else {
    // Gram side: shares the nonzero spectrum, M x M instead of D x D.
    Matrix G = (Xc * Xc.transpose()) / denom;
    Eigen::SelfAdjointEigenSolver<Matrix> es(G);
    if (es.info() != Eigen::Success) throw NumericError("gram eigendecomposition failed");
    Vector ev = es.eigenvalues().reverse().cwiseMax(0.0);
    eigenvalues = Vector::Zero(std::min(M, D));
    eigenvalues.head(ev.size()) = ev;
    const double tiny = std::max(1e-12, 1e-10 * (ev.size() ? ev(0) : 0.0));
    for (Eigen::Index i = 0; i < keep; ++i) {
      const double lam = eigenvalues(i);
      if (lam <= tiny) break;
      RowVector v = (Xc.transpose() * es.eigenvectors().col(M - 1 - i)).transpose() / std::sqrt(denom * lam);
      // Re-orthogonalize against earlier rows to remove rounding drift.
      for (Eigen::Index r = 0; r < i; ++r) v -= v.dot(components.row(r)) * components.row(r);
      components.row(i) = v / v.norm();
      filled = i + 1;
    }
  }
  const double top = eigenvalues.size() ? eigenvalues(0) : 0.0;
  degenerate = top <= 1e-12;
  if (filled < keep) complete_basis(components, filled);
  fix_sign(components);
}

}  // namespace detail

/// Mean-centred PCA keeping `n_components` leading components.
inline PcaModel fit_pca(const Matrix& X, int n_components) {
  const Eigen::Index M = X.rows();
  const Eigen::Index D = X.cols();
  if (M < 2) throw ValidationError("PCA needs at least 2 samples");
  if (n_components < 1 || n_components > std::min(M, D)) {
    throw ValidationError(cat("n_components=", n_components, " must be in [1, min(M,D)=", std::min(M, D), "]"));
  }
  PcaModel model;
  model.mean = X.colwise().mean();
  Matrix Xc = X.rowwise() - model.mean;
  model.total_variance = Xc.squaredNorm() / static_cast<double>(M - 1);
  Vector all;
  detail::covariance_eigs(Xc, n_components, all, model.components, model.degenerate);
  model.eigenvalues = all.head(n_components);
  return model;
}

/// Smallest component count whose eigenvalues explain >= `target` of the
/// total variance, capped at `cap`.
inline int components_for_variance(const Vector& eigenvalues, double total, double target, int cap) {
  if (total <= 0.0) return 1;
  double acc = 0.0;
  const int limit = std::min<int>(cap, static_cast<int>(eigenvalues.size()));
  for (int i = 0; i < limit; ++i) {
    acc += eigenvalues(i);
    if (acc >= target * total) return i + 1;
  }
  return std::max(1, limit);
}

inline PcaModel fit_pca_auto(const Matrix& X, double variance_target = 0.95, int cap = 50) {
  const Eigen::Index M = X.rows();
  if (M < 2) throw ValidationError("PCA needs at least 2 samples");
  const Eigen::Index maxk = std::min<Eigen::Index>({M, X.cols(), cap});
  PcaModel model;
  model.mean = X.colwise().mean();
  Matrix Xc = X.rowwise() - model.mean;
  model.total_variance = Xc.squaredNorm() / static_cast<double>(M - 1);
  Vector all;
  Matrix comps;
  detail::covariance_eigs(Xc, maxk, all, comps, model.degenerate);
  const int k = components_for_variance(all, model.total_variance, variance_target, static_cast<int>(maxk));
  model.components = comps.topRows(k);
  model.eigenvalues = all.head(k);
  return model;
}

inline Matrix project(const PcaModel& model, const Matrix& X) {
  if (X.cols() != model.components.cols()) {
    throw ShapeError(cat("project: data has ", X.cols(), " columns, model expects ", model.components.cols()));
  }
  return (X.rowwise() - model.mean) * model.components.transpose();
}

inline Matrix reconstruct(const PcaModel& model, const Matrix& Z) {
  if (Z.cols() != model.components.rows()) throw ShapeError("reconstruct: component count mismatch");
  return (Z * model.components).rowwise() + model.mean;
}

// ---------------------------------------------------------------------------
// K-Means
// ---------------------------------------------------------------------------

struct ClusterModel {
  Matrix centroids;  // K x dims
  std::vector<int> assignments;
  double inertia = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> inertia_history;  // after every assignment step
};

namespace detail {

inline double assign_points(const Matrix& Z, const Matrix& C, std::vector<int>& assign) {
  double inertia = 0.0;
  assign.resize(static_cast<std::size_t>(Z.rows()));
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index c = 0; c < C.rows(); ++c) {
      const double d = (Z.row(i) - C.row(c)).squaredNorm();
      if (d < best) {  // strict: ties keep the lowest cluster id
        best = d;
        arg = static_cast<int>(c);
      }
    }
    assign[static_cast<std::size_t>(i)] = arg;
    inertia += best;
  }
  return inertia;
}

}  // namespace detail

inline Matrix kmeans_plus_plus(const Matrix& Z, int K, std::uint64_t seed) {
  const Eigen::Index M = Z.rows();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix C(K, Z.cols());
  std::size_t first = static_cast<std::size_t>(unit(rng) * static_cast<double>(M));
  first = std::min<std::size_t>(first, static_cast<std::size_t>(M - 1));
  C.row(0) = Z.row(static_cast<Eigen::Index>(first));
  Vector d2(M);
  for (Eigen::Index i = 0; i < M; ++i) d2(i) = (Z.row(i) - C.row(0)).squaredNorm();
  for (int c = 1; c < K; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double r = unit(rng) * total;
      double acc = 0.0;
      pick = M - 1;
      for (Eigen::Index i = 0; i < M; ++i) {
        acc += d2(i);
        if (acc > r && d2(i) > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min<Eigen::Index>(c, M - 1);
    }
    C.row(c) = Z.row(pick);
    for (Eigen::Index i = 0; i < M; ++i) d2(i) = std::min(d2(i), (Z.row(i) - C.row(c)).squaredNorm());
  }
  return C;
}

/// Lloyd iterations from given centroids. Converged means the centroid shift
/// fell below `tol` and a further assignment pass changed nothing, so the
/// result is a fixed point.
inline ClusterModel kmeans_from(const Matrix& Z, Matrix centroids, int max_iters = 300, double tol = 1e-4) {
  const Eigen::Index M = Z.rows();
  const Eigen::Index K = centroids.rows();
  if (centroids.cols() != Z.cols()) throw ShapeError("kmeans: centroid dims differ from data");
  ClusterModel model;
  std::vector<int> assign;
  std::vector<int> prev;
  bool shift_small = false;
  for (int it = 1; it <= max_iters; ++it) {
    const double inertia = detail::assign_points(Z, centroids, assign);
    model.inertia_history.push_back(inertia);
    model.iterations = it;
    if (shift_small && assign == prev) {
      model.converged = true;
      break;
    }
    // Empty clusters take the point farthest from its centroid.
    std::vector<int> counts(static_cast<std::size_t>(K), 0);
    for (int a : assign) ++counts[static_cast<std::size_t>(a)];
    for (Eigen::Index c = 0; c < K; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < M; ++i) {
        const int a = assign[static_cast<std::size_t>(i)];
        if (counts[static_cast<std::size_t>(a)] <= 1) continue;
        const double d = (Z.row(i) - centroids.row(a)).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far < 0) break;
      --counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(far)])];
      assign[static_cast<std::size_t>(far)] = static_cast<int>(c);
      counts[static_cast<std::size_t>(c)] = 1;
    }
    Matrix next = Matrix::Zero(K, Z.cols());
    for (Eigen::Index i = 0; i < M; ++i) next.row(assign[static_cast<std::size_t>(i)]) += Z.row(i);
    for (Eigen::Index c = 0; c < K; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) next.row(c) /= counts[static_cast<std::size_t>(c)];
      else next.row(c) = centroids.row(c);
    }
    double shift = 0.0;
    for (Eigen::Index c = 0; c < K; ++c) shift = std::max(shift, (next.row(c) - centroids.row(c)).norm());
    centroids = std::move(next);
    shift_small = shift < tol;
    prev = assign;
  }
  model.inertia = detail::assign_points(Z, centroids, model.assignments);
  model.centroids = std::move(centroids);
  return model;
}

inline ClusterModel kmeans(const Matrix& Z, int K, std::uint64_t seed, int max_iters = 300, double tol = 1e-4) {
  if (K < 1) throw ValidationError("K must be >= 1");
  if (K > Z.rows()) throw ValidationError(cat("K=", K, " exceeds the number of points (", Z.rows(), ")"));
  return kmeans_from(Z, kmeans_plus_plus(Z, K, seed), max_iters, tol);
}

inline std::vector<double> centroid_distances(const Matrix& Z, const ClusterModel& model) {
  std::vector<double> d(static_cast<std::size_t>(Z.rows()));
  for (Eigen::Index i = 0; i < Z.rows(); ++i)
    d[static_cast<std::size_t>(i)] = (Z.row(i) - model.centroids.row(model.assignments[static_cast<std::size_t>(i)])).norm();
  return d;
}

// ---------------------------------------------------------------------------
// Silhouette
// ---------------------------------------------------------------------------

/// Per-point silhouette with Euclidean distance. Members of singleton
/// clusters score 0.
inline std::vector<double> silhouette(const Matrix& Z, const std::vector<int>& assignments) {
  const Eigen::Index M = Z.rows();
  if (static_cast<Eigen::Index>(assignments.size()) != M) throw ShapeError("silhouette: assignment count mismatch");
  std::map<int, int> remap;
  for (int a : assignments) remap.emplace(a, 0);
  if (remap.size() < 2) throw ValidationError("silhouette needs at least 2 clusters");
  int next = 0;
  for (auto& [k, v] : remap) v = next++;
  const int K = next;
  std::vector<int> cl(static_cast<std::size_t>(M));
  std::vector<int> size(static_cast<std::size_t>(K), 0);
  for (Eigen::Index i = 0; i < M; ++i) {
    cl[static_cast<std::size_t>(i)] = remap[assignments[static_cast<std::size_t>(i)]];
    ++size[static_cast<std::size_t>(cl[static_cast<std::size_t>(i)])];
  }
  Matrix sums = Matrix::Zero(M, K);
  for (Eigen::Index i = 0; i < M; ++i) {
    for (Eigen::Index j = i + 1; j < M; ++j) {
      const double d = (Z.row(i) - Z.row(j)).norm();
      sums(i, cl[static_cast<std::size_t>(j)]) += d;
      sums(j, cl[static_cast<std::size_t>(i)]) += d;
    }
  }
  std::vector<double> s(static_cast<std::size_t>(M), 0.0);
  for (Eigen::Index i = 0; i < M; ++i) {
    const int c = cl[static_cast<std::size_t>(i)];
    if (size[static_cast<std::size_t>(c)] <= 1) continue;
    const double a = sums(i, c) / (size[static_cast<std::size_t>(c)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k)
      if (k != c) b = std::min(b, sums(i, k) / size[static_cast<std::size_t>(k)]);
    const double den = std::max(a, b);
    s[static_cast<std::size_t>(i)] = den > 0.0 ? (b - a) / den : 0.0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Hardness and split
// ---------------------------------------------------------------------------

// 0-based ranks, ties averaged. `descending` ranks the largest value 0.
inline std::vector<double> average_ranks(const std::vector<double>& v, bool descending) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? v[a] > v[b] : v[a] < v[b];
  });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Rank-based hardness in [0,1]: far from the centroid and low silhouette
/// both push towards 1.
inline std::vector<double> hardness_scores(const std::vector<double>& distances, const std::vector<double>& silhouettes) {
  if (distances.size() != silhouettes.size()) throw ShapeError("hardness: input lengths differ");
  const std::size_t M = distances.size();
  if (M == 0) return {};
  if (M == 1) return {0.5};
  const auto rd = average_ranks(distances, false);   // largest distance -> M-1
  const auto rs = average_ranks(silhouettes, true);  // smallest silhouette -> M-1
  std::vector<double> h(M);
  for (std::size_t i = 0; i < M; ++i) h[i] = (rd[i] + rs[i]) / (2.0 * static_cast<double>(M - 1));
  return h;
}

struct HardnessEntry {
  std::string id;
  double centroid_distance = 0.0;
  double silhouette = 0.0;
  double hardness = 0.0;
  int cluster = 0;
};

struct SplitAssignment {
  std::vector<Split> splits;  // aligned with manifest records
  double test_fraction = 0.0;
};

/// Per class, the ceil(fraction * class_size) hardest images become test.
/// Ties in hardness are broken by id.
inline SplitAssignment make_split(const DatasetManifest& manifest, const std::vector<double>& hardness,
                                  double fraction = 0.10) {
  if (hardness.size() != manifest.size()) throw ShapeError("make_split: every manifest image needs a hardness score");
  if (fraction < 0.0 || fraction > 1.0) throw ValidationError("split fraction must be in [0,1]");
  std::map<std::string, std::vector<std::size_t>> by_class;
  const auto& recs = manifest.records();
  for (std::size_t i = 0; i < recs.size(); ++i) by_class[recs[i].label].push_back(i);
  SplitAssignment out;
  out.test_fraction = fraction;
  out.splits.assign(recs.size(), Split::train);
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2) throw ValidationError(cat("class '", label, "' has fewer than 2 images"));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (hardness[a] != hardness[b]) return hardness[a] > hardness[b];
      return recs[a].id < recs[b].id;
    });
    const auto n_test = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9));
    for (std::size_t k = 0; k < std::min(n_test, idx.size()); ++k) out.splits[idx[k]] = Split::test;
  }
  return out;
}

inline DatasetManifest apply_split(const DatasetManifest& manifest, const SplitAssignment& split,
                                   const std::vector<double>& hardness) {
  if (split.splits.size() != manifest.size() || hardness.size() != manifest.size()) {
    throw ShapeError("apply_split: length mismatch");
  }
  std::vector<ManifestRecord> recs = manifest.records();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].split = split.splits[i];
    recs[i].hardness = hardness[i];
  }
  return DatasetManifest(std::move(recs));
}

// ---------------------------------------------------------------------------
// End-to-end mining
// ---------------------------------------------------------------------------

struct MiningConfig {
  int target_height = 224;
  int target_width = 224;
  int clusters = 10;
  double variance_target = 0.95;
  int max_components = 50;
  double test_fraction = 0.10;
  std::uint64_t seed = 0;
  int max_iters = 300;
  double tol = 1e-4;
};

struct MiningResult {
  DatasetManifest manifest;  // split and hardness filled
  std::vector<HardnessEntry> report;
  int n_components = 0;
  double explained_variance = 0.0;
  ClusterModel clusters;
  std::vector<std::string> flags;
};

inline MiningResult mine(const DatasetManifest& manifest, const MiningConfig& cfg) {
  if (manifest.size() < 2) throw ValidationError("mining needs at least 2 images");
  PreprocessConfig pre{cfg.target_height, cfg.target_width, PreprocessMode::mining_zscore, 0};
  Matrix X;
  MiningResult out;
  const auto& recs = manifest.records();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    FeatureVector f = preprocess_mining(read_image(recs[i].path), pre);
    if (f.constant) out.flags.push_back(cat("constant image mapped to zeros: ", recs[i].id));
    if (i == 0) X.resize(static_cast<Eigen::Index>(recs.size()), static_cast<Eigen::Index>(f.values.size()));
    if (static_cast<Eigen::Index>(f.values.size()) != X.cols()) throw ShapeError("mining features differ in length");
    X.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const RowVector>(f.values.data(), X.cols());
  }
  PcaModel pca = fit_pca_auto(X, cfg.variance_target, cfg.max_components);
  if (pca.degenerate) out.flags.push_back("degenerate data: all PCA eigenvalues ~0");
  out.n_components = static_cast<int>(pca.components.rows());
  out.explained_variance = pca.total_variance > 0 ? pca.eigenvalues.sum() / pca.total_variance : 0.0;
  Matrix Z = project(pca, X);
  const int K = std::min<int>(cfg.clusters, static_cast<int>(Z.rows()));
  out.clusters = kmeans(Z, K, cfg.seed, cfg.max_iters, cfg.tol);
  const auto dist = centroid_distances(Z, out.clusters);
  const auto sil = silhouette(Z, out.clusters.assignments);
  const auto hard = hardness_scores(dist, sil);
  const SplitAssignment split = make_split(manifest, hard, cfg.test_fraction);
  out.manifest = apply_split(manifest, split, hard);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    out.report.push_back({recs[i].id, dist[i], sil[i], hard[i], out.clusters.assignments[i]});
  }
  return out;
}

inline nlohmann::ordered_json to_json(const HardnessEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["cluster"] = e.cluster;
  j["centroid_distance"] = e.centroid_distance;
  j["silhouette"] = e.silhouette;
  j["hardness"] = e.hardness;
  return j;
}

}  // namespace nmid
