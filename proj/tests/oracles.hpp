#pragma once

// Slow reference implementations written from the definitions, sharing no
// code with the library beyond its data types.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "nmid/encoder.hpp"

namespace nmid::oracle {

inline double cos_sim(const Matrix& Z, int a, int b) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index j = 0; j < Z.cols(); ++j) {
    dot += Z(a, j) * Z(b, j);
    na += Z(a, j) * Z(a, j);
    nb += Z(b, j) * Z(b, j);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Rows [0,n) paired with [n,2n).
inline double ntxent(const Matrix& Z, double tau) {
  const int m = static_cast<int>(Z.rows());
  const int n = m / 2;
  double total = 0.0;
  for (int k = 0; k < m; ++k) {
    const int pos = k < n ? k + n : k - n;
    double denom = 0.0;
    for (int l = 0; l < m; ++l) {
      if (l == k || l == pos) continue;
      denom += std::exp(cos_sim(Z, k, l) / tau);
    }
    total += -std::log(std::exp(cos_sim(Z, k, pos) / tau) / denom);
  }
  return total / m;
}

// ---------------------------------------------------------------------------
// Encoder forward with explicit loops.
// ---------------------------------------------------------------------------

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Matrix& m) {
  Mat o(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) o[i][j] = m(i, j);
  return o;
}

inline Mat mm(const Mat& a, const Mat& b) {
  Mat o(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) o[i][j] += a[i][k] * b[k][j];
  return o;
}

inline Mat affine(const Mat& x, const Matrix& w, const Matrix& b) {
  Mat o = mm(x, to_mat(w));
  for (auto& row : o)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b(0, j);
  return o;
}

inline Mat layernorm(const Mat& x, const Matrix& g, const Matrix& b) {
  Mat o = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mu = 0;
    for (double v : x[i]) mu += v;
    mu /= n;
    double var = 0;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) o[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g(0, j) + b(0, j);
  }
  return o;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// allowed(i, j) == false removes key j from query i's softmax.
template <typename Allowed>
Mat attention(const Mat& x, const ParameterSet& ps, const std::string& pre, int heads, int dh, Allowed allowed,
              std::vector<Mat>* probs_out) {
  const Mat q = affine(x, ps[pre + "q.weight"], ps[pre + "q.bias"]);
  const Mat k = affine(x, ps[pre + "k.weight"], ps[pre + "k.bias"]);
  const Mat v = affine(x, ps[pre + "v.weight"], ps[pre + "v.bias"]);
  const std::size_t n = x.size();
  Mat cat_heads(n, std::vector<double>(static_cast<std::size_t>(heads * dh), 0.0));
  for (int h = 0; h < heads; ++h) {
    Mat p(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n, 0.0);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        if (!allowed(i, j)) continue;
        for (int c = 0; c < dh; ++c) s[j] += q[i][h * dh + c] * k[j][h * dh + c];
        s[j] /= std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (allowed(i, j)) z += std::exp(s[j] - mx);
      for (std::size_t j = 0; j < n; ++j) p[i][j] = allowed(i, j) ? std::exp(s[j] - mx) / z : 0.0;
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (int c = 0; c < dh; ++c) cat_heads[i][h * dh + c] += p[i][j] * v[j][h * dh + c];
    if (probs_out) probs_out->push_back(p);
  }
  return affine(cat_heads, ps[pre + "o.weight"], ps[pre + "o.bias"]);
}

template <typename Allowed>
Mat block(const Mat& x, const ParameterSet& ps, const std::string& pre, const EncoderConfig& cfg, Allowed allowed,
          std::vector<Mat>* probs_out) {
  Mat a = attention(layernorm(x, ps[pre + "ln1.gamma"], ps[pre + "ln1.beta"]), ps, pre, cfg.heads, cfg.head_dim,
                    allowed, probs_out);
  Mat h = x;
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < h[i].size(); ++j) h[i][j] += a[i][j];
  Mat f = affine(layernorm(h, ps[pre + "ln2.gamma"], ps[pre + "ln2.beta"]), ps[pre + "ff1.weight"], ps[pre + "ff1.bias"]);
  for (auto& row : f)
    for (double& v : row) v = gelu(v);
  f = affine(f, ps[pre + "ff2.weight"], ps[pre + "ff2.bias"]);
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < h[i].size(); ++j) h[i][j] += f[i][j];
  return h;
}

/// Embedding (cls row). `window` < 0 means unrestricted local attention.
/// Local-stage probabilities are appended to `local_probs` when given.
inline Vector encoder_forward(const ImageTensor& img, const ParameterSet& ps, const EncoderConfig& cfg, int window,
                              std::vector<Mat>* local_probs = nullptr) {
  const int P = cfg.patch_size;
  const int gr = img.height / P, gc = img.width / P, n = gr * gc;
  Mat tok(static_cast<std::size_t>(n));
  for (int r = 0; r < gr; ++r)
    for (int c = 0; c < gc; ++c)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x)
          for (int ch = 0; ch < img.channels; ++ch) tok[r * gc + c].push_back(img.at(r * P + y, c * P + x, ch));
  Mat emb = affine(tok, ps["patch_proj.weight"], ps["patch_proj.bias"]);
  const Matrix& pos = ps["pos_embed"];
  Mat x(static_cast<std::size_t>(n + 1), std::vector<double>(static_cast<std::size_t>(cfg.embed_dim)));
  for (int j = 0; j < cfg.embed_dim; ++j) x[0][j] = ps["cls_token"](0, j) + pos(0, j);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cfg.embed_dim; ++j) x[i + 1][j] = emb[i][j] + pos(i + 1, j);
  auto local_ok = [&](std::size_t i, std::size_t j) {
    if (window < 0) return true;
    const int ri = static_cast<int>(i) / gc, ci = static_cast<int>(i) % gc;
    const int rj = static_cast<int>(j) / gc, cj = static_cast<int>(j) % gc;
    return std::max(std::abs(ri - rj), std::abs(ci - cj)) <= window;
  };
  auto all_ok = [](std::size_t, std::size_t) { return true; };
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "layers." + std::to_string(l) + ".";
    Mat patches(x.begin() + 1, x.end());
    patches = block(patches, ps, base + "local.", cfg, local_ok, local_probs);
    std::copy(patches.begin(), patches.end(), x.begin() + 1);
    x = block(x, ps, base + "global.", cfg, all_ok, nullptr);
  }
  return Eigen::Map<const Vector>(x[0].data(), cfg.embed_dim);
}

// ---------------------------------------------------------------------------
// Linear algebra and clustering references.
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
inline std::vector<double> jacobi_eigenvalues(Matrix A, int sweeps = 100) {
  const Eigen::Index n = A.rows();
  for (int s = 0; s < sweeps; ++s) {
    double off = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j) off += A(i, j) * A(i, j);
    if (off < 1e-30) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (std::abs(A(p, q)) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2 * A(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), sn = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - sn * akq;
          A(k, q) = sn * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - sn * aqk;
          A(q, k) = sn * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) ev[i] = A(i, i);
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

inline Matrix sample_covariance(const Matrix& X) {
  const Eigen::Index M = X.rows(), D = X.cols();
  std::vector<double> mean(static_cast<std::size_t>(D), 0.0);
  for (Eigen::Index i = 0; i < M; ++i)
    for (Eigen::Index j = 0; j < D; ++j) mean[j] += X(i, j) / M;
  Matrix C = Matrix::Zero(D, D);
  for (Eigen::Index i = 0; i < M; ++i)
    for (Eigen::Index a = 0; a < D; ++a)
      for (Eigen::Index b = 0; b < D; ++b) C(a, b) += (X(i, a) - mean[a]) * (X(i, b) - mean[b]) / (M - 1);
  return C;
}

/// O(n^2) silhouette straight from the definition; singletons score 0.
inline std::vector<double> silhouette(const Matrix& Z, const std::vector<int>& lab) {
  const std::size_t n = lab.size();
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (Eigen::Index c = 0; c < Z.cols(); ++c) s += (Z(i, c) - Z(j, c)) * (Z(i, c) - Z(j, c));
    return std::sqrt(s);
  };
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, std::pair<double, int>> acc;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      acc[lab[j]].first += dist(i, j);
      acc[lab[j]].second += 1;
    }
    if (acc[lab[i]].second == 0) continue;
    const double a = acc[lab[i]].first / acc[lab[i]].second;
    double b = 1e300;
    for (const auto& [c, v] : acc)
      if (c != lab[i] && v.second > 0) b = std::min(b, v.first / v.second);
    out[i] = (b - a) / std::max(a, b);
  }
  return out;
}

/// Full sort of cosine similarities, ties broken by id.
inline std::vector<std::string> cosine_ranking(const std::vector<std::string>& ids, const Matrix& rows,
                                               const Vector& q) {
  std::vector<std::pair<double, std::string>> s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double dot = 0, na = 0, nq = 0;
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      dot += rows(i, c) * q(c);
      na += rows(i, c) * rows(i, c);
      nq += q(c) * q(c);
    }
    s.push_back({dot / std::sqrt(na * nq), ids[i]});
  }
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  for (auto& p : s) out.push_back(p.second);
  return out;
}

}  // namespace nmid::oracle
