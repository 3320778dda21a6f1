#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "nmid/common.hpp"

namespace nmid {

// partner[k] is the index of the other view of the same image.
using Pairing = std::vector<int>;

// Rows [0,N) are first views, rows [N,2N) second views.
inline Pairing standard_pairing(int n_images) {
  Pairing p(static_cast<std::size_t>(2 * n_images));
  for (int i = 0; i < n_images; ++i) {
    p[static_cast<std::size_t>(i)] = i + n_images;
    p[static_cast<std::size_t>(i + n_images)] = i;
  }
  return p;
}

inline void check_pairing(const Pairing& pairing, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(pairing.size()) != rows) throw ShapeError("pairing size does not match embedding rows");
  for (std::size_t k = 0; k < pairing.size(); ++k) {
    const int q = pairing[k];
    if (q < 0 || q >= rows || q == static_cast<int>(k) || pairing[static_cast<std::size_t>(q)] != static_cast<int>(k)) {
      throw ValidationError(cat("pairing is not a perfect matching at index ", k));
    }
  }
}

struct NtXentResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d embeddings, same shape as the input
};

/// NT-Xent over 2N embeddings with cosine similarity and temperature `tau`.
/// The denominator of each term excludes both the anchor and its positive.
/// Gradient is computed only when `with_grad` is set.
inline NtXentResult nt_xent_impl(const Matrix& Z, const Pairing& pairing, double tau, bool with_grad) {
  if (tau <= 0.0) throw ValidationError("temperature must be positive");
  const Eigen::Index m = Z.rows();
  if (m % 2 != 0 || m < 4) throw ValidationError(cat("NT-Xent needs 2N rows with N >= 2, got ", m));
  check_pairing(pairing, m);

  Vector norms = Z.rowwise().norm();
  for (Eigen::Index k = 0; k < m; ++k)
    if (!(norms(k) > 0.0)) throw NumericError(cat("zero-norm embedding at row ", k));
  Matrix U = Z.array().colwise() / norms.array();
  Matrix S = (U * U.transpose()) / tau;

  NtXentResult out;
  Matrix G;
  if (with_grad) G = Matrix::Zero(m, m);
  const double inv2n = 1.0 / static_cast<double>(m);
  double total = 0.0;
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index pos = pairing[static_cast<std::size_t>(k)];
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index l = 0; l < m; ++l)
      if (l != k && l != pos) mx = std::max(mx, S(k, l));
    double sum = 0.0;
    for (Eigen::Index l = 0; l < m; ++l)
      if (l != k && l != pos) sum += std::exp(S(k, l) - mx);
    const double lse = mx + std::log(sum);
    total += lse - S(k, pos);
    if (with_grad) {
      for (Eigen::Index l = 0; l < m; ++l)
        if (l != k && l != pos) G(k, l) = inv2n * std::exp(S(k, l) - lse);
      G(k, pos) -= inv2n;
    }
  }
  out.loss = total * inv2n;
  if (with_grad) {
    Matrix dU = ((G + G.transpose()) * U) / tau;
    out.grad.resize(m, Z.cols());
    for (Eigen::Index k = 0; k < m; ++k) {
      const double radial = U.row(k).dot(dU.row(k));
      out.grad.row(k) = (dU.row(k) - radial * U.row(k)) / norms(k);
    }
  }
  return out;
}

inline double nt_xent(const Matrix& Z, const Pairing& pairing, double tau) {
  return nt_xent_impl(Z, pairing, tau, false).loss;
}

inline NtXentResult nt_xent_with_grad(const Matrix& Z, const Pairing& pairing, double tau) {
  return nt_xent_impl(Z, pairing, tau, true);
}

}  // namespace nmid
