#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "nmid/common.hpp"

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every op applied to its nodes. Parameters enter as external
// leaves (the tape borrows the value) with an optional gradient sink that
// receives the accumulated gradient on backward(). The tape is single-use and
// single-threaded; run one tape per worker.
namespace nmid::ad {

struct Var {
  int id = -1;
};

using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix m) {
    Node n;
    n.owned = std::move(m);
    return push(std::move(n));
  }

  // Borrowed leaf. `value` must outlive the tape.
  Var param(const Matrix& value, Matrix* grad_sink = nullptr) {
    Node n;
    n.external = &value;
    n.sink = grad_sink;
    n.requires_grad = grad_enabled_ && grad_sink != nullptr;
    return push(std::move(n));
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // Result node of an op. `back` receives the upstream gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, std::function<void(const Matrix&)> back) {
    Node n;
    n.owned = std::move(value);
    bool any = false;
    for (Var in : inputs) any = any || requires_grad(in);
    n.requires_grad = grad_enabled_ && any;
    if (n.requires_grad) n.back = std::move(back);
    return push(std::move(n));
  }

  Var record(Matrix value, std::span<const Var> inputs, std::function<void(const Matrix&)> back) {
    Node n;
    n.owned = std::move(value);
    bool any = false;
    for (Var in : inputs) any = any || requires_grad(in);
    n.requires_grad = grad_enabled_ && any;
    if (n.requires_grad) n.back = std::move(back);
    return push(std::move(n));
  }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seed d(loss)/d(out) and propagate to every leaf sink.
  void backward(Var out, const Matrix& seed) {
    if (!grad_enabled_) throw Error("backward on a tape with gradients disabled");
    const Matrix& v = value(out);
    if (seed.rows() != v.rows() || seed.cols() != v.cols()) throw ShapeError("backward seed shape mismatch");
    accumulate(out, seed);
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.back) n.back(n.grad);
      if (n.sink) {
        if (n.sink->size() == 0) {
          *n.sink = n.grad;
        } else {
          *n.sink += n.grad;
        }
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix* sink = nullptr;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(const Matrix&)> back;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(cat(op, ": shape ", a.rows(), "x", a.cols(), " vs ", b.rows(), "x", b.cols()));
  }
}

inline Var matmul(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (A.cols() != B.rows()) throw ShapeError(cat("matmul: ", A.rows(), "x", A.cols(), " * ", B.rows(), "x", B.cols()));
  Matrix C = A * B;
  return t.record(std::move(C), {a, b}, [&t, a, b](const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

// A * B^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (A.cols() != B.cols()) throw ShapeError("matmul_nt: inner dims differ");
  Matrix C = A * B.transpose();
  return t.record(std::move(C), {a, b}, [&t, a, b](const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b));
    if (t.requires_grad(b)) t.accumulate(b, g.transpose() * t.value(a));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "add");
  Matrix C = t.value(a) + t.value(b);
  return t.record(std::move(C), {a, b}, [&t, a, b](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

// a (r x c) + broadcast row b (1 x c)
inline Var add_row(Tape& t, Var a, Var b) {
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (B.rows() != 1 || B.cols() != A.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Matrix C = A.rowwise() + B.row(0);
  return t.record(std::move(C), {a, b}, [&t, a, b](const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
  });
}

inline Var scale(Tape& t, Var a, double s) {
  Matrix C = t.value(a) * s;
  return t.record(std::move(C), {a}, [&t, a, s](const Matrix& g) { t.accumulate(a, g * s); });
}

// tanh approximation of GELU; smooth everywhere so finite differences behave.
inline Var gelu(Tape& t, Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  const Matrix& X = t.value(a);
  Matrix Y = X.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); });
  return t.record(std::move(Y), {a}, [&t, a](const Matrix& g) {
    const Matrix& X = t.value(a);
    Matrix d = X.unaryExpr([](double x) {
      const double u = k * (x + c * x * x * x);
      const double th = std::tanh(u);
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * c * x * x);
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

// Row-wise layer norm with learned gain/offset (1 x cols each).
inline Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Matrix& X = t.value(x);
  const Matrix& G = t.value(gamma);
  const Matrix& Bt = t.value(beta);
  const auto cols = X.cols();
  if (G.rows() != 1 || G.cols() != cols || Bt.rows() != 1 || Bt.cols() != cols) {
    throw ShapeError("layer_norm: gain/offset must be 1 x cols");
  }
  Matrix xhat(X.rows(), cols);
  Vector inv_std(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std(r);
  }
  Matrix Y = (xhat.array().rowwise() * G.row(0).array()).rowwise() + Bt.row(0).array();
  return t.record(std::move(Y), {x, gamma, beta},
                  [&t, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix& g) {
                    const Matrix& G = t.value(gamma);
                    if (t.requires_grad(gamma)) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                    if (t.requires_grad(beta)) t.accumulate(beta, g.colwise().sum());
                    if (t.requires_grad(x)) {
                      Matrix dxhat = g.array().rowwise() * G.row(0).array();
                      const double n = static_cast<double>(dxhat.cols());
                      Matrix dx(dxhat.rows(), dxhat.cols());
                      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                        const double m1 = dxhat.row(r).sum() / n;
                        const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                        dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                      }
                      t.accumulate(x, dx);
                    }
                  });
}

// Forward-only masked softmax. Disallowed entries are exactly zero.
inline Matrix masked_softmax_value(const Matrix& S, const Mask* mask) {
  Matrix P = Matrix::Zero(S.rows(), S.cols());
  for (Eigen::Index r = 0; r < S.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < S.cols(); ++c)
      if (!mask || (*mask)(r, c)) mx = std::max(mx, S(r, c));
    if (!std::isfinite(mx)) throw NumericError("masked softmax row has no admissible finite entry");
    double sum = 0.0;
    for (Eigen::Index c = 0; c < S.cols(); ++c) {
      if (!mask || (*mask)(r, c)) {
        P(r, c) = std::exp(S(r, c) - mx);
        sum += P(r, c);
      }
    }
    P.row(r) /= sum;
  }
  return P;
}

// Row-wise softmax restricted to `mask` (null = unrestricted). The mask is
// copied into the closure so callers may pass temporaries.
inline Var masked_softmax(Tape& t, Var s, const Mask* mask) {
  const Matrix& S = t.value(s);
  if (mask && (mask->rows() != S.rows() || mask->cols() != S.cols())) throw ShapeError("masked_softmax: mask shape");
  Matrix P = masked_softmax_value(S, mask);
  const Var out{static_cast<int>(t.size())};
  return t.record(std::move(P), {s}, [&t, s, out](const Matrix& g) {
    const Matrix& P = t.value(out);
    // Disallowed entries have P == 0, so they receive zero gradient.
    Vector dot = (g.cwiseProduct(P)).rowwise().sum();
    Matrix ds = P.array() * (g.array().colwise() - dot.array());
    t.accumulate(s, ds);
  });
}

inline Var slice_cols(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& A = t.value(a);
  if (start < 0 || start + count > A.cols()) throw ShapeError("slice_cols out of range");
  Matrix C = A.middleCols(start, count);
  return t.record(std::move(C), {a}, [&t, a, start, count](const Matrix& g) {
    const Matrix& A = t.value(a);
    Matrix full = Matrix::Zero(A.rows(), A.cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

inline Var slice_rows(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& A = t.value(a);
  if (start < 0 || start + count > A.rows()) throw ShapeError("slice_rows out of range");
  Matrix C = A.middleRows(start, count);
  return t.record(std::move(C), {a}, [&t, a, start, count](const Matrix& g) {
    const Matrix& A = t.value(a);
    Matrix full = Matrix::Zero(A.rows(), A.cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += t.value(p).cols();
  }
  Matrix C(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    C.middleCols(off, t.value(p).cols()) = t.value(p);
    off += t.value(p).cols();
  }
  return t.record(std::move(C), std::span<const Var>(parts), [&t, parts](const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const auto c = t.value(p).cols();
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(off, c));
      off += c;
    }
  });
}

inline Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += t.value(p).rows();
  }
  Matrix C(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    C.middleRows(off, t.value(p).rows()) = t.value(p);
    off += t.value(p).rows();
  }
  return t.record(std::move(C), std::span<const Var>(parts), [&t, parts](const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const auto r = t.value(p).rows();
      if (t.requires_grad(p)) t.accumulate(p, g.middleRows(off, r));
      off += r;
    }
  });
}

}  // namespace nmid::ad
