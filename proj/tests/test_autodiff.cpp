#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "nmid/autodiff.hpp"
#include "support.hpp"

using namespace nmid;
using namespace nmid::ad;

namespace {

// f maps leaf values to a scalar through a freshly built tape and returns
// the output node; checks the analytic gradient of sum(W .* out) per leaf.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

void check_gradients(std::vector<Matrix> leaves, const Builder& build, double tol = 1e-7) {
  std::mt19937_64 rng(99);
  Matrix W;
  auto scalar = [&](const std::vector<Matrix>& vals) {
    Tape t(false);
    std::vector<Var> vs;
    for (const auto& v : vals) vs.push_back(t.param(v));
    const Matrix& out = t.value(build(t, vs));
    return out.cwiseProduct(W).sum();
  };
  {
    Tape t(false);
    std::vector<Var> vs;
    for (const auto& v : leaves) vs.push_back(t.param(v));
    const Matrix& out = t.value(build(t, vs));
    W = testkit::random_matrix(rng, out.rows(), out.cols());
  }
  std::vector<Matrix> grads(leaves.size());
  {
    Tape t(true);
    std::vector<Var> vs;
    for (std::size_t i = 0; i < leaves.size(); ++i) vs.push_back(t.param(leaves[i], &grads[i]));
    t.backward(build(t, vs), W);
  }
  const double h = 1e-6;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    ASSERT_EQ(grads[p].rows(), leaves[p].rows());
    for (Eigen::Index i = 0; i < leaves[p].size(); ++i) {
      auto plus = leaves, minus = leaves;
      plus[p].data()[i] += h;
      minus[p].data()[i] -= h;
      const double fd = (scalar(plus) - scalar(minus)) / (2 * h);
      EXPECT_NEAR(grads[p].data()[i], fd, tol) << "leaf " << p << " entry " << i;
    }
  }
}

Matrix rnd(int r, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return testkit::random_matrix(rng, r, c);
}

}  // namespace

TEST(Autodiff, Matmul) {
  check_gradients({rnd(3, 4, 1), rnd(4, 2, 2)}, [](Tape& t, const auto& v) { return matmul(t, v[0], v[1]); });
}

TEST(Autodiff, MatmulNT) {
  check_gradients({rnd(3, 4, 1), rnd(5, 4, 2)}, [](Tape& t, const auto& v) { return matmul_nt(t, v[0], v[1]); });
}

TEST(Autodiff, AddAndAddRow) {
  check_gradients({rnd(3, 4, 1), rnd(3, 4, 2), rnd(1, 4, 3)}, [](Tape& t, const auto& v) {
    return add_row(t, add(t, v[0], v[1]), v[2]);
  });
}

TEST(Autodiff, ScaleAndGelu) {
  check_gradients({rnd(3, 5, 4)}, [](Tape& t, const auto& v) { return gelu(t, scale(t, v[0], 1.7)); });
}

TEST(Autodiff, LayerNorm) {
  check_gradients({rnd(4, 6, 5), rnd(1, 6, 6), rnd(1, 6, 7)},
                  [](Tape& t, const auto& v) { return layer_norm(t, v[0], v[1], v[2]); });
}

TEST(Autodiff, MaskedSoftmax) {
  Mask m(4, 4);
  m << 1, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1;
  check_gradients({rnd(4, 4, 8)}, [m](Tape& t, const auto& v) { return masked_softmax(t, v[0], &m); });
  check_gradients({rnd(4, 4, 9)}, [](Tape& t, const auto& v) { return masked_softmax(t, v[0], nullptr); });
}

TEST(Autodiff, SlicesAndConcats) {
  check_gradients({rnd(4, 6, 10), rnd(2, 6, 11)}, [](Tape& t, const auto& v) {
    Var a = slice_cols(t, v[0], 1, 3);
    Var b = slice_rows(t, v[0], 2, 2);
    Var c = concat_rows(t, {v[1], b});
    Var d = concat_cols(t, {a, slice_cols(t, v[0], 0, 1)});
    return matmul(t, matmul_nt(t, d, slice_cols(t, c, 0, 4)), c);
  });
}

TEST(Autodiff, MaskedSoftmaxZeroesDisallowed) {
  Mask m(2, 3);
  m << 1, 0, 1, 0, 1, 0;
  Matrix s = rnd(2, 3, 12);
  Matrix p = masked_softmax_value(s, &m);
  EXPECT_EQ(p(0, 1), 0.0);
  EXPECT_EQ(p(1, 0), 0.0);
  EXPECT_EQ(p(1, 2), 0.0);
  EXPECT_DOUBLE_EQ(p(1, 1), 1.0);
  EXPECT_NEAR(p.row(0).sum(), 1.0, 1e-15);
}

TEST(Autodiff, ShapeErrors) {
  Tape t;
  Matrix a = rnd(2, 3, 1), b = rnd(2, 3, 2);
  Var va = t.param(a), vb = t.param(b);
  EXPECT_THROW(matmul(t, va, vb), ShapeError);
  EXPECT_THROW(slice_cols(t, va, 2, 2), ShapeError);
  EXPECT_THROW(t.backward(va, Matrix::Ones(3, 3)), ShapeError);
}
