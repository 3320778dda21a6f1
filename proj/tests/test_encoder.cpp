#include <gtest/gtest.h>

#include <random>

#include "nmid/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace nmid;

namespace {

EncoderConfig tiny(int window = 1, int layers = 1) {
  EncoderConfig c;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.layers = layers;
  c.local_window = window;
  c.image_height = 16;
  c.image_width = 16;
  c.channels = 1;
  c.seed = 3;
  return c;
}

ImageTensor random_image(const EncoderConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  ImageTensor t{c.image_height, c.image_width, c.channels, {}};
  t.values.resize(static_cast<std::size_t>(c.image_height) * c.image_width * c.channels);
  for (auto& v : t.values) v = u(rng);
  return t;
}

// Perturb every parameter so layer norms and biases are not at their init values.
ParameterSet jittered(const EncoderConfig& c, std::uint64_t seed) {
  ParameterSet ps = init_parameters(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& e : ps.entries())
    for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] += n(rng);
  return ps;
}

}  // namespace

TEST(Encoder, ForwardMatchesLoopOracle) {
  for (int layers : {1, 2}) {
    const EncoderConfig c = tiny(1, layers);
    const ParameterSet ps = jittered(c, 17);
    for (std::uint64_t s = 0; s < 3; ++s) {
      const ImageTensor img = random_image(c, s);
      const Vector got = forward(img, ps, c);
      const Vector want = oracle::encoder_forward(img, ps, c, c.local_window);
      EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(Encoder, WideLocalWindowEqualsFullAttention) {
  const EncoderConfig c = tiny(3);  // 4x4 grid, diameter 3
  const ParameterSet ps = jittered(c, 5);
  const ImageTensor img = random_image(c, 9);
  AttentionTrace trace;
  const Vector got = forward(img, ps, c, &trace);
  std::vector<oracle::Mat> full;
  const Vector want = oracle::encoder_forward(img, ps, c, -1, &full);
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9);
  std::size_t h = 0;
  for (const auto& r : trace.records) {
    if (r.stage != "local") continue;
    ASSERT_LT(h, full.size());
    for (Eigen::Index i = 0; i < r.weights.rows(); ++i)
      for (Eigen::Index j = 0; j < r.weights.cols(); ++j) EXPECT_NEAR(r.weights(i, j), full[h][i][j], 1e-9);
    ++h;
  }
  EXPECT_EQ(h, full.size());
}

TEST(Encoder, LocalAttentionRespectsWindow) {
  const EncoderConfig c = tiny(1);
  const ParameterSet ps = jittered(c, 8);
  AttentionTrace trace;
  forward(random_image(c, 1), ps, c, &trace);
  const ad::Mask m = local_window_mask(4, 4, 1);
  int local = 0;
  for (const auto& r : trace.records) {
    for (Eigen::Index i = 0; i < r.weights.rows(); ++i) EXPECT_NEAR(r.weights.row(i).sum(), 1.0, 1e-12);
    if (r.stage != "local") continue;
    ++local;
    for (Eigen::Index i = 0; i < r.weights.rows(); ++i)
      for (Eigen::Index j = 0; j < r.weights.cols(); ++j) {
        if (!m(i, j)) {
          EXPECT_EQ(r.weights(i, j), 0.0);
        } else {
          EXPECT_GT(r.weights(i, j), 0.0);
        }
      }
  }
  EXPECT_EQ(local, c.heads);
}

TEST(Encoder, WindowMaskIsChebyshev) {
  const ad::Mask m = local_window_mask(4, 4, 1);
  EXPECT_TRUE(m(0, 5));   // (0,0)-(1,1)
  EXPECT_FALSE(m(0, 2));  // (0,0)-(0,2)
  EXPECT_FALSE(m(0, 10));
  EXPECT_EQ(local_window_mask(4, 4, 3).count(), 256);
}

TEST(Encoder, GradientsMatchCentralDifferences) {
  const EncoderConfig c = tiny(1);
  ParameterSet ps = jittered(c, 21);
  std::vector<ImageTensor> a{random_image(c, 1), random_image(c, 2)};
  std::vector<ImageTensor> b{random_image(c, 3), random_image(c, 4)};
  const double tau = 0.5;
  LossAndGrads lg = loss_and_gradients(a, b, ps, c, tau, 1);
  auto loss = [&](const ParameterSet& p) {
    Matrix Z(4, c.embed_dim);
    int r = 0;
    for (const auto* set : {&a, &b})
      for (const auto& img : *set) Z.row(r++) = oracle::encoder_forward(img, p, c, c.local_window).transpose();
    return oracle::ntxent(Z, tau);
  };
  EXPECT_NEAR(lg.loss, loss(ps), 1e-10);
  const double eps = 1e-3;
  for (std::size_t t = 0; t < ps.size(); ++t) {
    Matrix& v = ps.entries()[t].value;
    Matrix fd(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double keep = v.data()[i];
      v.data()[i] = keep + eps;
      const double up = loss(ps);
      v.data()[i] = keep - eps;
      const double dn = loss(ps);
      v.data()[i] = keep;
      fd.data()[i] = (up - dn) / (2 * eps);
    }
    const Matrix& g = lg.grads.entries()[t].value;
    // Floor keeps identically-zero gradients (key biases) from dividing noise by noise.
    const double scale = std::max({g.norm(), fd.norm(), 1e-8});
    EXPECT_LE((g - fd).norm() / scale, 1e-4) << ps.entries()[t].name << " |g|=" << g.norm() << " |fd|=" << fd.norm();
    // Softmax is shift invariant per query, so key biases get no gradient.
    if (ps.entries()[t].name.ends_with(".k.bias")) {
      EXPECT_LT(g.norm(), 1e-12);
      EXPECT_LT(fd.norm(), 1e-9);
    }
  }
}

TEST(Encoder, CheckpointRoundTripIsByteIdentical) {
  testkit::TempDir dir;
  const EncoderConfig c = tiny(1, 2);
  const ParameterSet ps = jittered(c, 4);
  const std::string bytes = serialize_checkpoint(ps, c);
  save_checkpoint(ps, c, dir / "a.nmid");
  EXPECT_EQ(read_file(dir / "a.nmid"), bytes);
  Checkpoint ck = load_checkpoint(dir / "a.nmid", c);
  EXPECT_TRUE(ck.params == ps);
  EXPECT_EQ(to_json(ck.config), to_json(c));
  save_checkpoint(ck.params, ck.config, dir / "b.nmid");
  EXPECT_EQ(read_file(dir / "b.nmid"), bytes);
}

TEST(Encoder, CheckpointErrors) {
  testkit::TempDir dir;
  const EncoderConfig c = tiny();
  const std::string bytes = serialize_checkpoint(init_parameters(c), c);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 8)), FormatError);
  EXPECT_THROW(parse_checkpoint("not a checkpoint\n"), FormatError);
  std::string bad = bytes;
  bad.replace(bad.find("NMID-CKPT"), 9, "NMID-XXXX");
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  write_file(dir / "c.nmid", bytes);
  EncoderConfig other = c;
  other.embed_dim = 16;
  other.head_dim = 8;
  EXPECT_THROW(load_checkpoint(dir / "c.nmid", other), ShapeError);
}

TEST(Encoder, TokenizeRasterOrder) {
  EncoderConfig c = tiny();
  ImageTensor img{16, 16, 1, std::vector<double>(256)};
  for (int i = 0; i < 256; ++i) img.values[i] = i;
  PatchSequence s = tokenize(img, c);
  ASSERT_EQ(s.tokens.rows(), 16);
  EXPECT_EQ(s.tokens(1, 0), 4.0);   // patch (0,1) starts at x=4
  EXPECT_EQ(s.tokens(4, 0), 64.0);  // patch (1,0) starts at y=4
  EXPECT_EQ(s.tokens(0, 4), 16.0);  // second pixel row of patch 0
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig c = tiny();
  c.head_dim = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny();
  c.image_height = 18;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny();
  c.local_window = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  ImageTensor rgb{16, 16, 3, std::vector<double>(768)};
  EXPECT_THROW(forward(rgb, init_parameters(tiny()), tiny()), ShapeError);
}

TEST(Encoder, InitIsSeeded) {
  EXPECT_TRUE(init_parameters(tiny()) == init_parameters(tiny()));
  EncoderConfig c = tiny();
  c.seed = 4;
  EXPECT_FALSE(init_parameters(tiny()) == init_parameters(c));
}
