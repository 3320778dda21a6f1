#include <gtest/gtest.h>

#include <cmath>

#include "nmid/trainer.hpp"
#include "support.hpp"

using namespace nmid;

namespace {

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.heads = 2;
  c.head_dim = 8;
  c.layers = 1;
  c.local_window = 1;
  c.image_height = 32;
  c.image_width = 32;
  c.channels = 1;
  c.seed = 1;
  return c;
}

std::vector<ImageTensor> synthetic_images(const fs::path& dir, int per_class, const EncoderConfig& enc) {
  DatasetManifest m = generate_synthetic_dataset({8, per_class, 32, 5}, dir);
  std::vector<ImageTensor> out;
  for (const auto& r : m.records()) out.push_back(preprocess_encoder(read_image(r.path), enc.preprocess()));
  return out;
}

}  // namespace

TEST(Adam, MatchesHandComputedSteps) {
  ParameterSet p;
  Matrix w(1, 2);
  w << 1.0, -1.0;
  p.add("w", w);
  ParameterSet g = p.zeros_like();
  AdamState st = AdamState::for_params(p);

  g["w"] << 0.5, -2.0;
  adam_step(p, g, st, 0.1);
  // Step 1: bias-corrected moments equal g and g^2.
  EXPECT_NEAR(p["w"](0, 0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p["w"](0, 1), -1.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);

  g["w"] << 0.25, 1.0;
  const double m0 = 0.9 * 0.1 * 0.5 + 0.1 * 0.25, v0 = 0.999 * 0.001 * 0.25 + 0.001 * 0.0625;
  const double m1 = 0.9 * 0.1 * -2.0 + 0.1 * 1.0, v1 = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
  const double b1 = 1 - 0.81, b2 = 1 - 0.999 * 0.999;
  const double before0 = p["w"](0, 0), before1 = p["w"](0, 1);
  adam_step(p, g, st, 0.1);
  EXPECT_NEAR(p["w"](0, 0), before0 - 0.1 * (m0 / b1) / (std::sqrt(v0 / b2) + 1e-8), 1e-14);
  EXPECT_NEAR(p["w"](0, 1), before1 - 0.1 * (m1 / b1) / (std::sqrt(v1 / b2) + 1e-8), 1e-14);
  EXPECT_EQ(st.step, 2);
}

TEST(Augment, DeterministicAndBounded) {
  EncoderConfig c = small_encoder();
  ImageTensor img{32, 32, 1, std::vector<double>(1024, 0.2)};
  AugmentationConfig aug;
  std::mt19937_64 r1(4), r2(4);
  auto [a1, b1] = augment_two_views(img, aug, r1);
  auto [a2, b2] = augment_two_views(img, aug, r2);
  EXPECT_EQ(a1, a2);
  EXPECT_EQ(b1, b2);
  EXPECT_EQ(a1.height, 32);
  for (double v : a1.values) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  std::mt19937_64 r3(4);
  ImageTensor same = augment_view(img, AugmentationConfig::identity(), r3);
  EXPECT_EQ(same, img);
}

TEST(Train, SmokeRunImprovesValidationLoss) {
  testkit::TempDir dir;
  const EncoderConfig enc = small_encoder();
  const auto imgs = synthetic_images(dir.path(), 8, enc);
  ASSERT_EQ(imgs.size(), 64u);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 16;
  tc.lr = 3e-3;
  tc.val_fraction = 0.25;
  tc.workers = 1;
  std::vector<std::string> lines;
  TrainResult r = train(imgs, enc, tc, AugmentationConfig{}, {nullptr, [&](const std::string& l) { lines.push_back(l); }});
  ASSERT_EQ(r.report.val_loss.size(), 5u);
  const double best = *std::min_element(r.report.val_loss.begin(), r.report.val_loss.end());
  EXPECT_LT(best, r.report.val_loss.front());
  EXPECT_EQ(r.report.val_loss[static_cast<std::size_t>(r.report.best_epoch - 1)], best);
  EXPECT_EQ(lines.size(), 5u);
  EXPECT_NE(lines[0].find("epoch=1 train_loss="), std::string::npos);
  EXPECT_EQ(r.report.stop_reason, "max_epochs");
}

TEST(Train, PlateauHalvesLearningRateAndStopsEarly) {
  testkit::TempDir dir;
  const EncoderConfig enc = small_encoder();
  const auto imgs = synthetic_images(dir.path(), 3, enc);
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  tc.patience = 5;
  tc.lr_halving_patience = 2;
  tc.val_fraction = 0.25;
  tc.workers = 1;
  TrainHooks hooks;
  hooks.on_gradients = [](ParameterSet& g) {
    for (auto& e : g.entries()) e.value.setZero();
  };
  TrainResult r = train(imgs, enc, tc, AugmentationConfig{}, hooks);
  const auto& rep = r.report;
  EXPECT_EQ(rep.stop_reason, "early_stop");
  EXPECT_EQ(rep.epochs_run(), 6);
  EXPECT_EQ(rep.lr_halved_after, (std::vector<int>{3, 5}));
  ASSERT_EQ(rep.lr.size(), 6u);
  EXPECT_EQ(rep.lr[2], 1e-3);
  EXPECT_EQ(rep.lr[3], 5e-4);
  EXPECT_EQ(rep.lr[5], 2.5e-4);
  EXPECT_EQ(rep.best_epoch, 1);
  EXPECT_TRUE(r.checkpoint.params == init_parameters(enc));
}

TEST(Train, DeterministicForSeed) {
  testkit::TempDir dir;
  const EncoderConfig enc = small_encoder();
  const auto imgs = synthetic_images(dir.path(), 3, enc);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.workers = 1;
  TrainResult a = train(imgs, enc, tc, AugmentationConfig{});
  tc.workers = 2;
  TrainResult b = train(imgs, enc, tc, AugmentationConfig{});
  EXPECT_EQ(serialize_checkpoint(a.checkpoint.params, enc), serialize_checkpoint(b.checkpoint.params, enc));
  EXPECT_EQ(a.report.val_loss, b.report.val_loss);
}

TEST(Train, RejectsBadConfig) {
  const EncoderConfig enc = small_encoder();
  std::vector<ImageTensor> imgs(4, ImageTensor{32, 32, 1, std::vector<double>(1024, 0.0)});
  TrainConfig tc;
  tc.batch_size = 1;
  EXPECT_THROW(train(imgs, enc, tc, {}), ValidationError);
  tc = TrainConfig{};
  tc.batch_size = 64;
  EXPECT_THROW(train(imgs, enc, tc, {}), ValidationError);
  EXPECT_THROW(train({}, enc, TrainConfig{}, {}), ValidationError);
}
