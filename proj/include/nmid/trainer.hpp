#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "nmid/encoder.hpp"
#include "nmid/ntxent.hpp"

namespace nmid {

struct AugmentationConfig {
  double crop_min = 0.6;  // side-length fraction of the crop window
  double crop_max = 1.0;
  double flip_prob = 0.5;
  double noise_sigma = 0.02;       // in [0,1] pixel units
  double brightness_delta = 0.1;   // in [0,1] pixel units
  std::uint64_t seed = 0;

  void validate() const {
    if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) {
      throw ValidationError("augmentation crop range must satisfy 0 < min <= max <= 1");
    }
    if (flip_prob < 0.0 || flip_prob > 1.0) throw ValidationError("flip probability must be in [0,1]");
    if (noise_sigma < 0.0 || brightness_delta < 0.0) throw ValidationError("noise and brightness must be >= 0");
  }

  static AugmentationConfig identity() { return {1.0, 1.0, 0.0, 0.0, 0.0, 0}; }
};

struct TrainConfig {
  int epochs = 50;
  double lr = 1e-3;
  int batch_size = 48;
  double temperature = 0.5;
  int patience = 5;
  int lr_halving_patience = 5;
  double val_fraction = 0.1;
  double min_improvement = 1e-4;
  std::uint64_t seed = 0;
  unsigned workers = 0;  // 0 -> hardware concurrency

  void validate() const {
    if (batch_size < 2) throw ValidationError("batch size must be >= 2");
    if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
    if (!(lr > 0.0)) throw ValidationError("learning rate must be > 0");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (patience < 1 || lr_halving_patience < 1) throw ValidationError("patience values must be >= 1");
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw ValidationError("val_fraction must be in [0,1)");
  }
};

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

inline ImageTensor augment_view(const ImageTensor& img, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = cfg.crop_min + (cfg.crop_max - cfg.crop_min) * unit(rng);
  const double ch = s * img.height;
  const double cw = s * img.width;
  const double y0 = (img.height - ch) * unit(rng);
  const double x0 = (img.width - cw) * unit(rng);
  const bool flip = unit(rng) < cfg.flip_prob;
  const double brightness = cfg.brightness_delta * (2.0 * unit(rng) - 1.0);

  RasterImage src(img.height, img.width, img.channels, img.values);
  RasterImage cropped = resample(src, y0, x0, ch, cw, img.height, img.width);
  ImageTensor out{img.height, img.width, img.channels, {}};
  out.values.resize(img.values.size());
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0 ? cfg.noise_sigma : 1.0);
  // Signed tensors span twice the [0,1] pixel range.
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const int sx = flip ? img.width - 1 - x : x;
      for (int c = 0; c < img.channels; ++c) {
        double v = cropped.at(y, sx, c) + 2.0 * brightness;
        if (cfg.noise_sigma > 0) v += 2.0 * noise(rng);
        out.at(y, x, c) = std::clamp(v, -1.0, 1.0);
      }
    }
  }
  return out;
}

inline std::pair<ImageTensor, ImageTensor> augment_two_views(const ImageTensor& img, const AugmentationConfig& cfg,
                                                             std::mt19937_64& rng) {
  cfg.validate();
  ImageTensor a = augment_view(img, cfg, rng);
  ImageTensor b = augment_view(img, cfg, rng);
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

struct LossAndGrads {
  double loss = 0.0;
  ParameterSet grads;
};

/// NT-Xent over first views `a` and second views `b` (paired by index),
/// with exact gradients for every parameter tensor. Per-image gradient
/// contributions are summed in index order, independent of `workers`.
inline LossAndGrads loss_and_gradients(const std::vector<ImageTensor>& a, const std::vector<ImageTensor>& b,
                                       const ParameterSet& params, const EncoderConfig& cfg, double tau,
                                       unsigned workers = 1) {
  if (a.size() != b.size()) throw ShapeError("view lists differ in length");
  const int n = static_cast<int>(a.size());
  if (n < 2) throw ValidationError("NT-Xent needs at least 2 images per batch");
  std::vector<const ImageTensor*> views;
  for (const auto& v : a) views.push_back(&v);
  for (const auto& v : b) views.push_back(&v);

  check_parameters(params, cfg);
  std::vector<Embedding> emb(views.size());
  parallel_for(views.size(), workers, [&](std::size_t i) { emb[i] = forward(*views[i], params, cfg); });
  Matrix Z(static_cast<Eigen::Index>(views.size()), cfg.embed_dim);
  for (std::size_t i = 0; i < emb.size(); ++i) Z.row(static_cast<Eigen::Index>(i)) = emb[i].transpose();

  NtXentResult nx = nt_xent_with_grad(Z, standard_pairing(n), tau);
  if (!std::isfinite(nx.loss)) throw NumericError("non-finite NT-Xent loss");

  LossAndGrads out;
  out.loss = nx.loss;
  out.grads = params.zeros_like();
  // Bounded memory: one chunk of per-image gradient sets at a time.
  const std::size_t chunk = std::max<std::size_t>(1, workers);
  for (std::size_t start = 0; start < views.size(); start += chunk) {
    const std::size_t end = std::min(views.size(), start + chunk);
    std::vector<ParameterSet> local(end - start);
    parallel_for(end - start, workers, [&](std::size_t j) {
      const std::size_t i = start + j;
      local[j] = params.zeros_like();
      EncoderGraph g(params, cfg, &local[j], true);
      ad::Var h = g.embed(*views[i]);
      g.tape().backward(h, nx.grad.row(static_cast<Eigen::Index>(i)));
    });
    for (auto& l : local) out.grads.add_scaled(l, 1.0);
  }
  if (!out.grads.all_finite()) throw NumericError("non-finite gradient");
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  ParameterSet m;
  ParameterSet v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const ParameterSet& p) { return AdamState{p.zeros_like(), p.zeros_like(), 0}; }
};

inline void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state, double lr) {
  if (!params.same_shapes(grads) || !params.same_shapes(state.m) || !params.same_shapes(state.v)) {
    throw ShapeError("adam_step: parameter, gradient and moment shapes differ");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params.entries()[i].value;
    const Matrix& g = grads.entries()[i].value;
    Matrix& m = state.m.entries()[i].value;
    Matrix& v = state.v.entries()[i].value;
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> lr;             // learning rate used during each epoch
  std::vector<int> lr_halved_after;   // epochs (1-based) at whose end lr was halved
  int best_epoch = 0;
  std::string stop_reason;  // "max_epochs" | "early_stop"

  int epochs_run() const { return static_cast<int>(train_loss.size()); }
};

inline nlohmann::ordered_json to_json(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["epochs_run"] = r.epochs_run();
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["lr"] = r.lr;
  j["lr_halved_after"] = r.lr_halved_after;
  j["best_epoch"] = r.best_epoch;
  j["stop_reason"] = r.stop_reason;
  return j;
}

struct TrainHooks {
  // Called with every batch gradient before the optimizer step.
  std::function<void(ParameterSet&)> on_gradients;
  // Receives each progress line.
  std::function<void(const std::string&)> on_log;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainReport report;
};

inline std::string format_progress(int epoch, double train_loss, double val_loss, double lr) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%d train_loss=%.6f val_loss=%.6f lr=%.6g", epoch, train_loss, val_loss, lr);
  return buf;
}

inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, int batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(batch_size));
    if (e - s < 2) break;  // NT-Xent is undefined for fewer than two images
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s), order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return batches;
}

/// Self-supervised training. Validation uses the last `val_fraction` of a
/// seeded shuffle, with augmented views fixed once so epochs are comparable.
/// Returns the parameters of the best validation epoch.
inline TrainResult train(const std::vector<ImageTensor>& images, const EncoderConfig& enc_cfg,
                         const TrainConfig& cfg, const AugmentationConfig& aug, const TrainHooks& hooks = {}) {
  enc_cfg.validate();
  cfg.validate();
  aug.validate();
  if (images.empty()) throw ValidationError("training split is empty");
  const unsigned workers = cfg.workers ? cfg.workers : default_workers();

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::size_t n_val = 0;
  if (cfg.val_fraction > 0.0) {
    n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(images.size())));
    n_val = std::max<std::size_t>(n_val, 2);
  }
  if (n_val + 2 > images.size()) throw ValidationError("not enough images for a train/validation split");
  std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> val_idx(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  if (static_cast<std::size_t>(cfg.batch_size) > train_idx.size()) {
    throw ValidationError(cat("batch size ", cfg.batch_size, " exceeds training images (", train_idx.size(), ")"));
  }

  // Fixed validation views.
  std::mt19937_64 val_rng(splitmix64(cfg.seed ^ 0x76616cULL));
  std::vector<ImageTensor> val_a, val_b;
  for (std::size_t i : val_idx) {
    auto [va, vb] = augment_two_views(images[i], aug, val_rng);
    val_a.push_back(std::move(va));
    val_b.push_back(std::move(vb));
  }

  ParameterSet params = init_parameters(enc_cfg);
  AdamState adam = AdamState::for_params(params);
  std::mt19937_64 aug_rng(splitmix64(cfg.seed ^ aug.seed ^ 0x617567ULL));

  auto validation_loss = [&](const ParameterSet& p) {
    if (val_idx.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<std::size_t> pos(val_idx.size());
    std::iota(pos.begin(), pos.end(), 0);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& batch : make_batches(pos, cfg.batch_size)) {
      std::vector<ImageTensor> a, b;
      for (std::size_t k : batch) {
        a.push_back(val_a[k]);
        b.push_back(val_b[k]);
      }
      std::vector<ImageTensor> all = a;
      all.insert(all.end(), b.begin(), b.end());
      auto emb = forward_batch(all, p, enc_cfg, workers);
      Matrix Z(static_cast<Eigen::Index>(emb.size()), enc_cfg.embed_dim);
      for (std::size_t i = 0; i < emb.size(); ++i) Z.row(static_cast<Eigen::Index>(i)) = emb[i].transpose();
      total += nt_xent(Z, standard_pairing(static_cast<int>(batch.size())), cfg.temperature) *
               static_cast<double>(batch.size());
      count += batch.size();
    }
    return total / static_cast<double>(count);
  };

  TrainResult result;
  TrainReport& report = result.report;
  ParameterSet best = params;
  double best_val = std::numeric_limits<double>::infinity();
  double plateau_ref = std::numeric_limits<double>::infinity();
  double lr = cfg.lr;
  int stale = 0;
  int lr_stale = 0;
  report.stop_reason = "max_epochs";

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (const auto& batch : make_batches(train_idx, cfg.batch_size)) {
      std::vector<ImageTensor> a, b;
      for (std::size_t i : batch) {
        auto [va, vb] = augment_two_views(images[i], aug, aug_rng);
        a.push_back(std::move(va));
        b.push_back(std::move(vb));
      }
      LossAndGrads lg = loss_and_gradients(a, b, params, enc_cfg, cfg.temperature, workers);
      if (hooks.on_gradients) hooks.on_gradients(lg.grads);
      adam_step(params, lg.grads, adam, lr);
      if (!params.all_finite()) throw NumericError(cat("divergent parameters at epoch ", epoch));
      loss_sum += lg.loss;
      ++batches;
    }
    const double train_loss = batches ? loss_sum / batches : std::numeric_limits<double>::quiet_NaN();
    double val_loss = validation_loss(params);
    if (std::isnan(val_loss)) val_loss = train_loss;
    if (!std::isfinite(val_loss)) throw NumericError(cat("divergent validation loss at epoch ", epoch));

    report.train_loss.push_back(train_loss);
    report.val_loss.push_back(val_loss);
    report.lr.push_back(lr);
    const std::string line = format_progress(epoch, train_loss, val_loss, lr);
    if (hooks.on_log) hooks.on_log(line);
    log(LogLevel::info, line);

    // The returned checkpoint tracks the exact minimum; the plateau
    // counters only reset on an improvement of at least min_improvement.
    if (val_loss < best_val) {
      best_val = val_loss;
      best = params;
      report.best_epoch = epoch;
    }
    if (val_loss < plateau_ref - cfg.min_improvement) {
      plateau_ref = val_loss;
      stale = 0;
      lr_stale = 0;
    } else {
      ++stale;
      ++lr_stale;
      if (lr_stale >= cfg.lr_halving_patience) {
        lr *= 0.5;
        lr_stale = 0;
        report.lr_halved_after.push_back(epoch);
      }
      if (stale >= cfg.patience) {
        report.stop_reason = "early_stop";
        break;
      }
    }
  }
  result.checkpoint = Checkpoint{std::move(best), enc_cfg};
  return result;
}

}  // namespace nmid
