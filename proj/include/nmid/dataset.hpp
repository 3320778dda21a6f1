#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "nmid/common.hpp"
#include "nmid/image.hpp"

namespace nmid {

enum class Split { unassigned, train, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    default: return "unassigned";
  }
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw FormatError(cat("unknown split '", s, "'"));
}

struct ManifestRecord {
  std::string id;
  std::string path;
  std::string label;
  Split split = Split::unassigned;
  std::optional<double> hardness;
  std::optional<std::string> provenance;  // review item id for accepted synthetics

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

inline nlohmann::ordered_json to_json(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["path"] = r.path;
  j["label"] = r.label;
  j["split"] = to_string(r.split);
  j["hardness"] = r.hardness ? nlohmann::ordered_json(*r.hardness) : nlohmann::ordered_json(nullptr);
  if (r.provenance) j["provenance"] = *r.provenance;
  return j;
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  r.path = j.at("path").get<std::string>();
  r.label = j.at("label").get<std::string>();
  r.split = parse_split(j.at("split").get<std::string>());
  if (j.contains("hardness") && !j.at("hardness").is_null()) r.hardness = j.at("hardness").get<double>();
  if (j.contains("provenance") && !j.at("provenance").is_null()) r.provenance = j.at("provenance").get<std::string>();
  return r;
}

class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::vector<ManifestRecord> records) : records_(std::move(records)) { validate(); }

  const std::vector<ManifestRecord>& records() const { return records_; }
  std::vector<ManifestRecord>& records() { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  // Sorted, duplicate-free category names.
  std::vector<std::string> labels() const {
    std::set<std::string> s;
    for (const auto& r : records_) s.insert(r.label);
    return {s.begin(), s.end()};
  }

  DatasetManifest filter(Split split) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records_)
      if (r.split == split) out.push_back(r);
    return DatasetManifest(std::move(out));
  }

  const ManifestRecord* find(std::string_view id) const {
    for (const auto& r : records_)
      if (r.id == id) return &r;
    return nullptr;
  }

  void validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& r : records_) {
      if (r.id.empty()) throw ValidationError("manifest record with empty id");
      if (r.label.empty()) throw ValidationError(cat("manifest record ", r.id, " has empty label"));
      if (!seen.insert(r.id).second) throw ValidationError(cat("duplicate manifest id ", r.id));
    }
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records_) {
      out += to_json(r).dump();
      out += '\n';
    }
    return out;
  }

  void save(const fs::path& path) const { write_file_atomic(path, to_jsonl()); }

  static DatasetManifest load(const fs::path& path) {
    std::vector<ManifestRecord> records;
    for (const auto& line : read_lines(path)) {
      try {
        records.push_back(record_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(cat(path.string(), ": bad manifest line: ", e.what()));
      }
    }
    return DatasetManifest(std::move(records));
  }

 private:
  std::vector<ManifestRecord> records_;
};

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

struct LoadResult {
  DatasetManifest manifest;
  std::vector<std::string> warnings;
};

inline bool is_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Scan `<root>/<label>/<image>` into a manifest. Files that fail to decode
/// are skipped and reported in `warnings`; ordering is lexicographic by path.
inline LoadResult load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError(cat("dataset directory not found: ", root.string()));
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw ValidationError(cat("no category subdirectories under ", root.string()));

  LoadResult result;
  std::vector<ManifestRecord> records;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && is_image_extension(e.path())) files.push_back(e.path());
    if (files.empty()) throw ValidationError(cat("empty category directory: ", dir.string()));
    std::sort(files.begin(), files.end());
    const std::string label = dir.filename().string();
    for (const auto& f : files) {
      try {
        (void)read_image(f);
      } catch (const Error& e) {
        result.warnings.push_back(e.what());
        log(LogLevel::warn, "skipping undecodable image ", f.string(), ": ", e.what());
        continue;
      }
      ManifestRecord r;
      r.id = label + "/" + f.stem().string();
      r.path = f.string();
      r.label = label;
      records.push_back(std::move(r));
    }
  }
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  result.manifest = DatasetManifest(std::move(records));
  return result;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

enum class PreprocessMode { mining_zscore, encoder_signed };

struct PreprocessConfig {
  int target_height = 224;
  int target_width = 224;
  PreprocessMode mode = PreprocessMode::mining_zscore;
  // Channel count expected downstream; 0 keeps the source channel count.
  int channels = 0;

  void validate(int patch_size = 0) const {
    if (target_height <= 0 || target_width <= 0) throw ValidationError("preprocess target dims must be positive");
    if (mode == PreprocessMode::encoder_signed && patch_size > 0 &&
        (target_height % patch_size != 0 || target_width % patch_size != 0)) {
      throw ValidationError(
          cat("target dims ", target_height, "x", target_width, " not divisible by patch size ", patch_size));
    }
  }
};

struct FeatureVector {
  std::vector<double> values;
  bool constant = false;  // zero-variance input mapped to all zeros
};

/// Resize, then per-image z-score (population variance) and flatten.
inline FeatureVector preprocess_mining(const RasterImage& img, const PreprocessConfig& cfg) {
  if (cfg.mode != PreprocessMode::mining_zscore) throw ValidationError("preprocess_mining requires mining-zscore mode");
  cfg.validate();
  RasterImage r = resize_bilinear(img, cfg.target_height, cfg.target_width);
  if (cfg.channels > 0) r = to_channels(r, cfg.channels);
  auto px = r.pixels();
  const double n = static_cast<double>(px.size());
  double mean = 0.0;
  for (double v : px) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : px) var += (v - mean) * (v - mean);
  var /= n;
  FeatureVector out;
  out.values.resize(px.size(), 0.0);
  // 8-bit sources cannot produce a legitimate variance this small.
  if (var <= 1e-24) {
    out.constant = true;
    return out;
  }
  const double inv = 1.0 / std::sqrt(var);
  for (std::size_t i = 0; i < px.size(); ++i) out.values[i] = (px[i] - mean) * inv;
  return out;
}

// Encoder input: values in [-1,1], H x W x C row-major interleaved.
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> values;

  double at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double& at(int y, int x, int c) { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

inline ImageTensor preprocess_encoder(const RasterImage& img, const PreprocessConfig& cfg) {
  if (cfg.mode != PreprocessMode::encoder_signed) throw ValidationError("preprocess_encoder requires encoder-signed mode");
  cfg.validate();
  RasterImage r = resize_bilinear(img, cfg.target_height, cfg.target_width);
  if (cfg.channels > 0) r = to_channels(r, cfg.channels);
  ImageTensor t{r.height(), r.width(), r.channels(), {}};
  auto px = r.pixels();
  t.values.resize(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) t.values[i] = 2.0 * px[i] - 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& sem_category_names() {
  static const std::vector<std::string> names = {"biological",        "fibers",         "films",  "MEMS",
                                                 "nanowires",         "particles",      "patterned surface",
                                                 "porous sponges",    "powder",         "tips"};
  return names;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr int kTextureFamilies = 10;

/// Render one grayscale texture of the given family. `base` is the mean
/// brightness; jitter (phase, spacing, noise) comes from `seed`.
inline RasterImage render_texture(int family, int size, double base, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);
  const double amp = 0.12;
  const double phase = unit(rng) * 1.5;                 // pixels
  const double period = 8.0 * (0.97 + 0.06 * unit(rng));  // pixels
  const double cy = size / 2.0 + (unit(rng) - 0.5) * 2.0;
  const double cx = size / 2.0 + (unit(rng) - 0.5) * 2.0;
  const double two_pi = 2.0 * std::numbers::pi;
  RasterImage img(size, size, 1);
  // Speckle draws its own field so the per-pixel noise stream stays aligned.
  std::mt19937_64 speckle_rng(splitmix64(seed));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double fy = y + phase;
      const double fx = x + phase;
      double p = 0.0;
      switch (family % kTextureFamilies) {
        case 0:  // horizontal stripes
          p = std::sin(two_pi * fy / period);
          break;
        case 1: {  // blobs on a coarse lattice
          const double py = std::fmod(fy, 16.0) - 8.0;
          const double px = std::fmod(fx, 16.0) - 8.0;
          p = 2.0 * std::exp(-(py * py + px * px) / 18.0) - 0.5;
          break;
        }
        case 2:  // thin grid lines
          p = (std::fmod(fy, period) < 1.5 || std::fmod(fx, period) < 1.5) ? 1.0 : -0.4;
          break;
        case 3:  // speckle
          p = (std::uniform_real_distribution<double>(-1.0, 1.0)(speckle_rng)) * 0.6;
          break;
        case 4: {  // concentric rings
          const double r = std::hypot(y - cy, x - cx);
          p = std::sin(two_pi * r / period);
          break;
        }
        case 5:  // checkerboard
          p = ((static_cast<int>(std::floor(fy / period)) + static_cast<int>(std::floor(fx / period))) % 2 == 0) ? 1.0
                                                                                                                 : -1.0;
          break;
        case 6:  // diagonal stripes
          p = std::sin(two_pi * (fx + fy) / (period * 1.4142));
          break;
        case 7: {  // dot lattice
          const double py = std::fmod(fy, period) - period / 2;
          const double px = std::fmod(fx, period) - period / 2;
          p = (py * py + px * px < 3.0) ? 2.0 : -0.3;
          break;
        }
        case 8:  // horizontal ramp
          p = 2.0 * (static_cast<double>(x) / (size - 1)) - 1.0 + 0.2 * std::sin(two_pi * fy / (2 * period));
          break;
        default:  // cross-hatch
          p = 0.5 * (std::sin(two_pi * (fx + fy) / period) + std::sin(two_pi * (fx - fy) / period));
          break;
      }
      img.at(y, x, 0) = std::clamp(base + amp * p + noise(rng), 0.0, 1.0);
    }
  }
  return img;
}

struct SyntheticSpec {
  int n_classes = 10;
  int per_class = 20;
  int size = 64;
  std::uint64_t seed = 7;
};

inline std::string synthetic_label(int c, int n_classes) {
  const auto& names = sem_category_names();
  if (n_classes <= static_cast<int>(names.size())) return names[static_cast<std::size_t>(c)];
  return cat("class_", c < 10 ? "0" : "", c);
}

/// Write a procedurally generated grayscale dataset under `out_dir` and
/// return its manifest. Output bytes depend only on the spec.
inline DatasetManifest generate_synthetic_dataset(const SyntheticSpec& spec, const fs::path& out_dir) {
  if (spec.n_classes < 2) throw ValidationError("synthetic dataset needs at least 2 classes");
  if (spec.per_class < 2) throw ValidationError("synthetic dataset needs at least 2 images per class");
  if (spec.size < 8) throw ValidationError("synthetic image size must be at least 8");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError(cat("cannot create output directory ", out_dir.string()));

  std::vector<ManifestRecord> records;
  for (int c = 0; c < spec.n_classes; ++c) {
    const std::string label = synthetic_label(c, spec.n_classes);
    const double base = spec.n_classes == 1 ? 0.5 : 0.15 + 0.6 * c / (spec.n_classes - 1);
    const fs::path dir = out_dir / label;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(cat("cannot create ", dir.string(), ": ", ec.message()));
    for (int i = 0; i < spec.per_class; ++i) {
      const std::uint64_t s = splitmix64(spec.seed ^ splitmix64((static_cast<std::uint64_t>(c) << 32) | i));
      RasterImage img = render_texture(c, spec.size, base, s);
      char name[32];
      std::snprintf(name, sizeof name, "img_%04d", i);
      const fs::path file = dir / (std::string(name) + ".png");
      write_png(file, img);
      ManifestRecord r;
      r.id = label + "/" + name;
      r.path = file.string();
      r.label = label;
      records.push_back(std::move(r));
    }
  }
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return DatasetManifest(std::move(records));
}

}  // namespace nmid
