#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "nmid/dataset.hpp"
#include "nmid/encoder.hpp"
#include "nmid/gateway.hpp"
#include "nmid/index.hpp"
#include "nmid/prompts.hpp"

namespace nmid {

// ---------------------------------------------------------------------------
// mock-vqa
// ---------------------------------------------------------------------------

class MockVqaBackend : public Backend {
 public:
  static constexpr std::size_t kMaxAnswerBytes = 1024;

  std::string id() const override { return "mock-vqa"; }
  bool supports_chat() const override { return true; }

  ChatResponse chat(const ChatRequest& req) override {
    const ChatPart* image = nullptr;
    const ChatPart* prompt = nullptr;
    for (const auto& p : req.parts) {
      if (p.is_image() && !image) image = &p;
      if (p.is_text()) prompt = &p;
    }
    if (!image || !prompt) throw BackendError("mock-vqa: request needs an image and a prompt", false);
    const int pid = cot_prompt_id(prompt->text).value_or(0);
    ChatResponse r;
    r.backend = id();
    r.text = answer(pid, sha256(image->bytes));
    r.usage["prompt_parts"] = static_cast<long>(req.parts.size());
    r.usage["completion_bytes"] = static_cast<long>(r.text.size());
    ++calls_;
    return r;
  }

  long calls() const { return calls_.load(); }

  // Deterministic template fill keyed on (prompt id, image digest).
  static std::string answer(int prompt_id, const Sha256& digest) {
    static const std::array<const char*, 8> shapes = {"elongated wires", "near-spherical particles",
                                                      "layered sheets", "porous networks",
                                                      "faceted crystals", "ribbon-like fibres",
                                                      "regular surface features", "branched tubes"};
    static const std::array<const char*, 4> spreads = {"evenly spaced", "clustered", "random", "aligned"};
    static const std::array<const char*, 4> textures = {"smooth", "rough", "granular", "ridged"};
    static const std::array<const char*, 4> sizes = {"10-50 nm", "50-200 nm", "0.2-1 um", "1-5 um"};
    const std::string tag = to_hex(digest.data(), 16);
    const auto& titles = cot_titles();
    const std::string section =
        prompt_id >= 1 && prompt_id <= static_cast<int>(titles.size()) ? titles[prompt_id - 1] : "General";
    std::string s = cat("[", section, "] The image ", tag, " shows ", shapes[digest[0] % shapes.size()],
                        ", ", spreads[digest[1] % spreads.size()], " across the field of view, with a ",
                        textures[digest[2] % textures.size()], " surface and typical feature size of ",
                        sizes[digest[3] % sizes.size()], ".");
    if (s.size() > kMaxAnswerBytes) s.resize(kMaxAnswerBytes);
    return s;
  }

 private:
  std::atomic<long> calls_{0};
};

// ---------------------------------------------------------------------------
// mock-classifier
// ---------------------------------------------------------------------------

/// Embeds the query, sums cosine similarity per label over the
/// demonstrations, and answers with a ranked list. Labels without
/// demonstrations follow in label-set order.
class MockClassifierBackend : public Backend {
 public:
  MockClassifierBackend(EmbeddingStore store, Checkpoint checkpoint)
      : store_(std::move(store)), ck_(std::move(checkpoint)) {
    salt_ = sha256_hex(store_.serialize() + serialize_checkpoint(ck_.params, ck_.config));
  }

  std::string id() const override { return "mock-classifier"; }
  bool supports_chat() const override { return true; }
  std::string cache_salt() const override { return salt_; }

  ChatResponse chat(const ChatRequest& req) override {
    FewShotPrompt fp;
    try {
      fp = parse_fewshot_request(req);
    } catch (const FormatError& e) {
      throw BackendError(cat("mock-classifier: ", e.what()), false);
    }
    const Embedding q = embed_bytes(fp.query.bytes);
    std::map<std::string, double> score;
    for (const auto& d : fp.demonstrations) score[d.label] += cosine(q, demo_embedding(d.image));
    std::vector<std::string> ranked;
    for (const auto& l : fp.label_set)
      if (score.count(l)) ranked.push_back(l);
    std::stable_sort(ranked.begin(), ranked.end(),
                     [&](const auto& a, const auto& b) { return score.at(a) > score.at(b); });
    for (const auto& l : fp.label_set)
      if (!score.count(l)) ranked.push_back(l);
    ChatResponse r;
    r.backend = id();
    const std::size_t n = std::min<std::size_t>(ranked.size(), kRankedListLength);
    for (std::size_t i = 0; i < n; ++i) r.text += cat(i ? "\n" : "", i + 1, ". ", ranked[i]);
    r.usage["demonstrations"] = static_cast<long>(fp.demonstrations.size());
    return r;
  }

 private:
  Embedding embed_bytes(const std::string& bytes) const {
    return forward(preprocess_encoder(decode_image(bytes), ck_.config.preprocess()), ck_.params, ck_.config);
  }

  Embedding demo_embedding(const ChatPart& image) const {
    if (!image.ref.empty())
      if (auto row = store_.row_of(image.ref)) return store_.row(*row);
    return embed_bytes(image.bytes);
  }

  EmbeddingStore store_;
  Checkpoint ck_;
  std::string salt_;
};

// ---------------------------------------------------------------------------
// mock-imagegen
// ---------------------------------------------------------------------------

class MockImageGenBackend : public Backend {
 public:
  std::string id() const override { return "mock-imagegen"; }
  bool supports_images() const override { return true; }

  std::vector<RasterImage> generate(const ImageGenRequest& req) override {
    req.validate();
    const std::uint64_t h = digest64(req.prompt);
    const int family = static_cast<int>(h % kTextureFamilies);
    const double base = 0.2 + 0.6 * static_cast<double>((h >> 8) % 1000) / 999.0;
    const int side = std::max(req.width, req.height);
    std::vector<RasterImage> out;
    for (int i = 0; i < req.n; ++i) {
      std::string key(16, '\0');
      const std::uint64_t parts[2] = {h ^ req.seed, static_cast<std::uint64_t>(i)};
      std::memcpy(key.data(), parts, sizeof parts);
      RasterImage tex = render_texture(family, side, base, digest64(key));
      out.push_back(side == req.width && side == req.height ? std::move(tex)
                                                            : resample(tex, 0, 0, req.height, req.width,
                                                                       req.height, req.width));
    }
    return out;
  }
};

}  // namespace nmid
