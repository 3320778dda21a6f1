#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nmid/chat.hpp"
#include "nmid/common.hpp"

namespace nmid {

// ---------------------------------------------------------------------------
// Prompt corpus
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCotPromptCount = 10;

using CotPromptSet = std::array<std::string, kCotPromptCount>;

inline const CotPromptSet& cot_prompts() {
  static const CotPromptSet prompts = {
      "**Basics** - What type of nanomaterial is depicted in the image? - What is the scale of the image? (e.g., what "
      "does one unit of measurement represent?)",
      "**Morphology and Structure** - What is the general shape or morphology of the nanomaterials in the image? - Are "
      "there distinct layers, phases, or domains visible? - Do the nanomaterials appear uniform in size and shape or "
      "are they varied?",
      "**Size and Distribution** - What is the approximate size or size range of the individual nanostructures? - How "
      "are the nanomaterials distributed throughout the image? (e.g., evenly spaced, clustered, random) - Is there any "
      "evidence of aggregation or bundling?",
      "**Surface Characteristics** - Does the nanomaterial appear smooth, rough, or have any specific textures? - Are "
      "there any visible defects, pores, or impurities on the surface?",
      "**Composition and Elements** - Is there evidence of compositional variations in the image (e.g., different "
      "colors, brightness, or contrasts)? - Are there any labels or markers indicating specific elements or compounds "
      "present?",
      "**Interactions and Boundaries** - How do individual nanostructures interact with one another? (e.g., are they "
      "touching, fused, or separate?) - Are there clear boundaries between different structures or phases?",
      "**External Environment** - Is there any evidence of the nanomaterial interacting with its surrounding "
      "environment or matrix (e.g., solvents, polymers, or other materials)? - Are there other structures or objects "
      "in the image that are not nanomaterials? If so, what are they?",
      "**Image Technique and Modifications** - What imaging technique was used to capture this image? (e.g., SEM, TEM) "
      "- Were there any post-processing or modifications made to the image (e.g., false coloring, 3D rendering)?",
      "**Functional Features** - If applicable, are there any functional features visible (e.g., active sites, regions "
      "with distinct properties)? - Are there dynamic processes captured in the image or is it a static "
      "representation?",
      "**Context and Application** - What is the intended application or use of the nanomaterial being depicted? - Is "
      "this a experimental sample, or a theoretical or simulation-based representation?",
  };
  return prompts;
}

inline const std::array<std::string, kCotPromptCount>& cot_titles() {
  static const std::array<std::string, kCotPromptCount> titles = {
      "Basics",
      "Morphology and Structure",
      "Size and Distribution",
      "Surface Characteristics",
      "Composition and Elements",
      "Interactions and Boundaries",
      "External Environment",
      "Image Technique and Modifications",
      "Functional Features",
      "Context and Application",
  };
  return titles;
}

// 1-based prompt id for a CoT prompt string, if it is one.
inline std::optional<int> cot_prompt_id(std::string_view text) {
  const auto& p = cot_prompts();
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] == text) return static_cast<int>(i + 1);
  return std::nullopt;
}

inline const std::string& synthesis_instruction() {
  static const std::string s =
      "Please generate multiple synthetic images based on the textual information provided below in the form of "
      "question-answer pairs for a given nanomaterial.";
  return s;
}

inline const std::string& fewshot_instruction() {
  static const std::string s =
      "Below are the provided image-label pairs for the nanomaterial identification task. Based on these pairs, "
      "predict the nanomaterial category for the given query image.";
  return s;
}

inline std::string vqa_preamble(const std::optional<std::string>& category_hint) {
  if (category_hint && !category_hint->empty()) {
    return "Please answer the following questions based on the provided input image belonging to the " +
           *category_hint + " nanomaterial category.";
  }
  return "Please answer the following questions based on the provided input image.";
}

// ---------------------------------------------------------------------------
// Transcripts
// ---------------------------------------------------------------------------

struct QaPair {
  int prompt_id = 0;  // 1..10
  std::string question;
  std::string answer;

  friend bool operator==(const QaPair&, const QaPair&) = default;
};

struct VqaTranscript {
  std::string image_id;
  std::vector<QaPair> pairs;
  std::string backend;
  std::string timestamp;

  void validate() const {
    std::set<int> seen;
    for (const auto& p : pairs) {
      if (!seen.insert(p.prompt_id).second) throw ValidationError(cat("duplicate prompt id ", p.prompt_id));
      if (p.answer.empty()) throw ValidationError(cat("empty answer for prompt ", p.prompt_id));
    }
  }

  friend bool operator==(const VqaTranscript&, const VqaTranscript&) = default;
};

// One JSONL record per Q&A pair.
inline std::string transcript_to_jsonl(const VqaTranscript& t) {
  std::string out;
  for (const auto& p : t.pairs) {
    nlohmann::ordered_json j;
    j["image_id"] = t.image_id;
    j["prompt_id"] = p.prompt_id;
    j["question"] = p.question;
    j["answer"] = p.answer;
    j["backend"] = t.backend;
    j["ts"] = t.timestamp;
    out += j.dump();
    out += '\n';
  }
  return out;
}

// Groups consecutive records by image id, preserving order.
inline std::vector<VqaTranscript> transcripts_from_jsonl(std::string_view text) {
  std::vector<VqaTranscript> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto id = j.at("image_id").get<std::string>();
    if (out.empty() || out.back().image_id != id) {
      out.push_back({id, {}, j.at("backend").get<std::string>(), j.at("ts").get<std::string>()});
    }
    out.back().pairs.push_back(
        {j.at("prompt_id").get<int>(), j.at("question").get<std::string>(), j.at("answer").get<std::string>()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Request builders
// ---------------------------------------------------------------------------

/// [preamble, image, prompt].
inline ChatRequest build_vqa_request(const ChatPart& image, const std::string& prompt,
                                     const std::optional<std::string>& category_hint = std::nullopt) {
  if (!image.is_image() || image.bytes.empty()) throw ValidationError("VQA request needs image bytes");
  ChatRequest req;
  req.parts.push_back(ChatPart::make_text(vqa_preamble(category_hint)));
  req.parts.push_back(image);
  req.parts.push_back(ChatPart::make_text(prompt));
  req.validate();
  return req;
}

inline ChatRequest build_vqa_request(const fs::path& image_path, std::string ref, const std::string& prompt,
                                     const std::optional<std::string>& category_hint = std::nullopt) {
  if (!fs::is_regular_file(image_path)) throw IoError(cat("image not found: ", image_path.string()));
  return build_vqa_request(ChatPart::make_image(read_file(image_path), std::move(ref)), prompt, category_hint);
}

inline std::string build_synthesis_prompt(const VqaTranscript& t) {
  if (t.pairs.empty()) throw ValidationError("synthesis prompt needs a non-empty transcript");
  std::vector<const QaPair*> ordered;
  for (const auto& p : t.pairs) ordered.push_back(&p);
  std::stable_sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->prompt_id < b->prompt_id; });
  std::string out = synthesis_instruction();
  for (const QaPair* p : ordered) {
    out += "\n\nQ: ";
    out += p->question;
    out += "\nA: ";
    out += p->answer;
  }
  return out;
}

struct Demonstration {
  ChatPart image;
  std::string label;
};

struct FewShotPrompt {
  std::string instruction;
  std::vector<Demonstration> demonstrations;
  ChatPart query;
  std::vector<std::string> label_set;
};

inline constexpr int kRankedListLength = 5;

inline std::string fewshot_closing(const std::vector<std::string>& label_set) {
  std::string s = "Return a ranked list of up to " + std::to_string(kRankedListLength) +
                  " candidate categories for the query image, best first, one per line, chosen from:";
  for (const auto& l : label_set) s += "\n- " + l;
  return s;
}

inline constexpr std::string_view kLabelPrefix = "Label: ";

/// instruction, (image, "Label: x") per demo, query image, closing request.
inline ChatRequest build_fewshot_prompt(const std::vector<Demonstration>& demos, const ChatPart& query,
                                        const std::vector<std::string>& label_set) {
  if (label_set.empty()) throw ValidationError("few-shot prompt needs a non-empty label set");
  const std::set<std::string> labels(label_set.begin(), label_set.end());
  ChatRequest req;
  req.parts.push_back(ChatPart::make_text(fewshot_instruction()));
  for (const auto& d : demos) {
    if (!labels.count(d.label)) throw ValidationError(cat("demonstration label '", d.label, "' not in label set"));
    if (!d.image.is_image()) throw ValidationError("demonstration without image");
    req.parts.push_back(d.image);
    req.parts.push_back(ChatPart::make_text(std::string(kLabelPrefix) + d.label));
  }
  if (!query.is_image()) throw ValidationError("few-shot query must be an image");
  req.parts.push_back(query);
  req.parts.push_back(ChatPart::make_text(fewshot_closing(label_set)));
  req.validate();
  return req;
}

// Inverse of build_fewshot_prompt.
inline FewShotPrompt parse_fewshot_request(const ChatRequest& req) {
  const auto& parts = req.parts;
  if (parts.size() < 3 || !parts.front().is_text() || !parts.back().is_text()) {
    throw FormatError("not a few-shot request: expected instruction ... query image, closing text");
  }
  FewShotPrompt fp;
  fp.instruction = parts.front().text;
  std::size_t i = 1;
  while (i + 1 < parts.size() - 1) {
    if (!parts[i].is_image() || !parts[i + 1].is_text() || !parts[i + 1].text.starts_with(kLabelPrefix)) break;
    fp.demonstrations.push_back({parts[i], parts[i + 1].text.substr(kLabelPrefix.size())});
    i += 2;
  }
  if (i != parts.size() - 2 || !parts[i].is_image()) throw FormatError("few-shot request: missing query image");
  fp.query = parts[i];
  const std::string& closing = parts.back().text;
  std::size_t pos = 0;
  while ((pos = closing.find("\n- ", pos)) != std::string::npos) {
    pos += 3;
    auto end = closing.find('\n', pos);
    fp.label_set.push_back(closing.substr(pos, end == std::string::npos ? std::string::npos : end - pos));
  }
  if (fp.label_set.empty()) throw FormatError("few-shot request: closing text lists no categories");
  return fp;
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

struct RankedPrediction {
  std::vector<std::string> labels;  // distinct, best first
  std::string raw;
};

class UnparseableResponse : public Error {
 public:
  explicit UnparseableResponse(std::string raw)
      : Error("no known category found in response"), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

namespace detail {
inline std::string lower_ascii(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}
inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }
}  // namespace detail

/// Case-insensitive whole-phrase label matches in order of first occurrence.
/// At each position the longest matching label wins, so a multiword label
/// is never split into a shorter one it contains.
inline RankedPrediction parse_ranked_labels(std::string_view text, const std::vector<std::string>& label_set) {
  RankedPrediction out;
  out.raw = std::string(text);
  std::vector<std::pair<std::string, std::string>> labels;  // (lowercase, original)
  for (const auto& l : label_set)
    if (!l.empty()) labels.emplace_back(detail::lower_ascii(l), l);
  std::stable_sort(labels.begin(), labels.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
  const std::string low = detail::lower_ascii(text);
  std::set<std::string> seen;
  std::size_t i = 0;
  while (i < low.size()) {
    if (i > 0 && detail::is_word_char(low[i - 1])) {
      ++i;
      continue;
    }
    bool matched = false;
    for (const auto& [lc, orig] : labels) {
      if (low.compare(i, lc.size(), lc) != 0) continue;
      const std::size_t end = i + lc.size();
      if (end < low.size() && detail::is_word_char(low[end])) continue;
      if (seen.insert(orig).second) out.labels.push_back(orig);
      i = end;
      matched = true;
      break;
    }
    if (!matched) ++i;
  }
  if (out.labels.empty()) throw UnparseableResponse(out.raw);
  return out;
}

}  // namespace nmid
