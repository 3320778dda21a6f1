#include <gtest/gtest.h>

#include "nmid/mocks.hpp"
#include "nmid/prompts.hpp"
#include "support.hpp"

using namespace nmid;

namespace {

std::string golden(const std::string& rel) { return read_file(testkit::source_dir() / rel); }

std::string tiny_png(double v) { return encode_png(RasterImage(2, 2, 1, {v, v, v, v})); }

std::string render(const ChatRequest& req) {
  std::string out;
  for (const auto& p : req.parts) {
    if (p.is_text()) {
      out += "[text]\n" + p.text + "\n";
    } else {
      out += "[image " + p.mime + " " + p.ref + "]\n";
    }
  }
  return out;
}

}  // namespace

TEST(Prompts, CotPromptsMatchGoldenFiles) {
  const auto& p = cot_prompts();
  for (std::size_t i = 0; i < p.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "assets/prompts/cot_%02zu.txt", i + 1);
    EXPECT_EQ(p[i], golden(name)) << name;
    EXPECT_EQ(cot_prompt_id(p[i]), static_cast<int>(i + 1));
  }
  EXPECT_FALSE(cot_prompt_id("something else").has_value());
}

TEST(Prompts, InstructionsMatchGoldenFiles) {
  EXPECT_EQ(synthesis_instruction(), golden("assets/prompts/synthesis_instruction.txt"));
  EXPECT_EQ(fewshot_instruction(), golden("assets/prompts/fewshot_instruction.txt"));
  EXPECT_EQ(vqa_preamble(std::string("patterned surface")), golden("assets/prompts/vqa_preamble_hint.txt"));
  EXPECT_EQ(vqa_preamble(std::nullopt), "Please answer the following questions based on the provided input image.");
  EXPECT_EQ(vqa_preamble(std::string()), vqa_preamble(std::nullopt));
}

TEST(Prompts, VqaRequestLayout) {
  const ChatRequest r = build_vqa_request(ChatPart::make_image(tiny_png(0.5), "x/1"), cot_prompts()[2], "fibers");
  ASSERT_EQ(r.parts.size(), 3u);
  EXPECT_EQ(r.parts[0].text, vqa_preamble(std::string("fibers")));
  EXPECT_TRUE(r.parts[1].is_image());
  EXPECT_EQ(r.parts[1].mime, "image/png");
  EXPECT_EQ(r.parts[2].text, cot_prompts()[2]);
  EXPECT_THROW(build_vqa_request(ChatPart::make_text("no"), "q"), ValidationError);
  EXPECT_THROW(build_vqa_request(fs::path("/nonexistent.png"), "r", "q"), IoError);
}

TEST(Prompts, SynthesisPromptMatchesGolden) {
  const auto ts = transcripts_from_jsonl(golden("tests/golden/synthesis_example_transcript.jsonl"));
  ASSERT_EQ(ts.size(), 1u);
  EXPECT_EQ(ts[0].pairs.size(), 10u);
  EXPECT_EQ(build_synthesis_prompt(ts[0]), golden("tests/golden/synthesis_example_prompt.txt"));
  // Pair order in the transcript does not matter.
  VqaTranscript shuffled = ts[0];
  std::reverse(shuffled.pairs.begin(), shuffled.pairs.end());
  EXPECT_EQ(build_synthesis_prompt(shuffled), build_synthesis_prompt(ts[0]));
  EXPECT_THROW(build_synthesis_prompt(VqaTranscript{}), ValidationError);
}

TEST(Prompts, TranscriptJsonlRoundTrip) {
  VqaTranscript t{"a/1", {{1, "q1", "ans1"}, {2, "q2", "ans \"2\"\n"}}, "mock-vqa", "2026-01-01T00:00:00.000Z"};
  VqaTranscript u{"b/2", {{3, "q3", "ans3"}}, "mock-vqa", "2026-01-02T00:00:00.000Z"};
  const auto back = transcripts_from_jsonl(transcript_to_jsonl(t) + transcript_to_jsonl(u));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], t);
  EXPECT_EQ(back[1], u);
  VqaTranscript dup = t;
  dup.pairs[1].prompt_id = 1;
  EXPECT_THROW(dup.validate(), ValidationError);
}

TEST(Prompts, FewShotTwoDemoGolden) {
  std::vector<Demonstration> demos{{ChatPart::make_image(tiny_png(0.1), "demo-a"), "fibers"},
                                   {ChatPart::make_image(tiny_png(0.2), "demo-b"), "porous sponges"}};
  const std::vector<std::string> labels{"fibers", "porous sponges", "powder"};
  const ChatRequest r = build_fewshot_prompt(demos, ChatPart::make_image(tiny_png(0.3), "query"), labels);
  EXPECT_EQ(render(r), golden("tests/golden/fewshot_two_demos.txt"));
  const FewShotPrompt fp = parse_fewshot_request(r);
  EXPECT_EQ(fp.instruction, fewshot_instruction());
  ASSERT_EQ(fp.demonstrations.size(), 2u);
  EXPECT_EQ(fp.demonstrations[1].label, "porous sponges");
  EXPECT_EQ(fp.demonstrations[1].image, demos[1].image);
  EXPECT_EQ(fp.query.ref, "query");
  EXPECT_EQ(fp.label_set, labels);
}

TEST(Prompts, FewShotZeroDemosAndErrors) {
  const ChatPart q = ChatPart::make_image(tiny_png(0.3), "q");
  const ChatRequest r = build_fewshot_prompt({}, q, {"a"});
  EXPECT_EQ(r.parts.size(), 3u);
  EXPECT_TRUE(parse_fewshot_request(r).demonstrations.empty());
  EXPECT_THROW(build_fewshot_prompt({{q, "b"}}, q, {"a"}), ValidationError);
  EXPECT_THROW(build_fewshot_prompt({}, q, {}), ValidationError);
  ChatRequest bad;
  bad.parts = {ChatPart::make_text("x"), ChatPart::make_text("y"), ChatPart::make_text("z")};
  EXPECT_THROW(parse_fewshot_request(bad), FormatError);
}

TEST(Parse, RankedLabels) {
  const std::vector<std::string> labels{"MEMS", "fibers", "porous sponges", "patterned surface", "tips", "films"};
  const auto r = parse_ranked_labels("1. Porous Sponges\n2. fibers\n3. mems\n4. fibers again", labels);
  EXPECT_EQ(r.labels, (std::vector<std::string>{"porous sponges", "fibers", "MEMS"}));
  // Whole words only: "filmstrip" and "tipsy" do not match.
  EXPECT_EQ(parse_ranked_labels("filmstrip tipsy films", labels).labels, (std::vector<std::string>{"films"}));
  EXPECT_EQ(parse_ranked_labels("Answer: patterned surface.", labels).labels,
            (std::vector<std::string>{"patterned surface"}));
  try {
    parse_ranked_labels("I cannot tell.", labels);
    FAIL() << "expected UnparseableResponse";
  } catch (const UnparseableResponse& e) {
    EXPECT_EQ(e.raw(), "I cannot tell.");
  }
}

TEST(Parse, LongestLabelWins) {
  const std::vector<std::string> labels{"surface", "patterned surface"};
  EXPECT_EQ(parse_ranked_labels("patterned surface, surface", labels).labels,
            (std::vector<std::string>{"patterned surface", "surface"}));
}

TEST(MockVqa, DeterministicBoundedAnswers) {
  MockVqaBackend b;
  const ChatRequest r1 = build_vqa_request(ChatPart::make_image(tiny_png(0.1)), cot_prompts()[0]);
  const ChatRequest r2 = build_vqa_request(ChatPart::make_image(tiny_png(0.9)), cot_prompts()[0]);
  const auto a = b.chat(r1).text;
  EXPECT_EQ(a, b.chat(r1).text);
  EXPECT_NE(a, b.chat(r2).text);
  EXPECT_LE(a.size(), MockVqaBackend::kMaxAnswerBytes);
  EXPECT_NE(a.find(to_hex(sha256(tiny_png(0.1)).data(), 16)), std::string::npos);
  EXPECT_EQ(b.calls(), 3);
}

TEST(MockClassifier, RanksByCosineSum) {
  EncoderConfig c;
  c.patch_size = 2;
  c.embed_dim = 4;
  c.heads = 1;
  c.head_dim = 4;
  c.layers = 1;
  c.image_height = 2;
  c.image_width = 2;
  c.channels = 1;
  Checkpoint ck{init_parameters(c), c};
  // Store rows are chosen so the query's similarity order is known.
  const std::string qb = tiny_png(0.5);
  const Vector q = forward(preprocess_encoder(decode_image(qb), c.preprocess()), ck.params, c);
  Vector ortho = Vector::Zero(4);
  ortho(0) = -q(1);
  ortho(1) = q(0);
  Matrix rows(3, 4);
  rows.row(0) = q.transpose();
  rows.row(1) = -q.transpose();
  rows.row(2) = ortho.transpose();
  MockClassifierBackend b(EmbeddingStore({"same", "opposite", "ortho"}, rows), ck);
  std::vector<Demonstration> demos{{ChatPart::make_image(tiny_png(0.0), "opposite"), "c"},
                                   {ChatPart::make_image(tiny_png(0.0), "ortho"), "b"},
                                   {ChatPart::make_image(tiny_png(0.0), "same"), "a"}};
  const ChatRequest req = build_fewshot_prompt(demos, ChatPart::make_image(qb, "query"), {"z", "c", "b", "a", "y"});
  EXPECT_EQ(b.chat(req).text, "1. a\n2. b\n3. c\n4. z\n5. y");
  EXPECT_EQ(b.cache_salt().size(), 64u);
}

TEST(MockImageGen, SeededAndSized) {
  MockImageGenBackend g;
  ImageGenRequest r;
  r.prompt = "porous networks";
  r.n = 2;
  r.width = 32;
  r.height = 16;
  const auto a = g.generate(r);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].width(), 32);
  EXPECT_EQ(a[0].height(), 16);
  EXPECT_FALSE(a[0] == a[1]);
  EXPECT_TRUE(g.generate(r)[1] == a[1]);
  r.seed = 1;
  EXPECT_FALSE(g.generate(r)[0] == a[0]);
}
