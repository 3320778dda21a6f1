#include <gtest/gtest.h>

#include <cstdio>
#include <sys/wait.h>

#include "nmid/pipeline.hpp"
#include "support.hpp"

using namespace nmid;

namespace {

constexpr const char* kSmallConfig = R"(log_level = "warn"
[dataset.synthetic]
n_classes = 3
per_class = 10
size = 32
seed = 3
[encoder]
patch_size = 8
embed_dim = 8
layers = 1
heads = 2
head_dim = 4
local_window = 1
image_height = 32
image_width = 32
channels = 1
[train]
epochs = 2
batch_size = 8
val_fraction = 0.2
[mining]
height = 16
width = 16
clusters = 3
max_components = 10
test_fraction = 0.2
[retrieval]
k = 3
[synthesize]
images_per_item = 1
width = 16
height = 16
[gateway]
rate_per_s = 1000.0
burst = 100.0
)";

struct CliResult {
  int status = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = cat("'", NMID_CLI_PATH, "' ", args, " 2>&1");
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t c = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++c;
  return c;
}

class PipelineCli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testkit::TempDir("nmid-pipe");
    write_file(config(), kSmallConfig);
    first_ = new CliResult(run_cli(cat("run-all -c '", config().string(), "' -o '", out().string(), "'")));
  }
  static void TearDownTestSuite() {
    delete first_;
    delete dir_;
  }
  static fs::path config() { return *dir_ / "small.toml"; }
  static fs::path out() { return *dir_ / "out"; }
  static std::string common() { return cat("-c '", config().string(), "' -o '", out().string(), "' "); }

  static testkit::TempDir* dir_;
  static CliResult* first_;
};

testkit::TempDir* PipelineCli::dir_ = nullptr;
CliResult* PipelineCli::first_ = nullptr;

}  // namespace

TEST_F(PipelineCli, RunAllProducesEveryArtifact) {
  ASSERT_EQ(first_->status, 0) << first_->output;
  const ArtifactPaths p{out()};
  for (const auto& f : {p.gen_manifest(), p.prepared_manifest(), p.mined_manifest(), p.hardness(), p.checkpoint(),
                        p.train_report(), p.store(), p.transcripts(), p.synthesis(), p.review_log(), p.predictions(),
                        p.report_json(), p.report_dir() / "report.csv", p.report_dir() / "confusion.csv"})
    EXPECT_TRUE(fs::is_regular_file(f)) << f;
  EXPECT_NE(first_->output.find("evaluate: top1="), std::string::npos);
  const auto report = report_from_json(nlohmann::json::parse(read_file(p.report_json())));
  EXPECT_EQ(report.n_records, 6);
  EXPECT_LE(report.top_n.at(1), report.top_n.at(2));
  EXPECT_LE(report.top_n.at(3), report.top_n.at(5));
  // One described image per class, each queued once for review.
  EXPECT_EQ(ReviewQueue(p.review_dir()).list(ReviewStatus::pending).size(), 3u);
}

TEST_F(PipelineCli, RerunSkipsUpToDateStages) {
  ASSERT_EQ(first_->status, 0) << first_->output;
  const CliResult again = run_cli("run-all " + common());
  ASSERT_EQ(again.status, 0) << again.output;
  EXPECT_EQ(count(again.output, "skipped (up to date)"), 9u) << again.output;
  const CliResult forced = run_cli("evaluate -f " + common());
  EXPECT_EQ(forced.status, 0);
  EXPECT_EQ(count(forced.output, "skipped (up to date)"), 0u);
}

TEST_F(PipelineCli, ClassifyIsDeterministic) {
  ASSERT_EQ(first_->status, 0) << first_->output;
  const fs::path a = *dir_ / "a.jsonl", b = *dir_ / "b.jsonl";
  ASSERT_EQ(run_cli(cat("classify ", common(), "--output '", a.string(), "'")).status, 0);
  ASSERT_EQ(run_cli(cat("classify -f ", common(), "--output '", b.string(), "'")).status, 0);
  EXPECT_EQ(read_file(a), read_file(b));
  const fs::path r1 = *dir_ / "r1.jsonl", r2 = *dir_ / "r2.jsonl";
  ASSERT_EQ(run_cli(cat("classify ", common(), "--sampler random --k 2 --seed 4 --output '", r1.string(), "'")).status, 0);
  ASSERT_EQ(run_cli(cat("classify -f ", common(), "--sampler random --k 2 --seed 4 --output '", r2.string(), "'")).status, 0);
  EXPECT_EQ(read_file(r1), read_file(r2));
}

TEST_F(PipelineCli, AcceptedSyntheticsJoinTheIndex) {
  ASSERT_EQ(first_->status, 0) << first_->output;
  const ArtifactPaths p{out()};
  const std::size_t before = EmbeddingStore::load(p.store()).size();
  {
    ReviewQueue q(p.review_dir());
    q.decide(q.list(ReviewStatus::pending).front().id, Verdict::accept, "ok");
  }
  const CliResult r = run_cli("embed " + common());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(count(r.output, "skipped (up to date)"), 0u) << r.output;
  const EmbeddingStore after = EmbeddingStore::load(p.store());
  EXPECT_EQ(after.size(), before + 1);
  EXPECT_EQ(after.ids().back().rfind("synthetic/", 0), 0u);
}

TEST(PipelineErrors, EvaluateNamesMissingPredictions) {
  testkit::TempDir dir;
  const CliResult r = run_cli(cat("evaluate -o '", (dir / "out").string(), "'"));
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("predictions.jsonl"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("evaluate"), std::string::npos) << r.output;
}

TEST(PipelineErrors, BadConfigIsReported) {
  testkit::TempDir dir;
  write_file(dir / "bad.toml", "[encoder]\nlayerz = 1\n");
  CliResult r = run_cli(cat("prepare -c '", (dir / "bad.toml").string(), "'"));
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("unknown config key 'encoder.layerz'"), std::string::npos) << r.output;
  r = run_cli(cat("prepare -o '", (dir / "out").string(), "' --set dataset.root=\\\"", (dir / "nowhere").string(), "\\\""));
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("nowhere"), std::string::npos) << r.output;
}

TEST(PipelineLibrary, MissingUpstreamArtifactsAreListed) {
  testkit::TempDir dir;
  PipelineConfig c = load_config({}, {cat("out_dir=\"", (dir / "o").string(), "\"")});
  Pipeline p(c);
  try {
    p.classify();
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "classify");
    EXPECT_NE(std::string(e.what()).find("store.nmidx"), std::string::npos) << e.what();
  }
}
