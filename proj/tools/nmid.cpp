#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "nmid/pipeline.hpp"

namespace {

nmid::LogLevel parse_level(const std::string& s) {
  if (s == "debug") return nmid::LogLevel::debug;
  if (s == "info") return nmid::LogLevel::info;
  if (s == "warn") return nmid::LogLevel::warn;
  if (s == "error") return nmid::LogLevel::error;
  if (s == "off") return nmid::LogLevel::off;
  throw nmid::ValidationError("log_level must be debug|info|warn|error|off");
}

void print(const nmid::StageOutcome& o) {
  std::cout << o.stage << ": " << (o.skipped ? "skipped (up to date)" : o.summary) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nmid: micrograph embedding, mining, few-shot classification and curation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool force = false;
  app.add_option("-c,--config", config_path, "pipeline config file (TOML)");
  app.add_option("-s,--set", overrides, "override a config key, e.g. --set train.epochs=3")->take_all();
  app.add_option("-o,--out", out_dir, "output directory (overrides out_dir)");
  app.add_flag("-f,--force", force, "ignore digest stamps and recompute");

  auto* gen = app.add_subcommand("gen-data", "write the seeded synthetic dataset");
  auto* prepare = app.add_subcommand("prepare", "scan the dataset root into a manifest");
  auto* mine = app.add_subcommand("mine", "hard-example mining and train/test split");
  auto* train = app.add_subcommand("train", "self-supervised encoder training");
  auto* embed = app.add_subcommand("embed", "embed the training set into the index");
  auto* describe = app.add_subcommand("describe", "zero-shot chain-of-thought descriptions");
  auto* synth = app.add_subcommand("synthesize", "synthetic images from descriptions, queued for review");
  auto* serve = app.add_subcommand("review-serve", "serve the curation HTTP API");
  auto* classify = app.add_subcommand("classify", "few-shot classification of the test split");
  auto* evaluate = app.add_subcommand("evaluate", "score predictions and write reports");
  auto* run_all = app.add_subcommand("run-all", "run every stage in order");

  std::string sampler;
  int k = -1;
  long long seed = -1;
  std::string predictions_out;
  classify->add_option("--sampler", sampler, "demonstration sampler")->check(CLI::IsMember({"similarity", "random"}));
  classify->add_option("--k", k, "number of demonstrations")->check(CLI::NonNegativeNumber);
  classify->add_option("--seed", seed, "random sampler seed")->check(CLI::NonNegativeNumber);
  classify->add_option("--output", predictions_out, "predictions file (default <out>/classify/predictions.jsonl)");

  std::string predictions_in;
  evaluate->add_option("--predictions", predictions_in, "predictions file (default <out>/classify/predictions.jsonl)");

  std::string host;
  int port = -1;
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "bind port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!out_dir.empty()) overrides.push_back("out_dir=\"" + out_dir + "\"");
    if (!host.empty()) overrides.push_back("review.host=\"" + host + "\"");
    if (port >= 0) overrides.push_back("review.port=" + std::to_string(port));
    nmid::PipelineConfig cfg;
    try {
      cfg = nmid::load_config(config_path, overrides);
      nmid::log_level() = parse_level(cfg.log_level);
    } catch (const nmid::Error& e) {
      throw nmid::StageError("config", e.what());
    }
    nmid::Pipeline p(cfg);
    p.force = force;

    if (*gen) print(p.gen_data());
    if (*prepare) print(p.prepare());
    if (*mine) print(p.mine());
    if (*train) print(p.train());
    if (*embed) print(p.embed());
    if (*describe) print(p.describe());
    if (*synth) print(p.synthesize());
    if (*serve) p.review_serve();
    if (*classify) {
      nmid::ClassifyOptions o;
      if (!sampler.empty()) o.sampler = sampler;
      if (k >= 0) o.k = k;
      if (seed >= 0) o.seed = static_cast<std::uint64_t>(seed);
      o.output = predictions_out;
      print(p.classify(o));
    }
    if (*evaluate) print(p.evaluate(predictions_in));
    if (*run_all) {
      for (const auto& o : p.run_all()) print(o);
      std::cout << "report: " << p.paths().report_json().string() << "\n";
    }
  } catch (const nmid::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
