#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nmid/config.hpp"
#include "nmid/curation.hpp"
#include "nmid/curation_server.hpp"
#include "nmid/dataset.hpp"
#include "nmid/encoder.hpp"
#include "nmid/eval.hpp"
#include "nmid/gateway.hpp"
#include "nmid/index.hpp"
#include "nmid/miner.hpp"
#include "nmid/mocks.hpp"
#include "nmid/prompts.hpp"
#include "nmid/trainer.hpp"

namespace nmid {

class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& msg)
      : Error(cat("stage '", stage, "' failed: ", msg)), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct StageOutcome {
  std::string stage;
  bool skipped = false;
  std::vector<fs::path> artifacts;
  std::string summary;
};

struct ClassifyOptions {
  std::optional<std::string> sampler;
  std::optional<int> k;
  std::optional<std::uint64_t> seed;
  fs::path output;  // empty -> <out>/classify/predictions.jsonl
};

/// Artifact locations under <out>/<stage>/.
struct ArtifactPaths {
  fs::path out;

  fs::path gen_manifest() const { return out / "gen-data" / "manifest.jsonl"; }
  fs::path prepared_manifest() const { return out / "prepare" / "manifest.jsonl"; }
  fs::path dataset_digest() const { return out / "prepare" / "dataset.sha256"; }
  fs::path mined_manifest() const { return out / "mine" / "manifest.jsonl"; }
  fs::path hardness() const { return out / "mine" / "hardness.jsonl"; }
  fs::path mining_summary() const { return out / "mine" / "mining.json"; }
  fs::path checkpoint() const { return out / "train" / "checkpoint.nmid"; }
  fs::path train_report() const { return out / "train" / "report.json"; }
  fs::path train_log() const { return out / "train" / "train.log"; }
  fs::path store() const { return out / "embed" / "store.nmidx"; }
  fs::path index_manifest() const { return out / "embed" / "manifest.jsonl"; }
  fs::path transcripts() const { return out / "describe" / "transcripts.jsonl"; }
  fs::path synthesis() const { return out / "synthesize" / "synthesis.jsonl"; }
  fs::path review_dir() const { return out / "review"; }
  fs::path review_log() const { return review_dir() / kCurationLogName; }
  fs::path predictions() const { return out / "classify" / "predictions.jsonl"; }
  fs::path report_dir() const { return out / "evaluate"; }
  fs::path report_json() const { return report_dir() / "report.json"; }
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)), paths_{cfg_.out_dir} {
    cfg_.validate();
    workers_ = cfg_.workers > 0 ? static_cast<unsigned>(cfg_.workers) : default_workers();
  }

  const PipelineConfig& config() const { return cfg_; }
  const ArtifactPaths& paths() const { return paths_; }
  bool force = false;  // ignore digest stamps

  // Created on first use with the mock backends and, when NMID_BACKEND_URL
  // is set, the HTTP backend registered.
  Gateway& gateway() {
    if (!gateway_) {
      GatewayPolicy p = cfg_.gateway;
      p.cache_dir = cfg_.cache_dir();
      gateway_ = std::make_unique<Gateway>(p);
      gateway_->register_backend(std::make_shared<MockVqaBackend>());
      gateway_->register_backend(std::make_shared<MockImageGenBackend>());
      if (std::getenv("NMID_BACKEND_URL")) gateway_->register_backend(HttpBackend::from_env("gpt4v-like", p.timeout_s));
    }
    return *gateway_;
  }

  // -------------------------------------------------------------------------
  // Stages
  // -------------------------------------------------------------------------

  StageOutcome gen_data() {
    const auto& s = cfg_.synthetic;
    nlohmann::ordered_json params{{"n_classes", s.n_classes}, {"per_class", s.per_class}, {"size", s.size},
                                  {"seed", s.seed}};
    return run_stage("gen-data", params, {}, {paths_.gen_manifest()}, [&](StageOutcome& o) {
      const fs::path images = paths_.out / "gen-data" / "images";
      const auto m = generate_synthetic_dataset({s.n_classes, s.per_class, s.size, s.seed}, images);
      m.save(paths_.gen_manifest());
      o.summary = cat(m.size(), " images in ", m.labels().size(), " classes under ", images.string());
    });
  }

  StageOutcome prepare() {
    const fs::path root = cfg_.resolved_dataset_root();
    if (!fs::is_directory(root)) throw StageError("prepare", cat("missing required artifact(s): ", root.string()));
    const std::string content = directory_digest(root);
    nlohmann::ordered_json params{{"root", root.string()}, {"content", content}};
    return run_stage("prepare", params, {}, {paths_.prepared_manifest(), paths_.dataset_digest()},
                     [&](StageOutcome& o) {
                       LoadResult lr = load_dataset(root);
                       lr.manifest.save(paths_.prepared_manifest());
                       write_file_atomic(paths_.dataset_digest(), content + "\n");
                       std::string warn;
                       for (const auto& w : lr.warnings) warn += w + "\n";
                       write_file_atomic(paths_.out / "prepare" / "warnings.txt", warn);
                       o.summary = cat(lr.manifest.size(), " images, ", lr.manifest.labels().size(), " classes, ",
                                       lr.warnings.size(), " skipped");
                     });
  }

  StageOutcome mine() {
    const auto& m = cfg_.mining;
    nlohmann::ordered_json params{{"height", m.target_height}, {"width", m.target_width},
                                  {"clusters", m.clusters},    {"variance_target", m.variance_target},
                                  {"max_components", m.max_components}, {"test_fraction", m.test_fraction},
                                  {"seed", m.seed},            {"max_iters", m.max_iters},
                                  {"tol", m.tol}};
    return run_stage("mine", params, {paths_.prepared_manifest(), paths_.dataset_digest()},
                     {paths_.mined_manifest(), paths_.hardness(), paths_.mining_summary()}, [&](StageOutcome& o) {
                       const auto manifest = DatasetManifest::load(paths_.prepared_manifest());
                       MiningResult r = nmid::mine(manifest, m);
                       r.manifest.save(paths_.mined_manifest());
                       std::string lines;
                       for (const auto& e : r.report) lines += to_json(e).dump() + "\n";
                       write_file_atomic(paths_.hardness(), lines);
                       nlohmann::ordered_json summary;
                       summary["n_components"] = r.n_components;
                       summary["explained_variance"] = r.explained_variance;
                       summary["clusters"] = r.clusters.centroids.rows();
                       summary["kmeans_iterations"] = r.clusters.iterations;
                       summary["kmeans_converged"] = r.clusters.converged;
                       summary["inertia"] = r.clusters.inertia;
                       summary["flags"] = r.flags;
                       summary["test_images"] = r.manifest.filter(Split::test).size();
                       write_file_atomic(paths_.mining_summary(), summary.dump(2) + "\n");
                       o.summary = cat(r.n_components, " PCA components, ", summary["test_images"].get<long>(),
                                       " test images");
                     });
  }

  StageOutcome train() {
    nlohmann::ordered_json params;
    params["encoder"] = to_json(cfg_.encoder);
    const auto& t = cfg_.train;
    params["train"] = {{"epochs", t.epochs},       {"lr", t.lr},
                       {"batch_size", t.batch_size}, {"temperature", t.temperature},
                       {"patience", t.patience},   {"lr_halving_patience", t.lr_halving_patience},
                       {"val_fraction", t.val_fraction}, {"min_improvement", t.min_improvement},
                       {"seed", t.seed}};
    const auto& a = cfg_.augment;
    params["augment"] = {{"crop_min", a.crop_min},       {"crop_max", a.crop_max},
                         {"flip_prob", a.flip_prob},     {"noise_sigma", a.noise_sigma},
                         {"brightness_delta", a.brightness_delta}, {"seed", a.seed}};
    return run_stage("train", params, {paths_.mined_manifest(), paths_.dataset_digest()},
                     {paths_.checkpoint(), paths_.train_report()}, [&](StageOutcome& o) {
                       const auto manifest = DatasetManifest::load(paths_.mined_manifest()).filter(Split::train);
                       const auto pre = cfg_.encoder.preprocess();
                       std::vector<ImageTensor> images(manifest.size());
                       parallel_for(manifest.size(), workers_, [&](std::size_t i) {
                         images[i] = preprocess_encoder(read_image(manifest.records()[i].path), pre);
                       });
                       TrainConfig tc = cfg_.train;
                       tc.workers = workers_;
                       std::string log_text;
                       TrainHooks hooks;
                       hooks.on_log = [&](const std::string& line) {
                         log_text += line + "\n";
                       };
                       TrainResult r = nmid::train(images, cfg_.encoder, tc, cfg_.augment, hooks);
                       save_checkpoint(r.checkpoint.params, r.checkpoint.config, paths_.checkpoint());
                       write_file_atomic(paths_.train_report(), to_json(r.report).dump(2) + "\n");
                       write_file_atomic(paths_.train_log(), log_text);
                       o.summary = cat(r.report.epochs_run(), " epochs, best epoch ", r.report.best_epoch,
                                       " val_loss=", r.report.val_loss.empty() ? 0.0
                                                                               : r.report.val_loss[r.report.best_epoch - 1]);
                     });
  }

  StageOutcome embed() {
    nlohmann::ordered_json params{{"metric", to_string(cfg_.retrieval.metric)}};
    std::vector<fs::path> inputs{paths_.mined_manifest(), paths_.checkpoint(), paths_.dataset_digest()};
    if (fs::is_regular_file(paths_.review_log())) inputs.push_back(paths_.review_log());
    return run_stage("embed", params, inputs, {paths_.store(), paths_.index_manifest()}, [&](StageOutcome& o) {
      const auto mined = DatasetManifest::load(paths_.mined_manifest());
      DatasetManifest indexed = mined.filter(Split::train);
      if (fs::is_regular_file(paths_.review_log())) {
        ReviewQueue queue(paths_.review_dir());
        indexed = build_augmented_manifest(mined, queue);
      }
      const Checkpoint ck = load_checkpoint(paths_.checkpoint(), cfg_.encoder);
      IndexBuild ib = build_index(indexed, ck, cfg_.retrieval.metric, workers_);
      ib.store.save(paths_.store());
      indexed.save(paths_.index_manifest());
      o.summary = cat(ib.store.size(), " embeddings of dim ", ib.store.dim(), ", ", ib.warnings.size(), " skipped");
    });
  }

  StageOutcome describe() {
    nlohmann::ordered_json params{{"backend", cfg_.backends.vqa},
                                  {"per_class", cfg_.describe.per_class},
                                  {"category_hint", cfg_.describe.category_hint}};
    return run_stage("describe", params, {paths_.mined_manifest(), paths_.dataset_digest()}, {paths_.transcripts()},
                     [&](StageOutcome& o) {
                       const auto train = DatasetManifest::load(paths_.mined_manifest()).filter(Split::train);
                       std::map<std::string, int> taken;
                       std::vector<const ManifestRecord*> chosen;
                       for (const auto& r : train.records())
                         if (taken[r.label]++ < cfg_.describe.per_class) chosen.push_back(&r);
                       Gateway& gw = gateway();
                       std::vector<VqaTranscript> transcripts(chosen.size());
                       parallel_for(chosen.size(), static_cast<unsigned>(cfg_.gateway.max_concurrency),
                                    [&](std::size_t i) {
                                      transcripts[i] = describe_image(gw, *chosen[i]);
                                    });
                       std::string out;
                       for (const auto& t : transcripts) out += transcript_to_jsonl(t);
                       write_file_atomic(paths_.transcripts(), out);
                       o.summary = cat(transcripts.size(), " transcripts via ", cfg_.backends.vqa);
                     });
  }

  StageOutcome synthesize() {
    const auto& s = cfg_.synthesize;
    nlohmann::ordered_json params{
        {"backend", cfg_.backends.imagegen}, {"n", s.images_per_item}, {"width", s.width}, {"height", s.height}};
    return run_stage("synthesize", params, {paths_.transcripts(), paths_.mined_manifest()}, {paths_.synthesis()},
                     [&](StageOutcome& o) {
                       const auto mined = DatasetManifest::load(paths_.mined_manifest());
                       const auto transcripts = transcripts_from_jsonl(read_file(paths_.transcripts()));
                       ReviewQueue queue(paths_.review_dir());
                       Gateway& gw = gateway();
                       std::string out;
                       int enqueued = 0;
                       for (const auto& t : transcripts) {
                         const ManifestRecord* src = mined.find(t.image_id);
                         if (!src) throw ValidationError(cat("transcript for unknown image ", t.image_id));
                         ImageGenRequest req{build_synthesis_prompt(t), s.images_per_item, s.width, s.height, 0};
                         const ImageGenResult res = gw.generate_images(cfg_.backends.imagegen, req);
                         ReviewItem item;
                         item.source_id = src->id;
                         item.source_path = src->path;
                         item.label = src->label;
                         item.transcript = t;
                         nlohmann::ordered_json rec;
                         rec["image_id"] = src->id;
                         rec["label"] = src->label;
                         rec["images"] = nlohmann::ordered_json::array();
                         for (const auto& ref : res.images) {
                           item.synthetics.push_back({ref.digest, ref.path.string()});
                           rec["images"].push_back({{"digest", ref.digest}, {"path", ref.path.string()}});
                         }
                         bool created = false;
                         rec["review_id"] = queue.enqueue(std::move(item), &created);
                         enqueued += created ? 1 : 0;
                         out += rec.dump() + "\n";
                       }
                       write_file_atomic(paths_.synthesis(), out);
                       o.summary = cat(transcripts.size(), " items, ", enqueued, " newly queued for review");
                     });
  }

  /// Blocks serving the curation API until the process is stopped.
  void review_serve() {
    ReviewQueue queue(paths_.review_dir());
    CurationServerOptions opts;
    opts.host = cfg_.review.host;
    opts.port = cfg_.review.port;
    opts.bearer_token = cfg_.review.token;
    opts.ui_dir = cfg_.review.ui_dir;
    opts.train_manifest = paths_.mined_manifest();
    CurationServer server(queue, opts);
    try {
      server.serve();
    } catch (const Error& e) {
      throw StageError("review-serve", e.what());
    }
  }

  StageOutcome classify(const ClassifyOptions& opt = {}) {
    const std::string sampler = opt.sampler.value_or(cfg_.retrieval.sampler);
    const int k = opt.k.value_or(cfg_.retrieval.k);
    const std::uint64_t seed = opt.seed.value_or(cfg_.retrieval.seed);
    if (sampler != "similarity" && sampler != "random")
      throw StageError("classify", cat("unknown sampler '", sampler, "' (expected similarity|random)"));
    if (k < 0) throw StageError("classify", "k must be >= 0");
    const fs::path output = opt.output.empty() ? paths_.predictions() : opt.output;
    nlohmann::ordered_json params{{"backend", cfg_.backends.classifier},
                                  {"sampler", sampler},
                                  {"k", k},
                                  {"seed", sampler == "random" ? seed : 0},
                                  {"metric", to_string(cfg_.retrieval.metric)},
                                  {"output", output.string()}};
    return run_stage(
        "classify", params,
        {paths_.mined_manifest(), paths_.store(), paths_.index_manifest(), paths_.checkpoint(), paths_.dataset_digest()},
        {output},
        [&](StageOutcome& o) {
          const auto mined = DatasetManifest::load(paths_.mined_manifest());
          const auto test = mined.filter(Split::test);
          if (test.empty()) throw ValidationError("test split is empty");
          const auto indexed = DatasetManifest::load(paths_.index_manifest());
          const EmbeddingStore store = EmbeddingStore::load(paths_.store());
          const Checkpoint ck = load_checkpoint(paths_.checkpoint(), cfg_.encoder);
          const auto label_set = mined.labels();
          Gateway& gw = gateway();
          if (cfg_.backends.classifier == "mock-classifier")
            gw.register_backend(std::make_shared<MockClassifierBackend>(store, ck));
          std::vector<PredictionRecord> preds(test.size());
          parallel_for(test.size(), workers_, [&](std::size_t i) {
            const auto& rec = test.records()[i];
            const Embedding q = forward(load_encoder_input(rec.path, ck.config), ck.params, ck.config);
            const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), store.size());
            const NeighborList picks =
                sampler == "similarity"
                    ? top_k_similar(store, q, kk, cfg_.retrieval.metric)
                    : sample_random(store, kk, splitmix64(seed ^ digest64(rec.id)));
            std::vector<Demonstration> demos;
            for (const auto& n : picks) {
              const ManifestRecord* d = indexed.find(n.id);
              if (!d) throw ValidationError(cat("index entry ", n.id, " missing from index manifest"));
              demos.push_back({ChatPart::make_image(read_file(d->path), d->id), d->label});
            }
            const ChatRequest req =
                build_fewshot_prompt(demos, ChatPart::make_image(read_file(rec.path), rec.id), label_set);
            const ChatResponse resp = gw.send_chat(cfg_.backends.classifier, req);
            PredictionRecord pr{rec.id, rec.label, {}, resp.text};
            try {
              pr.predicted = parse_ranked_labels(resp.text, label_set).labels;
            } catch (const UnparseableResponse&) {
              log(LogLevel::warn, "classify: unparseable response for ", rec.id);
            }
            preds[i] = std::move(pr);
          });
          write_file_atomic(output, predictions_to_jsonl(preds));
          o.summary = cat(preds.size(), " predictions (sampler=", sampler, ", k=", k, ") top1=",
                          top_n_accuracy(preds, 1));
        });
  }

  StageOutcome evaluate(const fs::path& predictions = {}) {
    const fs::path input = predictions.empty() ? paths_.predictions() : predictions;
    nlohmann::ordered_json params{{"predictions", input.string()}};
    return run_stage("evaluate", params, {input, paths_.mined_manifest()},
                     {paths_.report_json(), paths_.report_dir() / "report.csv", paths_.report_dir() / "confusion.csv"},
                     [&](StageOutcome& o) {
                       const auto label_set = DatasetManifest::load(paths_.mined_manifest()).labels();
                       const auto report = nmid::evaluate(load_predictions(input), label_set);
                       emit_report(report, paths_.report_dir());
                       o.summary = cat("top1=", report.top_n.at(1), " top2=", report.top_n.at(2),
                                       " top3=", report.top_n.at(3), " top5=", report.top_n.at(5));
                     });
  }

  std::vector<StageOutcome> run_all() {
    std::vector<StageOutcome> out;
    if (cfg_.dataset_root.empty()) {
      if (!cfg_.synthetic.enabled)
        throw StageError("gen-data", "dataset.root is unset and synthetic generation is disabled");
      out.push_back(gen_data());
    }
    out.push_back(prepare());
    out.push_back(mine());
    out.push_back(train());
    out.push_back(describe());
    out.push_back(synthesize());
    out.push_back(embed());
    out.push_back(classify());
    out.push_back(evaluate());
    return out;
  }

  // Combined digest of every regular file under `root` (relative path and
  // content), in path order.
  static std::string directory_digest(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) acc += fs::relative(f, root).generic_string() + "\t" + sha256_hex(read_file(f)) + "\n";
    return sha256_hex(acc);
  }

 private:
  VqaTranscript describe_image(Gateway& gw, const ManifestRecord& rec) {
    VqaTranscript t;
    t.image_id = rec.id;
    t.backend = cfg_.backends.vqa;
    t.timestamp = utc_timestamp();
    const ChatPart image = ChatPart::make_image(read_file(rec.path), rec.id);
    const std::optional<std::string> hint =
        cfg_.describe.category_hint ? std::optional<std::string>(rec.label) : std::nullopt;
    const auto& prompts = cot_prompts();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const ChatResponse r = gw.send_chat(cfg_.backends.vqa, build_vqa_request(image, prompts[i], hint));
      t.pairs.push_back({static_cast<int>(i + 1), prompts[i], r.text});
    }
    return t;
  }

  template <typename Fn>
  StageOutcome run_stage(const std::string& name, const nlohmann::ordered_json& params,
                         const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs, Fn&& body) {
    StageOutcome o;
    o.stage = name;
    o.artifacts = outputs;
    try {
      std::vector<std::string> missing;
      for (const auto& p : inputs)
        if (!fs::is_regular_file(p)) missing.push_back(p.string());
      if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw ValidationError(cat("missing required artifact(s): ", list));
      }
      std::string acc = name + "\n" + params.dump() + "\n";
      for (const auto& p : inputs) acc += p.string() + "\t" + sha256_hex(read_file(p)) + "\n";
      const std::string stamp = sha256_hex(acc);
      fs::path stamp_path = outputs.front();
      stamp_path += ".stamp";
      bool fresh = !force && fs::is_regular_file(stamp_path) && read_file(stamp_path) == stamp;
      for (const auto& p : outputs) fresh = fresh && fs::exists(p);
      if (fresh) {
        o.skipped = true;
        o.summary = "up to date";
        log(LogLevel::info, name, ": up to date, skipped");
        return o;
      }
      log(LogLevel::info, name, ": running");
      const auto t0 = std::chrono::steady_clock::now();
      std::error_code ec;
      fs::remove(stamp_path, ec);
      body(o);
      write_file_atomic(stamp_path, stamp);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log(LogLevel::info, name, ": ", o.summary, " (", secs, " s)");
      return o;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  }

  PipelineConfig cfg_;
  ArtifactPaths paths_;
  unsigned workers_ = 1;
  std::unique_ptr<Gateway> gateway_;
};

}  // namespace nmid
