#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tsd/probe.hpp"
#include "tsd/train.hpp"

namespace fs = std::filesystem;
using namespace tsd;

namespace {

// Class count from DIR/corpus.json, or from the labels when it is missing.
int corpus_classes(const fs::path& dir, std::span<const Scene> scenes) {
  std::ifstream f(dir / "corpus.json");
  if (f) return nlohmann::json::parse(f).at("classes").get<int>();
  int k = 0;
  for (const auto& s : scenes) {
    for (const auto& inst : s.instances) k = std::max(k, inst.label + 1);
  }
  return k;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

void print_report(const EvalReport& r) {
  for (double t : r.thresholds) std::printf("mAP@%.2f %.4f\n", t, r.map_at(t));
  std::printf("mAP@[.5:.95] %.4f\n", r.coco_map);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TSD detection head: synthetic data, training, evaluation and spatial probe"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic shapes corpus");
  fs::path gen_out;
  int n_train = 500, n_val = 100, classes = 3;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Corpus directory")->required();
  gen->add_option("--train", n_train, "Training scenes")->check(CLI::NonNegativeNumber);
  gen->add_option("--val", n_val, "Validation scenes")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "Corpus seed");
  gen->add_option("--classes", classes, "Shape classes")->check(CLI::Range(1, kMaxShapeClasses));

  auto* tr = app.add_subcommand("train", "Train a head on DIR/train");
  fs::path data_dir, ckpt;
  std::string mode = "tsd+pc";
  TrainConfig cfg;
  bool have_decay = false;
  tr->add_option("--data", data_dir, "Corpus directory")->required();
  tr->add_option("--mode", mode, "sibling, tsd or tsd+pc")->check(CLI::IsMember({"sibling", "tsd", "tsd+pc"}));
  tr->add_option("--mc", cfg.pc.m_c, "Classification margin");
  tr->add_option("--mr", cfg.pc.m_r, "Localization margin");
  tr->add_option("--gamma", cfg.head.gamma, "Scale of the translation offset");
  tr->add_option("--epochs", cfg.epochs, "Training epochs");
  tr->add_option("--seed", cfg.seed, "Training seed");
  tr->add_option("--out", ckpt, "Checkpoint directory")->required();
  tr->add_option("--batch", cfg.batch_size, "Images per SGD step");
  tr->add_option("--lr", cfg.base_lr, "Base learning rate");
  tr->add_option("--warmup-lr", cfg.warmup_start_lr, "Learning rate at step 0");
  tr->add_option("--decay", cfg.decay_epochs, "Epochs after which the rate drops tenfold")
      ->each([&](const std::string&) { have_decay = true; });
  tr->add_option("--channels", cfg.backbone_channels, "Backbone width");
  tr->add_option("--hidden", cfg.head.hidden, "Head hidden width");
  tr->add_option("--estimator-hidden", cfg.head.estimator_hidden, "Offset estimator hidden width");
  tr->add_option("--proposals", cfg.proposals_per_image, "Sampled proposals per image");
  tr->add_flag("--flip", cfg.flip, "Random horizontal flips");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on DIR/val");
  fs::path report_path;
  InferConfig icfg;
  ev->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", data_dir, "Corpus directory")->required();
  ev->add_option("--report", report_path, "Output JSON report")->required();
  ev->add_option("--score-threshold", icfg.score_threshold, "Minimum detection score");

  auto* pr = app.add_subcommand("probe", "Spatial sensitivity of one validation instance");
  int scene_index = 0, instance = 0, grid = 21;
  fs::path prefix;
  std::string split = "val";
  pr->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  pr->add_option("--data", data_dir, "Corpus directory")->required();
  pr->add_option("--scene", scene_index, "Scene index")->required();
  pr->add_option("--instance", instance, "Instance index within the scene")->required();
  pr->add_option("--grid", grid, "Odd grid size");
  pr->add_option("--out", prefix, "Output prefix")->required();
  pr->add_option("--split", split, "Corpus split")->check(CLI::IsMember({"train", "val"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto train = generate_scenes(gen_seed, 0, n_train, classes);
      const auto val = generate_scenes(gen_seed, n_train, n_val, classes);
      write_split(gen_out / "train", train);
      write_split(gen_out / "val", val);
      write_json(gen_out / "corpus.json", {{"classes", classes}, {"seed", gen_seed}, {"train", n_train}, {"val", n_val}});
      std::printf("wrote %d train and %d val scenes to %s\n", n_train, n_val, gen_out.c_str());
    } else if (tr->parsed()) {
      const auto scenes = read_split(data_dir / "train");
      cfg.mode = parse_head_mode(mode);
      cfg.head.num_classes = corpus_classes(data_dir, scenes);
      if (!have_decay) cfg.decay_epochs = TrainConfig::default_decay(cfg.epochs);
      const auto start = std::chrono::steady_clock::now();
      train(scenes, cfg, ckpt, [&](const EpochMetrics& m) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("epoch %d lcls %.4f lloc %.4f ldcls %.4f ldloc %.4f mcls %.4f mloc %.4f lr %.5f (%.0fs)\n",
                    m.epoch, m.lcls, m.lloc, m.ldcls, m.ldloc, m.mcls, m.mloc, m.lr, s);
        std::fflush(stdout);
      });
    } else if (ev->parsed()) {
      const Model model = load_model(ckpt);
      const auto scenes = read_split(data_dir / "val");
      const EvalReport report = evaluate_model(model, scenes, icfg);
      auto j = report.to_json();
      j["mode"] = to_string(model.mode);
      j["scenes"] = scenes.size();
      write_json(report_path, j);
      print_report(report);
    } else if (pr->parsed()) {
      const Model model = load_model(ckpt);
      const auto scenes = read_split(data_dir / split);
      if (scene_index < 0 || scene_index >= static_cast<int>(scenes.size())) {
        throw std::out_of_range("probe: scene " + std::to_string(scene_index) + " out of range");
      }
      const ProbeResult result = sensitivity_scan(model, scenes[scene_index], instance, grid);
      const Divergence d = divergence(result.cls_map, result.loc_map);
      auto stats = probe_stats(result, d);
      stats["scene"] = scene_index;
      stats["instance"] = instance;
      stats["mode"] = to_string(model.mode);
      write_probe(prefix, result, stats);
      std::printf("argmax distance %.3f px, rank correlation %.4f\n", d.argmax_distance, d.rank_correlation);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
