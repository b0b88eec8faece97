// msl: seeded, file-driven experiments for masked-supervision training of
// multi-label image recognizers.
//
// Subcommands: gen-dataset, gen-masks, train, eval, robustness, metrics.
// Every leaf of the JSON config can be overridden with --section.key=value;
// each run directory receives the fully-resolved config.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "msl/config.hpp"
#include "msl/data.hpp"
#include "msl/evaluation.hpp"
#include "msl/masking.hpp"
#include "msl/metrics.hpp"
#include "msl/model.hpp"
#include "msl/training.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct CommonArgs {
  std::string config_file;
  bool force = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("-c,--config", args->config_file, "JSON config file");
  cmd->add_flag("--force", args->force,
                "allow writing into an existing run directory");
  cmd->allow_extras();
}

msl::RunConfig build_config(CLI::App* cmd, const CommonArgs& args) {
  msl::RunConfig cfg;
  if (!args.config_file.empty()) cfg.merge_file(args.config_file);
  for (const std::string& extra : cmd->remaining()) {
    if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos)
      throw msl::ConfigError("unrecognized argument: " + extra +
                             " (overrides look like --section.key=value)");
    cfg.apply_override(extra.substr(2));
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void echo_config(const msl::RunConfig& cfg, const fs::path& dir) {
  write_text(dir / "resolved.json", cfg.resolved() + "\n");
}

int strata_count(const msl::DatasetManifest& m, bool small) {
  int n = 0;
  for (size_t i = 0; i < m.records.size(); ++i)
    n += small ? m.has_small_object(i) : m.has_occluded_object(i);
  return n;
}

// --------------------------------------------------------------------------

int cmd_gen_dataset(CLI::App* cmd, const CommonArgs& args) {
  msl::RunConfig cfg = build_config(cmd, args);
  const int n_train = cfg.dataset_n_train();
  const int n_test = cfg.dataset_n_test();
  if (n_train < 1)
    throw msl::ConfigError("dataset.n_train must be >= 1");
  if (n_test < 0) throw msl::ConfigError("dataset.n_test must be >= 0");

  const fs::path dir = msl::resolve_run_dir(cfg.get_string("dataset.out"));
  msl::prepare_run_dir(dir, args.force);

  msl::DatasetGenParams params = cfg.dataset_params();
  params.n = n_train;
  const msl::DatasetManifest train = msl::generate_dataset(params, dir, "train");
  msl::save_manifest(train, dir / "train.jsonl");
  params.n = n_test;
  const msl::DatasetManifest test = msl::generate_dataset(params, dir, "test");
  msl::save_manifest(test, dir / "test.jsonl");
  echo_config(cfg, dir);

  std::printf("dataset %s\n", dir.string().c_str());
  std::printf("  train: %zu images, K=%d, small=%d, occluded=%d\n",
              train.records.size(), train.k, strata_count(train, true),
              strata_count(train, false));
  std::printf("  test:  %zu images, K=%d, small=%d, occluded=%d\n",
              test.records.size(), test.k, strata_count(test, true),
              strata_count(test, false));
  return kExitOk;
}

int cmd_gen_masks(CLI::App* cmd, const CommonArgs& args) {
  msl::RunConfig cfg = build_config(cmd, args);
  const fs::path dir = msl::resolve_run_dir(cfg.get_string("masks.out"));
  msl::prepare_run_dir(dir, args.force);

  const msl::MaskSubsets subsets = msl::build_subsets(
      cfg.masks_count_per_subset(), cfg.masks_height(), cfg.masks_width(),
      cfg.mask_gen_params(), cfg.masks_seed());
  msl::save_mask_subsets(subsets, dir);
  echo_config(cfg, dir);

  double high_p = 0.0, low_p = 0.0;
  for (const auto& m : subsets.high) high_p += m.p;
  for (const auto& m : subsets.low) low_p += m.p;
  std::printf("masks %s\n", dir.string().c_str());
  std::printf("  high: %zu masks, mean p=%.1f%%\n", subsets.high.size(),
              subsets.high.empty() ? 0.0 : high_p / subsets.high.size());
  std::printf("  low:  %zu masks, mean p=%.1f%%\n", subsets.low.size(),
              subsets.low.empty() ? 0.0 : low_p / subsets.low.size());
  return kExitOk;
}

int cmd_train(CLI::App* cmd, const CommonArgs& args) {
  msl::RunConfig cfg = build_config(cmd, args);
  const fs::path dir = msl::resolve_run_dir(cfg.get_string("train.out"));
  msl::prepare_run_dir(dir, args.force);

  const fs::path data_dir =
      msl::resolve_run_dir(cfg.get_string("train.dataset_dir"));
  const msl::DatasetManifest train_manifest =
      msl::load_manifest(data_dir / "train.jsonl");
  const msl::DatasetManifest test_manifest =
      msl::load_manifest(data_dir / "test.jsonl");
  const std::vector<msl::Tensor> train_images = msl::load_images(train_manifest);
  const std::vector<msl::Tensor> test_images = msl::load_images(test_manifest);

  const msl::ArchDescriptor arch = cfg.arch();
  if (arch.num_classes != train_manifest.k)
    throw msl::ConfigError("model.k=" + std::to_string(arch.num_classes) +
                           " does not match dataset K=" +
                           std::to_string(train_manifest.k));

  const msl::TrainConfig tc = cfg.train_config();
  msl::MaskSubsets subsets;
  const msl::MaskSubsets* subsets_ptr = nullptr;
  if (tc.masking != msl::MaskingMode::none) {
    subsets = msl::load_mask_subsets(
        msl::resolve_run_dir(cfg.get_string("train.masks_dir")), arch.input_h,
        arch.input_w);
    subsets_ptr = &subsets;
  }

  msl::TrainData data;
  data.train_manifest = &train_manifest;
  data.train_images = &train_images;
  data.test_manifest = &test_manifest;
  data.test_images = &test_images;

  const msl::TrainResult result =
      msl::train(arch, tc, data, subsets_ptr, /*verbose=*/true);

  echo_config(cfg, dir);
  write_text(dir / "log.csv", result.log_csv());
  msl::save_checkpoint(result.best, dir / "best.ckpt");
  msl::save_checkpoint(result.final, dir / "final.ckpt");
  {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\n  \"best_epoch\": %d,\n  \"best_map\": %.17g,\n"
                  "  \"epochs_run\": %zu,\n  \"diverged\": %s,\n"
                  "  \"diverged_epoch\": %d\n}\n",
                  result.best_epoch, result.best_map, result.log.size(),
                  result.diverged ? "true" : "false", result.diverged_epoch);
    write_text(dir / "summary.json", buf);
  }
  std::printf("train %s: best mAP %.4f at epoch %d (%zu epochs run)\n",
              dir.string().c_str(), result.best_map, result.best_epoch,
              result.log.size());
  if (result.diverged) {
    std::fprintf(stderr,
                 "training diverged at epoch %d; last good checkpoint kept\n",
                 result.diverged_epoch);
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_eval(CLI::App* cmd, const CommonArgs& args, bool robustness) {
  msl::RunConfig cfg = build_config(cmd, args);
  const fs::path dir = msl::resolve_run_dir(cfg.get_string("eval.out"));
  msl::prepare_run_dir(dir, args.force);

  const fs::path data_dir =
      msl::resolve_run_dir(cfg.get_string("eval.dataset_dir"));
  const std::string split = cfg.get_string("eval.split");
  if (split != "train" && split != "test")
    throw msl::ConfigError("eval.split must be train|test");
  const msl::DatasetManifest manifest =
      msl::load_manifest(data_dir / (split + ".jsonl"));
  const std::vector<msl::Tensor> images = msl::load_images(manifest);
  const msl::ArchDescriptor arch = cfg.arch();

  if (!robustness) {
    const std::string ckpt = cfg.get_string("eval.checkpoint");
    if (ckpt.empty()) throw msl::ConfigError("eval.checkpoint is required");
    const msl::ModelParams params = msl::load_checkpoint(ckpt, arch);
    const std::string stem = fs::path(ckpt).stem().string();

    const msl::ScoredPredictions sp =
        msl::score_predictions(params, manifest, images);
    const msl::MetricsReport report = msl::stratified_report(sp, manifest);
    echo_config(cfg, dir);
    write_text(dir / ("report_" + stem + "_clean.json"),
               report.to_json() + "\n");
    msl::save_predictions(sp, dir / ("predictions_" + stem + "_clean.jsonl"));
    msl::save_per_class_csv(report, manifest.class_names, sp,
                            dir / ("per_class_" + stem + "_clean.csv"));
    std::printf("eval %s: mAP %.4f OF1 %.4f (report in %s)\n", stem.c_str(),
                report.map, report.prf.of1, dir.string().c_str());
    return kExitOk;
  }

  // robustness: one or more checkpoints, clean + masked side by side
  std::vector<std::string> paths;
  {
    const std::string single = cfg.get_string("eval.checkpoint");
    nlohmann::json doc = nlohmann::json::parse(cfg.resolved());
    for (const auto& p : doc.at("eval").at("checkpoints"))
      paths.push_back(p.get<std::string>());
    if (!single.empty()) paths.insert(paths.begin(), single);
  }
  if (paths.empty())
    throw msl::ConfigError("robustness needs eval.checkpoint or eval.checkpoints");

  std::vector<msl::ModelParams> loaded;
  std::vector<msl::NamedModel> models;
  loaded.reserve(paths.size());
  for (const auto& p : paths) {
    loaded.push_back(msl::load_checkpoint(p, arch));
    // disambiguate identical stems (e.g. several runs' best.ckpt)
    std::string name = fs::path(p).stem().string();
    const std::string parent = fs::path(p).parent_path().filename().string();
    if (!parent.empty()) name = parent + "/" + name;
    models.push_back({name, &loaded.back()});
  }

  const std::vector<std::string> modes = [&] {
    nlohmann::json doc = nlohmann::json::parse(cfg.resolved());
    return doc.at("eval").at("modes").get<std::vector<std::string>>();
  }();
  const msl::MaskSubsetTag tag = cfg.eval_mask_subset() == "high"
                                     ? msl::MaskSubsetTag::high
                                     : msl::MaskSubsetTag::low;

  msl::MaskSubsets subsets;
  const msl::MaskSubsets* subsets_ptr = nullptr;
  if (std::find(modes.begin(), modes.end(), "masked") != modes.end()) {
    subsets = msl::load_mask_subsets(
        msl::resolve_run_dir(cfg.get_string("eval.masks_dir")), arch.input_h,
        arch.input_w);
    subsets_ptr = &subsets;
  }

  const msl::RobustnessReport report = msl::compare(
      models, manifest, images, modes, subsets_ptr, tag, cfg.eval_seeds());
  echo_config(cfg, dir);
  write_text(dir / ("report_robustness_" + cfg.eval_mask_subset() + ".json"),
             report.to_json() + "\n");
  write_text(dir / "plot_data.csv", report.plot_csv());
  for (const auto& entry : report.entries)
    std::printf("%-24s %-6s mAP %.4f\n", entry.model.c_str(),
                entry.mode.c_str(), entry.report.map);
  return kExitOk;
}

int cmd_metrics(const std::string& predictions_file, const std::string& out,
                bool force) {
  const msl::ScoredPredictions sp = msl::load_predictions(predictions_file);
  const msl::MetricsReport report = msl::compute_metrics(sp);
  if (!out.empty()) {
    const fs::path dir = msl::resolve_run_dir(out);
    msl::prepare_run_dir(dir, force);
    write_text(dir / "report.json", report.to_json() + "\n");
    msl::save_per_class_csv(report, {}, sp, dir / "per_class.csv");
  }
  std::printf("%s\n", report.to_json().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-supervision training and evaluation workbench"};
  app.require_subcommand(1);

  CommonArgs gen_dataset_args, gen_masks_args, train_args, eval_args,
      robustness_args;
  CLI::App* gen_dataset =
      app.add_subcommand("gen-dataset", "render a synthetic multi-label dataset");
  add_common(gen_dataset, &gen_dataset_args);
  CLI::App* gen_masks =
      app.add_subcommand("gen-masks", "build the high/low mask subsets");
  add_common(gen_masks, &gen_masks_args);
  CLI::App* train = app.add_subcommand("train", "run a training experiment");
  add_common(train, &train_args);
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  add_common(eval, &eval_args);
  CLI::App* robustness = app.add_subcommand(
      "robustness", "clean vs masked comparison across checkpoints");
  add_common(robustness, &robustness_args);

  std::string predictions_file, metrics_out;
  bool metrics_force = false;
  CLI::App* metrics =
      app.add_subcommand("metrics", "score a dumped predictions file");
  metrics->add_option("predictions", predictions_file, "JSON-lines predictions")
      ->required();
  metrics->add_option("-o,--out", metrics_out, "optional output directory");
  metrics->add_flag("--force", metrics_force,
                    "allow writing into an existing directory");

  try {
    app.parse(argc, argv);
    if (gen_dataset->parsed()) return cmd_gen_dataset(gen_dataset, gen_dataset_args);
    if (gen_masks->parsed()) return cmd_gen_masks(gen_masks, gen_masks_args);
    if (train->parsed()) return cmd_train(train, train_args);
    if (eval->parsed()) return cmd_eval(eval, eval_args, false);
    if (robustness->parsed()) return cmd_eval(robustness, robustness_args, true);
    if (metrics->parsed())
      return cmd_metrics(predictions_file, metrics_out, metrics_force);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  } catch (const msl::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}
