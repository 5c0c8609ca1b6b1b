// chmffn: train, evaluate, ablate and sweep the change-detection network.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "chmffn/checkpoint.hpp"
#include "chmffn/config.hpp"
#include "chmffn/data.hpp"
#include "chmffn/error.hpp"
#include "chmffn/metrics.hpp"
#include "chmffn/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace chmffn;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct SceneArgs {
  std::string t1, t2, gt;
  void add(CLI::App* app) {
    app->add_option("--t1", t1, "T1 cube header (JSON)")->required();
    app->add_option("--t2", t2, "T2 cube header (JSON)")->required();
    app->add_option("--gt", gt, "ground-truth raster header (JSON)")->required();
  }
  BiTemporalScene load() const { return load_scene(t1, t2, gt); }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text << '\n';
}

TrainConfig config_or_default(const std::string& path) {
  return path.empty() ? TrainConfig{} : load_train_config(path);
}

std::string history_json(const TrainHistory& h) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    arr.push_back({{"epoch", e + 1}, {"loss", h.epochs[e].mean_loss}, {"train_oa", h.epochs[e].train_oa}});
  }
  return nlohmann::json{{"epochs", arr}, {"wall_seconds", h.wall_seconds}}.dump(2);
}

void write_eval(const EvalResult& r, const fs::path& out) {
  write_text(out / "report.json", eval_to_json(r));
  write_ppm(render_change_map(r.map), out / "change_map.ppm");
  write_raster(r.prediction, out / "prediction.json");
  std::printf("OA %s  KC %s  Pr %s  Re %s  F1 %s\n", format_percent(r.report.oa).c_str(),
              format_percent(r.report.kc_standard).c_str(), format_percent(r.report.pr).c_str(),
              format_percent(r.report.re).c_str(), format_percent(r.report.f1).c_str());
}

void print_row(const TableRow& row) {
  std::printf("%-12s OA %s  F1 %s\n", row.label.c_str(), format_percent(row.report.oa).c_str(),
              format_percent(row.report.f1).c_str());
  std::fflush(stdout);
}

void write_table(const std::vector<TableRow>& rows, const fs::path& out) {
  write_text(out / "table.json", table_to_json(rows));
  write_text(out / "table.txt", table_to_text(rows));
  std::fputs(table_to_text(rows).c_str(), stdout);
}

int run(int argc, char** argv) {
  CLI::App app{"Hyperspectral change detection: training and evaluation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress per-epoch progress");

  // train
  SceneArgs train_scene;
  std::string train_config, train_out;
  auto* train_cmd = app.add_subcommand("train", "train a model, then evaluate it on the test split");
  train_scene.add(train_cmd);
  train_cmd->add_option("--config", train_config, "training config JSON (defaults if omitted)");
  train_cmd->add_option("--out", train_out, "output directory")->required();

  // eval
  SceneArgs eval_scene;
  std::string eval_ckpt, eval_out;
  std::size_t eval_threads = 0;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split it was trained with");
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_scene.add(eval_cmd);
  eval_cmd->add_option("--threads", eval_threads, "evaluation threads (default: from checkpoint)");
  eval_cmd->add_option("--out", eval_out, "output directory")->required();

  // ablate
  SceneArgs ablate_scene;
  std::string ablate_config, ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate variants A-D and the full model");
  ablate_scene.add(ablate_cmd);
  ablate_cmd->add_option("--config", ablate_config, "training config JSON");
  ablate_cmd->add_option("--out", ablate_out, "output directory")->required();

  // sweep
  SceneArgs sweep_scene;
  std::string sweep_config, sweep_out, sweep_dim;
  std::vector<double> sweep_values;
  auto* sweep_cmd = app.add_subcommand("sweep", "vary one setting: ratio, patch or batch");
  sweep_scene.add(sweep_cmd);
  sweep_cmd->add_option("--config", sweep_config, "training config JSON");
  sweep_cmd->add_option("--dim", sweep_dim, "ratio|patch|batch")->required();
  sweep_cmd->add_option("--values", sweep_values, "values to try")->required();
  sweep_cmd->add_option("--out", sweep_out, "output directory")->required();

  // synth
  std::size_t syn_h = 20, syn_w = 20, syn_b = 8, syn_rects = 2;
  double syn_sigma = 0.01;
  std::uint64_t syn_seed = 0;
  std::string syn_out;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic bi-temporal scene");
  synth_cmd->add_option("--height", syn_h);
  synth_cmd->add_option("--width", syn_w);
  synth_cmd->add_option("--bands", syn_b);
  synth_cmd->add_option("--rects", syn_rects, "number of change rectangles");
  synth_cmd->add_option("--sigma", syn_sigma, "noise standard deviation");
  synth_cmd->add_option("--seed", syn_seed);
  synth_cmd->add_option("--out", syn_out, "output directory")->required();

  // render
  std::string render_pred, render_gt, render_out;
  auto* render_cmd = app.add_subcommand("render", "render a TP/TN/FP/FN change map (PPM)");
  render_cmd->add_option("--pred", render_pred, "prediction raster header")->required();
  render_cmd->add_option("--gt", render_gt, "ground-truth raster header")->required();
  render_cmd->add_option("--out", render_out, "output .ppm file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (*train_cmd) {
    const TrainConfig cfg = config_or_default(train_config);
    const BiTemporalScene scene = train_scene.load();
    fs::create_directories(train_out);
    TrainOptions opts;
    opts.checkpoint_dir = train_out;
    if (!quiet) {
      opts.on_epoch = [](std::size_t e, const EpochStats& s) {
        std::printf("epoch %4zu  loss %.6f  train OA %.4f\n", e + 1, s.mean_loss, s.train_oa);
        std::fflush(stdout);
      };
    }
    const TrainResult res = train(scene, cfg, opts);
    write_text(fs::path(train_out) / "history.json", history_json(res.history));
    write_text(fs::path(train_out) / "config.json", train_config_to_json(res.config));
    write_eval(evaluate(res.model, scene, res.split, res.config), train_out);
  } else if (*eval_cmd) {
    LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
    if (eval_threads > 0) ck.train.eval_threads = eval_threads;
    const BiTemporalScene scene = eval_scene.load();
    const SplitIndex split = stratified_split(scene.gt, ck.train.ratio, ck.train.seed);
    fs::create_directories(eval_out);
    write_eval(evaluate(ck.model, scene, split, ck.train), eval_out);
  } else if (*ablate_cmd) {
    const TrainConfig cfg = config_or_default(ablate_config);
    const BiTemporalScene scene = ablate_scene.load();
    fs::create_directories(ablate_out);
    write_table(ablate(scene, cfg, quiet ? nullptr : print_row), ablate_out);
  } else if (*sweep_cmd) {
    const TrainConfig cfg = config_or_default(sweep_config);
    const SweepDim dim = sweep_dim_from_string(sweep_dim);
    const BiTemporalScene scene = sweep_scene.load();
    fs::create_directories(sweep_out);
    write_table(sweep(scene, cfg, dim, sweep_values, quiet ? nullptr : print_row), sweep_out);
  } else if (*synth_cmd) {
    const SyntheticScene s = synth_scene(syn_h, syn_w, syn_b, syn_rects, syn_sigma, syn_seed);
    const fs::path out(syn_out);
    fs::create_directories(out);
    write_cube(s.scene.t1, out / "t1.json");
    write_cube(s.scene.t2, out / "t2.json");
    write_raster(s.scene.gt, out / "gt.json");
    std::printf("wrote %s/{t1,t2,gt}.json (+ .bin)\n", syn_out.c_str());
  } else if (*render_cmd) {
    const BinaryRaster pred = load_raster(render_pred);
    const BinaryRaster gt = load_raster(render_gt);
    const ChangeMap map = make_change_map(pred, gt);
    write_ppm(render_change_map(map), render_out);
    const ConfusionCounts c = map.counts();
    std::printf("TP %llu  TN %llu  FP %llu  FN %llu\n", static_cast<unsigned long long>(c.tp),
                static_cast<unsigned long long>(c.tn), static_cast<unsigned long long>(c.fp),
                static_cast<unsigned long long>(c.fn));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}
