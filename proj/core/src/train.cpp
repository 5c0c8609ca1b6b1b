#include "chmffn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "chmffn/checkpoint.hpp"
#include "chmffn/error.hpp"
#include "chmffn/rng.hpp"
#include "chmffn/tape.hpp"
#include "json.hpp"

namespace chmffn {

using nlohmann::json;

void sgd_step(std::span<Tensor> params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) throw NumericError("sgd_step: parameter has no gradient");
  }
  for (auto& p : params) {
    auto w = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    p.zero_grad();
  }
}

TrainConfig resolve_config(const TrainConfig& cfg, const BiTemporalScene& scene) {
  cfg.validate();
  TrainConfig out = cfg;
  out.model.bands = scene.bands();
  out.model.patch = cfg.patch;
  out.model.seed = cfg.seed;
  out.model.validate();
  return out;
}

BiTemporalScene prepare_scene(const BiTemporalScene& scene, const TrainConfig& cfg) {
  scene.validate();
  if (!cfg.normalize) return scene;
  return {normalize_bands(scene.t1), normalize_bands(scene.t2), scene.gt};
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch) {
  if (batch == 0) throw ConfigError("batch must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> b;
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) b.push_back(i);
    out.push_back(std::move(b));
  }
  if (out.size() >= 2 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

namespace {

std::vector<Coord> pick(const std::vector<Coord>& coords, const std::vector<std::size_t>& order,
                        const std::vector<std::size_t>& idx) {
  std::vector<Coord> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(coords[order[i]]);
  return out;
}

void write_epoch_checkpoint(const TrainOptions& opt, const ChmffnModel& model,
                            const TrainConfig& cfg, const std::string& name) {
  if (opt.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(opt.checkpoint_dir);
  save_checkpoint(model, cfg, opt.checkpoint_dir / name);
}

}  // namespace

TrainResult train(const BiTemporalScene& scene, const TrainConfig& cfg_in,
                  const TrainOptions& options) {
  const TrainConfig cfg = resolve_config(cfg_in, scene);
  const BiTemporalScene prepared = prepare_scene(scene, cfg);
  SplitIndex split = stratified_split(prepared.gt, cfg.ratio, cfg.seed);
  if (split.train.size() < 2) throw DataError("training split needs at least two pixels");

  ChmffnModel model(cfg.model);
  std::vector<Tensor> params = model.parameters();
  TrainHistory history;
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::size_t> order(split.train.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.seed + e);
    rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    const auto batches = make_batches(order.size(), cfg.batch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto coords = pick(split.train, order, batches[bi]);
      const PatchBatch batch = make_batch(prepared, coords, cfg.patch);

      Tape tape;
      double loss_value = 0.0;
      {
        TapeScope scope(tape);
        const Tensor probs = model.forward_pair(batch.p1, batch.p2, nn::Mode::train);
        const Tensor loss = bce_loss(probs, batch.labels);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(e) + ", batch " +
                             std::to_string(bi));
        }
        for (std::size_t i = 0; i < batch.labels.size(); ++i) {
          const int pred = probs.at({i, 1}) > probs.at({i, 0}) ? 1 : 0;
          correct += pred == batch.labels[i];
        }
        tape.backward(loss);
      }
      sgd_step(params, cfg.lr);
      loss_sum += loss_value * static_cast<double>(coords.size());
    }

    const EpochStats stats{loss_sum / static_cast<double>(order.size()),
                           static_cast<double>(correct) / static_cast<double>(order.size())};
    history.epochs.push_back(stats);
    if (options.on_epoch) options.on_epoch(e, stats);
    if (cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0) {
      write_epoch_checkpoint(options, model, cfg, "epoch_" + std::to_string(e + 1) + ".ckpt");
    }
  }
  history.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_epoch_checkpoint(options, model, cfg, "model.ckpt");
  return {std::move(model), std::move(history), std::move(split), cfg};
}

std::vector<std::uint8_t> predict(const ChmffnModel& model, const BiTemporalScene& prepared,
                                  std::span<const Coord> coords, std::size_t threads) {
  // Fixed chunking keeps the result independent of the thread count.
  constexpr std::size_t kChunk = 128;
  const std::size_t patch = model.config().patch;
  const std::size_t n_chunks = (coords.size() + kChunk - 1) / kChunk;
  std::vector<std::uint8_t> out(coords.size(), 0);

  auto run_chunk = [&](std::size_t c) {
    NoGradGuard no_grad;
    const std::size_t begin = c * kChunk;
    const std::size_t end = std::min(coords.size(), begin + kChunk);
    const PatchBatch batch = make_batch(prepared, coords.subspan(begin, end - begin), patch);
    const Tensor probs = model.forward_pair(batch.p1, batch.p2, nn::Mode::eval);
    for (std::size_t i = begin; i < end; ++i) {
      out[i] = probs.at({i - begin, 1}) > probs.at({i - begin, 0}) ? 1 : 0;
    }
  };

  threads = std::max<std::size_t>(1, std::min(threads, n_chunks));
  if (threads == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t c = t; c < n_chunks; c += threads) run_chunk(c);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

EvalResult evaluate(const ChmffnModel& model, const BiTemporalScene& scene, const SplitIndex& split,
                    const TrainConfig& cfg) {
  const BiTemporalScene prepared = prepare_scene(scene, cfg);
  if (model.config().bands != prepared.bands()) {
    throw DataError("model expects " + std::to_string(model.config().bands) +
                    " bands, scene has " + std::to_string(prepared.bands()));
  }
  std::vector<Coord> all;
  all.reserve(prepared.height() * prepared.width());
  for (std::size_t r = 0; r < prepared.height(); ++r) {
    for (std::size_t c = 0; c < prepared.width(); ++c) all.push_back({r, c});
  }
  const auto labels = predict(model, prepared, all, cfg.eval_threads);

  EvalResult res;
  res.prediction = BinaryRaster(prepared.height(), prepared.width());
  res.prediction.values.assign(labels.begin(), labels.end());
  res.map = make_change_map(res.prediction, prepared.gt);
  res.train_counts = confusion(res.prediction, prepared.gt, split.train);
  res.train_pixels = split.train.size();
  res.test_pixels = split.test.size();
  res.report = compute_metrics(confusion(res.prediction, prepared.gt, split.test));
  return res;
}

namespace {

json report_j(const MetricsReport& m) { return json::parse(report_to_json(m)); }

}  // namespace

std::string eval_to_json(const EvalResult& r) {
  json j = report_j(r.report);
  j["split"] = {{"train_pixels", r.train_pixels},
                {"test_pixels", r.test_pixels},
                {"metrics_over", "test"},
                {"map_includes_train_pixels", true}};
  j["train_counts"] = {{"tp", r.train_counts.tp},
                       {"tn", r.train_counts.tn},
                       {"fp", r.train_counts.fp},
                       {"fn", r.train_counts.fn}};
  return j.dump(2);
}

std::vector<TableRow> ablate(const BiTemporalScene& scene, const TrainConfig& cfg,
                             const std::function<void(const TableRow&)>& on_row) {
  struct Variant {
    const char* label;
    bool ModelConfig::*flag;
  };
  const Variant variants[] = {{"A", &ModelConfig::use_msc},
                              {"B", &ModelConfig::use_dccsa},
                              {"C", &ModelConfig::use_stcfl},
                              {"D", &ModelConfig::use_afaf},
                              {"Full", nullptr}};
  std::vector<TableRow> rows;
  for (const auto& v : variants) {
    TrainConfig c = cfg;
    c.model.use_msc = c.model.use_dccsa = c.model.use_stcfl = c.model.use_afaf = true;
    if (v.flag) c.model.*(v.flag) = false;
    TrainResult tr = train(scene, c);
    rows.push_back({v.label, evaluate(tr.model, scene, tr.split, tr.config).report});
    if (on_row) on_row(rows.back());
  }
  return rows;
}

SweepDim sweep_dim_from_string(const std::string& s) {
  if (s == "ratio") return SweepDim::ratio;
  if (s == "patch") return SweepDim::patch;
  if (s == "batch") return SweepDim::batch;
  throw ConfigError("unknown sweep dimension '" + s + "' (ratio|patch|batch)");
}

std::string to_string(SweepDim d) {
  switch (d) {
    case SweepDim::ratio: return "ratio";
    case SweepDim::patch: return "patch";
    case SweepDim::batch: return "batch";
  }
  return "?";
}

std::vector<TableRow> sweep(const BiTemporalScene& scene, const TrainConfig& cfg, SweepDim dim,
                            const std::vector<double>& values,
                            const std::function<void(const TableRow&)>& on_row) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  auto as_count = [](double v) {
    if (!(v >= 1.0) || v != std::floor(v)) {
      throw ConfigError("sweep value " + std::to_string(v) + " must be a positive integer");
    }
    return static_cast<std::size_t>(v);
  };
  std::vector<TrainConfig> configs;
  for (double v : values) {
    TrainConfig c = cfg;
    switch (dim) {
      case SweepDim::ratio: c.ratio = v; break;
      case SweepDim::patch: c.patch = as_count(v); break;
      case SweepDim::batch: c.batch = as_count(v); break;
    }
    resolve_config(c, scene);  // fail before any training starts
    configs.push_back(c);
  }
  std::vector<TableRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    TrainResult tr = train(scene, configs[i]);
    std::ostringstream label;
    label << to_string(dim) << '=' << values[i];
    rows.push_back({label.str(), evaluate(tr.model, scene, tr.split, tr.config).report});
    if (on_row) on_row(rows.back());
  }
  return rows;
}

std::string table_to_json(const std::vector<TableRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    json j = report_j(r.report);
    j["label"] = r.label;
    arr.push_back(std::move(j));
  }
  return json{{"rows", std::move(arr)}}.dump(2);
}

std::string table_to_text(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %8s %8s %8s\n", "variant", "OA", "KC",
                "KC*", "Pr", "Re", "F1");
  out << line;
  for (const auto& r : rows) {
    const auto& m = r.report;
    std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %8s %8s %8s\n", r.label.c_str(),
                  format_percent(m.oa).c_str(), format_percent(m.kc_standard).c_str(),
                  format_percent(m.kc_paper).c_str(), format_percent(m.pr).c_str(),
                  format_percent(m.re).c_str(), format_percent(m.f1).c_str());
    out << line;
  }
  return out.str();
}

}  // namespace chmffn
