#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chmffn/config.hpp"
#include "chmffn/data.hpp"
#include "chmffn/metrics.hpp"
#include "chmffn/model.hpp"

namespace chmffn {

// w <- w - lr * grad for every tensor, then the gradients are zeroed.
// Throws NumericError if a tensor carries no gradient buffer.
void sgd_step(std::span<Tensor> params, double lr);

struct EpochStats {
  double mean_loss = 0.0;
  // Accuracy of the training-mode predictions made during the epoch.
  double train_oa = 0.0;
  bool operator==(const EpochStats&) const = default;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;

  // Wall time is not part of equality.
  bool operator==(const TrainHistory& o) const { return epochs == o.epochs; }
};

struct TrainOptions {
  // If set, "model.ckpt" is written here at the end and
  // "epoch_<k>.ckpt" every TrainConfig::checkpoint_every epochs.
  std::filesystem::path checkpoint_dir;
  std::function<void(std::size_t epoch, const EpochStats&)> on_epoch;
};

struct TrainResult {
  ChmffnModel model;
  TrainHistory history;
  SplitIndex split;
  TrainConfig config;  // as used: model.bands/patch/seed filled in
};

// Model configuration actually built for a scene: bands from the scene,
// patch and seed from the training config.
TrainConfig resolve_config(const TrainConfig& cfg, const BiTemporalScene& scene);

// Applies the per-band normalization when cfg.normalize is set.
BiTemporalScene prepare_scene(const BiTemporalScene& scene, const TrainConfig& cfg);

// Consecutive batches of at most `batch` indices; a trailing batch of one
// is merged into the previous batch so every batch has at least two samples.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch);

TrainResult train(const BiTemporalScene& scene, const TrainConfig& cfg,
                  const TrainOptions& options = {});

// Argmax class (1 = changed) for each coordinate, eval mode, no tape.
std::vector<std::uint8_t> predict(const ChmffnModel& model, const BiTemporalScene& prepared,
                                  std::span<const Coord> coords, std::size_t threads = 1);

struct EvalResult {
  MetricsReport report;        // over the test coordinates
  ConfusionCounts train_counts;
  BinaryRaster prediction;     // whole image
  ChangeMap map;               // whole image; train pixels included
  std::size_t train_pixels = 0;
  std::size_t test_pixels = 0;
};

// Throws MetricError when a metric is undefined for the test predictions.
EvalResult evaluate(const ChmffnModel& model, const BiTemporalScene& scene, const SplitIndex& split,
                    const TrainConfig& cfg);

// JSON for one evaluation: the report plus split bookkeeping.
std::string eval_to_json(const EvalResult& r);

struct TableRow {
  std::string label;
  MetricsReport report;
};

// Full, A (no multiscale), B (no DCCSA), C (no STCFL), D (no AFAF).
std::vector<TableRow> ablate(const BiTemporalScene& scene, const TrainConfig& cfg,
                             const std::function<void(const TableRow&)>& on_row = {});

enum class SweepDim { ratio, patch, batch };
SweepDim sweep_dim_from_string(const std::string& s);
std::string to_string(SweepDim d);

std::vector<TableRow> sweep(const BiTemporalScene& scene, const TrainConfig& cfg, SweepDim dim,
                            const std::vector<double>& values,
                            const std::function<void(const TableRow&)>& on_row = {});

// {"rows": [{"label", "counts", "metrics"}...]} at full precision.
std::string table_to_json(const std::vector<TableRow>& rows);
// Fixed-width text table with percentages to two decimals.
std::string table_to_text(const std::vector<TableRow>& rows);

}  // namespace chmffn
