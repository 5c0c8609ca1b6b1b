#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chmffn/raster.hpp"

namespace chmffn {

// Changed is the positive class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

// Whole-raster counts. Throws ShapeError if the rasters differ in size.
ConfusionCounts confusion(const BinaryRaster& pred, const BinaryRaster& gt);
// Counts over the listed coordinates only; DataError for an out-of-range coordinate.
ConfusionCounts confusion(const BinaryRaster& pred, const BinaryRaster& gt,
                          std::span<const Coord> coords);

// Each throws MetricError when its value is undefined.
double overall_accuracy(const ConfusionCounts& c);
// Cohen: p_e = [(tp+fp)(tp+fn) + (tn+fn)(tn+fp)] / N^2.
double kappa_standard(const ConfusionCounts& c);
// Product form p_e = (tp*fn + tp*fp + tn*fn + tn*fp) / N^2, as printed in
// the original evaluation protocol.
double kappa_paper(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);
double f1_score(const ConfusionCounts& c);

struct MetricsReport {
  ConfusionCounts counts;
  double oa = 0.0;
  double kc_standard = 0.0;
  double kc_paper = 0.0;
  double pr = 0.0;
  double re = 0.0;
  double f1 = 0.0;

  bool operator==(const MetricsReport&) const = default;
};

MetricsReport compute_metrics(const ConfusionCounts& c);

// value * 100 rounded to two decimals: 0.98614 -> "98.61".
std::string format_percent(double value);

std::string report_to_json(const MetricsReport& m);
MetricsReport report_from_json(const std::string& text);
void write_report(const MetricsReport& m, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);

enum class PixelClass : std::uint8_t { tp, tn, fp, fn };

using Rgb = std::array<std::uint8_t, 3>;
// White, black, green, red.
Rgb class_color(PixelClass c);

struct ChangeMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<PixelClass> classes;

  PixelClass at(std::size_t r, std::size_t c) const { return classes[r * width + c]; }
  ConfusionCounts counts() const;
};

ChangeMap make_change_map(const BinaryRaster& pred, const BinaryRaster& gt);

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major

  Rgb at(std::size_t r, std::size_t c) const {
    const std::size_t i = 3 * (r * width + c);
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  bool operator==(const RgbImage&) const = default;
};

RgbImage render_change_map(const ChangeMap& map);
RgbImage render_change_map(const BinaryRaster& pred, const BinaryRaster& gt);
// Binary PPM (P6, maxval 255).
void write_ppm(const RgbImage& img, const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);

}  // namespace chmffn
