#include "chmffn/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "chmffn/error.hpp"
#include "json.hpp"

namespace chmffn {

using nlohmann::json;

namespace {

void check_same_shape(const BinaryRaster& pred, const BinaryRaster& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.size() != gt.size()) {
    throw ShapeError("prediction " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " does not match ground truth " +
                     std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
}

PixelClass classify(std::uint8_t p, std::uint8_t g) {
  if (p) return g ? PixelClass::tp : PixelClass::fp;
  return g ? PixelClass::fn : PixelClass::tn;
}

void tally(ConfusionCounts& c, PixelClass k) {
  switch (k) {
    case PixelClass::tp: ++c.tp; break;
    case PixelClass::tn: ++c.tn; break;
    case PixelClass::fp: ++c.fp; break;
    case PixelClass::fn: ++c.fn; break;
  }
}

double total_or_throw(const ConfusionCounts& c) {
  if (c.total() == 0) throw MetricError("metrics need at least one pixel");
  return static_cast<double>(c.total());
}

double kappa_from(double oa, double pe, const char* which) {
  if (pe >= 1.0) throw MetricError(std::string(which) + " is undefined: chance agreement is 1");
  return (oa - pe) / (1.0 - pe);
}

}  // namespace

ConfusionCounts confusion(const BinaryRaster& pred, const BinaryRaster& gt) {
  check_same_shape(pred, gt);
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) tally(c, classify(pred.values[i], gt.values[i]));
  return c;
}

ConfusionCounts confusion(const BinaryRaster& pred, const BinaryRaster& gt,
                          std::span<const Coord> coords) {
  check_same_shape(pred, gt);
  ConfusionCounts c;
  for (const Coord& p : coords) {
    if (p.row >= gt.height || p.col >= gt.width) {
      throw DataError("evaluation coordinate outside the raster");
    }
    tally(c, classify(pred.at(p), gt.at(p)));
  }
  return c;
}

double overall_accuracy(const ConfusionCounts& c) {
  return static_cast<double>(c.tp + c.tn) / total_or_throw(c);
}

double kappa_standard(const ConfusionCounts& c) {
  const double n = total_or_throw(c);
  const double tp = c.tp, tn = c.tn, fp = c.fp, fn = c.fn;
  const double pe = ((tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)) / (n * n);
  return kappa_from(overall_accuracy(c), pe, "kappa");
}

double kappa_paper(const ConfusionCounts& c) {
  const double n = total_or_throw(c);
  const double tp = c.tp, tn = c.tn, fp = c.fp, fn = c.fn;
  const double pe = (tp * fn + tp * fp + tn * fn + tn * fp) / (n * n);
  return kappa_from(overall_accuracy(c), pe, "product-form kappa");
}

double precision(const ConfusionCounts& c) {
  if (c.tp + c.fp == 0) throw MetricError("precision is undefined: no pixel predicted changed");
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

double recall(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) throw MetricError("recall is undefined: no changed pixel in ground truth");
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double f1_score(const ConfusionCounts& c) {
  const double p = precision(c), r = recall(c);
  if (p + r == 0.0) throw MetricError("F1 is undefined: precision and recall are both 0");
  return 2.0 * p * r / (p + r);
}

MetricsReport compute_metrics(const ConfusionCounts& c) {
  MetricsReport m;
  m.counts = c;
  m.oa = overall_accuracy(c);
  m.kc_standard = kappa_standard(c);
  m.kc_paper = kappa_paper(c);
  m.pr = precision(c);
  m.re = recall(c);
  m.f1 = f1_score(c);
  return m;
}

std::string format_percent(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", std::round(value * 10000.0) / 100.0);
  return buf;
}

std::string report_to_json(const MetricsReport& m) {
  json j;
  j["counts"] = {{"tp", m.counts.tp}, {"tn", m.counts.tn}, {"fp", m.counts.fp}, {"fn", m.counts.fn}};
  j["metrics"] = {{"oa", m.oa}, {"kc_standard", m.kc_standard}, {"kc_paper", m.kc_paper},
                  {"pr", m.pr}, {"re", m.re},                   {"f1", m.f1}};
  return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
  MetricsReport m;
  try {
    const json j = json::parse(text);
    const auto& c = j.at("counts");
    m.counts = {c.at("tp").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>(),
                c.at("fp").get<std::uint64_t>(), c.at("fn").get<std::uint64_t>()};
    const auto& v = j.at("metrics");
    m.oa = v.at("oa").get<double>();
    m.kc_standard = v.at("kc_standard").get<double>();
    m.kc_paper = v.at("kc_paper").get<double>();
    m.pr = v.at("pr").get<double>();
    m.re = v.at("re").get<double>();
    m.f1 = v.at("f1").get<double>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed metrics report: ") + e.what());
  }
  return m;
}

void write_report(const MetricsReport& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report " + path.string());
  out << report_to_json(m) << '\n';
}

MetricsReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

Rgb class_color(PixelClass c) {
  switch (c) {
    case PixelClass::tp: return {255, 255, 255};
    case PixelClass::tn: return {0, 0, 0};
    case PixelClass::fp: return {0, 255, 0};
    case PixelClass::fn: return {255, 0, 0};
  }
  return {0, 0, 0};
}

ConfusionCounts ChangeMap::counts() const {
  ConfusionCounts c;
  for (PixelClass k : classes) tally(c, k);
  return c;
}

ChangeMap make_change_map(const BinaryRaster& pred, const BinaryRaster& gt) {
  check_same_shape(pred, gt);
  ChangeMap m{gt.height, gt.width, {}};
  m.classes.reserve(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    m.classes.push_back(classify(pred.values[i], gt.values[i]));
  }
  return m;
}

RgbImage render_change_map(const ChangeMap& map) {
  RgbImage img{map.height, map.width, {}};
  img.pixels.reserve(3 * map.classes.size());
  for (PixelClass k : map.classes) {
    const Rgb c = class_color(k);
    img.pixels.insert(img.pixels.end(), c.begin(), c.end());
  }
  return img;
}

RgbImage render_change_map(const BinaryRaster& pred, const BinaryRaster& gt) {
  return render_change_map(make_change_map(pred, gt));
}

void write_ppm(const RgbImage& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic;
  RgbImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || magic != "P6" || maxval != 255) throw DataError("not an 8-bit P6 image: " + path.string());
  in.get();  // single whitespace before the raster
  img.pixels.resize(3 * img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw DataError("truncated image " + path.string());
  }
  return img;
}

}  // namespace chmffn
