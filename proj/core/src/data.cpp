#include "chmffn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "chmffn/error.hpp"
#include "chmffn/rng.hpp"
#include "json.hpp"

namespace chmffn {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts need byte swapping");

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

void HyperCube::validate() const {
  if (height == 0 || width == 0 || bands == 0) throw DataError("cube dimensions must be positive");
  if (data.size() != height * width * bands) {
    throw DataError("cube data length " + std::to_string(data.size()) + " does not match " +
                    std::to_string(height) + "x" + std::to_string(width) + "x" +
                    std::to_string(bands));
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw DataError("cube contains non-finite values");
  }
}

void BiTemporalScene::validate() const {
  t1.validate();
  t2.validate();
  if (t1.height != t2.height || t1.width != t2.width || t1.bands != t2.bands) {
    throw DataError("T1 and T2 cubes differ in size");
  }
  if (gt.height != t1.height || gt.width != t1.width || gt.values.size() != gt.height * gt.width) {
    throw DataError("ground truth size does not match the cubes");
  }
  for (auto v : gt.values) {
    if (v > 1) throw DataError("ground truth values must be 0 or 1");
  }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

RasterHeader read_header(const fs::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw DataError("cannot open header " + header_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("malformed header " + header_path.string() + ": " + e.what());
  }
  RasterHeader h;
  try {
    h.height = j.at("height").get<std::size_t>();
    h.width = j.at("width").get<std::size_t>();
    h.bands = j.at("bands").get<std::size_t>();
    h.dtype = j.at("dtype").get<std::string>();
    h.order = j.value("order", std::string("bsq"));
    h.byte_order = j.value("byte_order", std::string("le"));
  } catch (const json::exception& e) {
    throw DataError("header " + header_path.string() + ": " + e.what());
  }
  if (h.order != "bsq") throw DataError("unsupported interleave order '" + h.order + "'");
  if (h.byte_order != "le") throw DataError("unsupported byte order '" + h.byte_order + "'");
  if (h.dtype != "f32" && h.dtype != "u8") throw DataError("unsupported dtype '" + h.dtype + "'");
  if (h.height == 0 || h.width == 0 || h.bands == 0) {
    throw DataError("header dimensions must be positive");
  }
  return h;
}

void write_header(const RasterHeader& h, const fs::path& header_path) {
  json j = {{"height", h.height}, {"width", h.width},   {"bands", h.bands},
            {"dtype", h.dtype},   {"order", h.order}, {"byte_order", h.byte_order}};
  std::ofstream out(header_path);
  if (!out) throw DataError("cannot write header " + header_path.string());
  out << j.dump(2) << '\n';
}

fs::path payload_path_for(const fs::path& header_path) {
  fs::path p = header_path;
  p.replace_extension(".bin");
  return p;
}

namespace {

std::vector<char> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open data file " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_all(const fs::path& path, const void* bytes, std::size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write data file " + path.string());
  out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

HyperCube load_cube(const fs::path& header_path, const fs::path& data_path) {
  const RasterHeader h = read_header(header_path);
  if (h.dtype != "f32") throw DataError("cube dtype must be f32, got '" + h.dtype + "'");
  const auto bytes = read_all(data_path);
  const std::size_t expected = 4 * h.height * h.width * h.bands;
  if (bytes.size() != expected) {
    throw DataError("cube payload " + data_path.string() + " has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(expected));
  }
  HyperCube cube(h.height, h.width, h.bands);
  std::memcpy(cube.data.data(), bytes.data(), expected);
  cube.validate();
  return cube;
}

HyperCube load_cube(const fs::path& header_path) {
  return load_cube(header_path, payload_path_for(header_path));
}

void write_cube(const HyperCube& cube, const fs::path& header_path, const fs::path& data_path) {
  cube.validate();
  write_header({cube.height, cube.width, cube.bands, "f32", "bsq", "le"}, header_path);
  write_all(data_path, cube.data.data(), cube.data.size() * sizeof(float));
}

void write_cube(const HyperCube& cube, const fs::path& header_path) {
  write_cube(cube, header_path, payload_path_for(header_path));
}

BinaryRaster load_raster(const fs::path& header_path, const fs::path& data_path) {
  const RasterHeader h = read_header(header_path);
  if (h.dtype != "u8" || h.bands != 1) throw DataError("raster must be single-band u8");
  const auto bytes = read_all(data_path);
  if (bytes.size() != h.height * h.width) {
    throw DataError("raster payload " + data_path.string() + " has " +
                    std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(h.height * h.width));
  }
  BinaryRaster r(h.height, h.width);
  std::memcpy(r.values.data(), bytes.data(), bytes.size());
  for (auto v : r.values) {
    if (v > 1) throw DataError("raster values must be 0 or 1");
  }
  return r;
}

BinaryRaster load_raster(const fs::path& header_path) {
  return load_raster(header_path, payload_path_for(header_path));
}

void write_raster(const BinaryRaster& raster, const fs::path& header_path,
                  const fs::path& data_path) {
  write_header({raster.height, raster.width, 1, "u8", "bsq", "le"}, header_path);
  write_all(data_path, raster.values.data(), raster.values.size());
}

void write_raster(const BinaryRaster& raster, const fs::path& header_path) {
  write_raster(raster, header_path, payload_path_for(header_path));
}

BiTemporalScene load_scene(const fs::path& t1_header, const fs::path& t2_header,
                           const fs::path& gt_header) {
  BiTemporalScene s{load_cube(t1_header), load_cube(t2_header), load_raster(gt_header)};
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

HyperCube normalize_bands(const HyperCube& cube) {
  HyperCube out = cube;
  const std::size_t plane = cube.height * cube.width;
  for (std::size_t b = 0; b < cube.bands; ++b) {
    float* p = out.data.data() + b * plane;
    const auto [mn, mx] = std::minmax_element(p, p + plane);
    const double lo = *mn, hi = *mx;
    if (hi <= lo) {
      std::fill(p, p + plane, 0.0f);
      continue;
    }
    const double span = hi - lo;
    for (std::size_t i = 0; i < plane; ++i) {
      p[i] = static_cast<float>((static_cast<double>(p[i]) - lo) / span);
    }
  }
  return out;
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

namespace {

void fill_patch(const HyperCube& cube, Coord c, std::size_t patch, double* dst) {
  const auto half = static_cast<std::ptrdiff_t>(patch / 2);
  for (std::size_t b = 0; b < cube.bands; ++b) {
    for (std::size_t y = 0; y < patch; ++y) {
      const std::size_t r =
          reflect_index(static_cast<std::ptrdiff_t>(c.row) + static_cast<std::ptrdiff_t>(y) - half,
                        cube.height);
      for (std::size_t x = 0; x < patch; ++x) {
        const std::size_t col = reflect_index(
            static_cast<std::ptrdiff_t>(c.col) + static_cast<std::ptrdiff_t>(x) - half, cube.width);
        dst[(b * patch + y) * patch + x] = cube.at(b, r, col);
      }
    }
  }
}

void check_patch_args(const BiTemporalScene& scene, Coord coord, std::size_t patch) {
  if (patch == 0 || patch % 2 == 0) throw ConfigError("patch size must be odd and positive");
  if (coord.row >= scene.height() || coord.col >= scene.width()) {
    throw DataError("patch center (" + std::to_string(coord.row) + "," +
                    std::to_string(coord.col) + ") is out of bounds");
  }
}

}  // namespace

PatchPair extract_patch(const BiTemporalScene& scene, Coord coord, std::size_t patch) {
  check_patch_args(scene, coord, patch);
  PatchPair p;
  p.p1 = Tensor({scene.bands(), patch, patch});
  p.p2 = Tensor({scene.bands(), patch, patch});
  fill_patch(scene.t1, coord, patch, p.p1.data().data());
  fill_patch(scene.t2, coord, patch, p.p2.data().data());
  p.label = scene.gt.at(coord);
  p.coord = coord;
  return p;
}

PatchBatch make_batch(const BiTemporalScene& scene, std::span<const Coord> coords,
                      std::size_t patch) {
  if (coords.empty()) throw DataError("empty patch batch");
  const std::size_t n = coords.size(), b = scene.bands();
  const std::size_t per = b * patch * patch;
  PatchBatch batch;
  batch.p1 = Tensor({n, b, patch, patch});
  batch.p2 = Tensor({n, b, patch, patch});
  batch.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    check_patch_args(scene, coords[i], patch);
    fill_patch(scene.t1, coords[i], patch, batch.p1.data().data() + i * per);
    fill_patch(scene.t2, coords[i], patch, batch.p2.data().data() + i * per);
    batch.labels.push_back(scene.gt.at(coords[i]));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

SplitIndex stratified_split(const GroundTruth& gt, double ratio, std::uint64_t seed,
                            bool allow_empty_class) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0,1)");
  std::vector<Coord> changed, unchanged;
  for (std::size_t r = 0; r < gt.height; ++r) {
    for (std::size_t c = 0; c < gt.width; ++c) {
      (gt.at(r, c) ? changed : unchanged).push_back({r, c});
    }
  }
  if (changed.empty() || unchanged.empty()) {
    throw DataError(std::string("ground truth has no ") + (changed.empty() ? "changed" : "unchanged") +
                    " pixels");
  }
  SplitIndex split;
  split.ratio = ratio;
  split.seed = seed;
  Rng rng(seed);
  for (auto* cls : {&changed, &unchanged}) {
    rng.shuffle(*cls);
    const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(cls->size())));
    if (n_train == 0 && !allow_empty_class) {
      throw ConfigError("split ratio leaves a class with no training pixels");
    }
    split.train.insert(split.train.end(), cls->begin(), cls->begin() + n_train);
    split.test.insert(split.test.end(), cls->begin() + n_train, cls->end());
  }
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

SyntheticScene synth_scene(std::size_t height, std::size_t width, std::size_t bands,
                           std::size_t n_change_rects, double noise_sigma, std::uint64_t seed) {
  if (height == 0 || width == 0 || bands == 0) {
    throw ConfigError("synthetic scene dimensions must be positive");
  }
  if (noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
  Rng rng(seed);
  const double nb = static_cast<double>(bands);

  auto bump_spectrum = [&](std::size_t bumps, double amp_lo, double amp_hi) {
    std::vector<double> s(bands, 0.0);
    for (std::size_t j = 0; j < bumps; ++j) {
      const double amp = rng.uniform(amp_lo, amp_hi);
      const double mu = rng.uniform(0.0, nb);
      const double sd = rng.uniform(nb / 10.0 + 1.0, nb / 4.0 + 1.0);
      for (std::size_t b = 0; b < bands; ++b) {
        const double z = (static_cast<double>(b) - mu) / sd;
        s[b] += amp * std::exp(-0.5 * z * z);
      }
    }
    return s;
  };

  constexpr std::size_t kMaterials = 4;
  std::vector<std::vector<double>> materials;
  for (std::size_t m = 0; m < kMaterials; ++m) {
    auto s = bump_spectrum(3, 0.1, 0.5);
    const double base = rng.uniform(0.2, 0.5);
    for (auto& v : s) v += base;
    materials.push_back(std::move(s));
  }
  std::vector<std::pair<double, double>> seeds;
  for (std::size_t m = 0; m < kMaterials; ++m) {
    seeds.emplace_back(rng.uniform(0.0, static_cast<double>(height)),
                       rng.uniform(0.0, static_cast<double>(width)));
  }

  SyntheticScene out;
  BiTemporalScene& scene = out.scene;
  scene.t1 = HyperCube(height, width, bands);
  scene.gt = GroundTruth(height, width, 0);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < kMaterials; ++m) {
        const double dr = static_cast<double>(r) - seeds[m].first;
        const double dc = static_cast<double>(c) - seeds[m].second;
        const double d = dr * dr + dc * dc;
        if (d < best_d) {
          best_d = d;
          best = m;
        }
      }
      const double brightness = rng.uniform(0.95, 1.05);
      for (std::size_t b = 0; b < bands; ++b) {
        scene.t1.at(b, r, c) = static_cast<float>(materials[best][b] * brightness);
      }
    }
  }
  scene.t2 = scene.t1;

  constexpr std::size_t kRectGap = 2;
  constexpr std::size_t kPlacementTries = 100;
  const std::size_t min_h = std::max<std::size_t>(1, height / 5);
  const std::size_t min_w = std::max<std::size_t>(1, width / 5);
  const std::size_t max_h = std::max(min_h, height / 2);
  const std::size_t max_w = std::max(min_w, width / 2);
  for (std::size_t k = 0; k < n_change_rects; ++k) {
    // Rejection-sample a rectangle that keeps a gap from the earlier ones;
    // after kPlacementTries failures the last draw is kept as is.
    Rect rect;
    for (std::size_t attempt = 0; attempt < kPlacementTries; ++attempt) {
      rect.height = min_h + static_cast<std::size_t>(rng.below(max_h - min_h + 1));
      rect.width = min_w + static_cast<std::size_t>(rng.below(max_w - min_w + 1));
      rect.row = static_cast<std::size_t>(rng.below(height - rect.height + 1));
      rect.col = static_cast<std::size_t>(rng.below(width - rect.width + 1));
      const bool clear = std::none_of(out.rects.begin(), out.rects.end(), [&](const Rect& o) {
        return rect.row < o.row + o.height + kRectGap && o.row < rect.row + rect.height + kRectGap &&
               rect.col < o.col + o.width + kRectGap && o.col < rect.col + rect.width + kRectGap;
      });
      if (clear) break;
    }
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    auto shift = bump_spectrum(2, 0.2, 0.4);
    for (auto& v : shift) v = sign * (v + 0.15);
    for (std::size_t r = rect.row; r < rect.row + rect.height; ++r) {
      for (std::size_t c = rect.col; c < rect.col + rect.width; ++c) {
        scene.gt.at(r, c) = 1;
        for (std::size_t b = 0; b < bands; ++b) {
          scene.t2.at(b, r, c) = static_cast<float>(scene.t2.at(b, r, c) + shift[b]);
        }
      }
    }
    out.rects.push_back(rect);
  }

  if (noise_sigma > 0.0) {
    for (auto* cube : {&scene.t1, &scene.t2}) {
      for (auto& v : cube->data) v = static_cast<float>(v + rng.normal(0.0, noise_sigma));
    }
  }
  return out;
}

}  // namespace chmffn
