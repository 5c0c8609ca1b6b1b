#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chmffn/raster.hpp"
#include "chmffn/tensor.hpp"

namespace chmffn {

/// Hyperspectral cube in band-sequential order: data[(band * height + row) * width + col].
struct HyperCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<float> data;

  HyperCube() = default;
  HyperCube(std::size_t h, std::size_t w, std::size_t b, float fill = 0.0f)
      : height(h), width(w), bands(b), data(h * w * b, fill) {}

  float at(std::size_t band, std::size_t row, std::size_t col) const {
    return data[(band * height + row) * width + col];
  }
  float& at(std::size_t band, std::size_t row, std::size_t col) {
    return data[(band * height + row) * width + col];
  }
  // Throws DataError on size mismatch or non-finite values.
  void validate() const;
  bool operator==(const HyperCube&) const = default;
};

struct BiTemporalScene {
  HyperCube t1;
  HyperCube t2;
  GroundTruth gt;

  // Throws DataError unless t1, t2 and gt agree in size and gt is 0/1.
  void validate() const;
  std::size_t height() const { return gt.height; }
  std::size_t width() const { return gt.width; }
  std::size_t bands() const { return t1.bands; }
};

// JSON header: {height, width, bands, dtype: "f32"|"u8", order: "bsq",
// byte_order: "le"}; the payload is a separate raw file.
struct RasterHeader {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::string dtype = "f32";
  std::string order = "bsq";
  std::string byte_order = "le";
};

RasterHeader read_header(const std::filesystem::path& header_path);
void write_header(const RasterHeader& header, const std::filesystem::path& header_path);
// Payload location paired with a header: same stem, ".bin" extension.
std::filesystem::path payload_path_for(const std::filesystem::path& header_path);

HyperCube load_cube(const std::filesystem::path& header_path,
                    const std::filesystem::path& data_path);
HyperCube load_cube(const std::filesystem::path& header_path);
void write_cube(const HyperCube& cube, const std::filesystem::path& header_path,
                const std::filesystem::path& data_path);
void write_cube(const HyperCube& cube, const std::filesystem::path& header_path);

BinaryRaster load_raster(const std::filesystem::path& header_path,
                         const std::filesystem::path& data_path);
BinaryRaster load_raster(const std::filesystem::path& header_path);
void write_raster(const BinaryRaster& raster, const std::filesystem::path& header_path,
                  const std::filesystem::path& data_path);
void write_raster(const BinaryRaster& raster, const std::filesystem::path& header_path);

BiTemporalScene load_scene(const std::filesystem::path& t1_header,
                           const std::filesystem::path& t2_header,
                           const std::filesystem::path& gt_header);

// Per-band min-max rescale to [0,1]; constant bands become 0.
HyperCube normalize_bands(const HyperCube& cube);

// Index into [0, n) with mirror reflection that does not repeat the edge.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

struct PatchPair {
  Tensor p1;  // (B,P,P)
  Tensor p2;  // (B,P,P)
  int label = 0;
  Coord coord;
};

PatchPair extract_patch(const BiTemporalScene& scene, Coord coord, std::size_t patch);

struct PatchBatch {
  Tensor p1;  // (n,B,P,P)
  Tensor p2;  // (n,B,P,P)
  std::vector<int> labels;
};

PatchBatch make_batch(const BiTemporalScene& scene, std::span<const Coord> coords,
                      std::size_t patch);

struct SplitIndex {
  std::vector<Coord> train;
  std::vector<Coord> test;
  double ratio = 0.0;
  std::uint64_t seed = 0;
};

/// Per class (changed, unchanged) shuffle with a seeded Rng and take
/// floor(ratio * count) coordinates for training; the rest are test. A
/// class with no pixels is an error, and so is a class whose training share
/// rounds to zero unless allow_empty_class is set.
SplitIndex stratified_split(const GroundTruth& gt, double ratio, std::uint64_t seed,
                            bool allow_empty_class = false);

struct Rect {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
};

struct SyntheticScene {
  BiTemporalScene scene;
  // Change rectangles, each fully inside the image.
  std::vector<Rect> rects;
};

/// Desk-scale bi-temporal scene. T1 holds smooth per-region spectra (sums
/// of Gaussian bumps over the band axis on a Voronoi region map); T2 adds a
/// spectral shift inside each change rectangle. Rectangles are kept at least
/// two pixels apart when the image leaves room. Independent Gaussian noise
/// of `noise_sigma` is added to both dates.
SyntheticScene synth_scene(std::size_t height, std::size_t width, std::size_t bands,
                           std::size_t n_change_rects, double noise_sigma, std::uint64_t seed);

}  // namespace chmffn
