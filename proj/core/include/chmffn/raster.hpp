#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace chmffn {

struct Coord {
  std::size_t row = 0;
  std::size_t col = 0;
  auto operator<=>(const Coord&) const = default;
};

// Single-band 0/1 raster, row-major. Holds ground truth and predictions.
struct BinaryRaster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  BinaryRaster() = default;
  BinaryRaster(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), values(h * w, fill) {}

  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  std::uint8_t at(Coord p) const { return at(p.row, p.col); }
  std::size_t size() const { return values.size(); }
  bool operator==(const BinaryRaster&) const = default;
};

using GroundTruth = BinaryRaster;

}  // namespace chmffn
