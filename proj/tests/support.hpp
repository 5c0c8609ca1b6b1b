#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <string>

#include "chmffn/model.hpp"
#include "chmffn/rng.hpp"
#include "chmffn/tensor.hpp"

namespace testing {

inline chmffn::Tensor rand_tensor(chmffn::Shape shape, chmffn::Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
  return chmffn::uniform_tensor(std::move(shape), lo, hi, rng);
}

// Values in [lo, hi] with random sign: keeps kinked ops away from 0.
inline chmffn::Tensor rand_away_from_zero(chmffn::Shape shape, chmffn::Rng& rng,
                                          double lo = 0.1, double hi = 1.0) {
  chmffn::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

// Smallest configuration that exercises every module.
inline chmffn::ModelConfig tiny_config(std::uint64_t seed = 0) {
  chmffn::ModelConfig c;
  c.bands = 2;
  c.patch = 3;
  c.base_channels = 2;
  c.heads = 2;
  c.ffn_mult = 2;
  c.reduction = 2;
  c.seed = seed;
  return c;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    chmffn::Rng rng(static_cast<std::uint64_t>(
        std::chrono::steady_clock::now().time_since_epoch().count()));
    path_ = std::filesystem::temp_directory_path() /
            ("chmffn_test_" + std::to_string(rng.next_u64() % 1000000000) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
