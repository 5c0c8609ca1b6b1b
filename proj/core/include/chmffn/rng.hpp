#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "chmffn/tensor.hpp"

namespace chmffn {

/// Seeded pseudo-random stream. The engine is mt19937_64, whose output
/// sequence is fixed by the standard; the distributions are implemented
/// here so the same seed yields the same samples on every toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng);
Tensor normal_tensor(Shape shape, double mu, double sigma, Rng& rng);

}  // namespace chmffn
