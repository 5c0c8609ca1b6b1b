#include "chmffn/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace chmffn {

namespace {

void transpose_into(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& dst) {
  dst.resize(rows * cols);
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 8;

// C[0:4, 0:8] += A[0:4, :] * B[:, 0:8], accumulated in registers.
using V4 = double __attribute__((vector_size(32)));

inline V4 load4(const double* p) {
  V4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void add_store4(double* p, V4 v) {
  V4 c = load4(p) + v;
  std::memcpy(p, &c, sizeof c);
}

inline void micro_4x8(std::size_t k, const double* __restrict a, std::size_t lda,
                      const double* __restrict b, std::size_t ldb, double* __restrict c,
                      std::size_t ldc) {
  V4 c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
  const double* a0 = a;
  const double* a1 = a + lda;
  const double* a2 = a + 2 * lda;
  const double* a3 = a + 3 * lda;
  for (std::size_t p = 0; p < k; ++p) {
    const V4 b0 = load4(b + p * ldb);
    const V4 b1 = load4(b + p * ldb + 4);
    c00 += a0[p] * b0;
    c01 += a0[p] * b1;
    c10 += a1[p] * b0;
    c11 += a1[p] * b1;
    c20 += a2[p] * b0;
    c21 += a2[p] * b1;
    c30 += a3[p] * b0;
    c31 += a3[p] * b1;
  }
  add_store4(c, c00);
  add_store4(c + 4, c01);
  add_store4(c + ldc, c10);
  add_store4(c + ldc + 4, c11);
  add_store4(c + 2 * ldc, c20);
  add_store4(c + 2 * ldc + 4, c21);
  add_store4(c + 3 * ldc, c30);
  add_store4(c + 3 * ldc + 4, c31);
}

// Edge block of size mr x nr (mr <= 4, nr <= 8).
inline void micro_edge(std::size_t mr, std::size_t nr, std::size_t k, const double* a,
                       std::size_t lda, const double* b, std::size_t ldb, double* c,
                       std::size_t ldc) {
  for (std::size_t r = 0; r < mr; ++r) {
    const double* ar = a + r * lda;
    for (std::size_t j = 0; j < nr; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * b[p * ldb + j];
      c[r * ldc + j] += s;
    }
  }
}

// C += A * B with A (m x k), B (k x n), all contiguous row-major.
void kernel_nn(std::size_t m, std::size_t n, std::size_t k, const double* __restrict a,
               const double* __restrict b, double* __restrict c) {
  // k is blocked so the active B panel stays cache resident.
  constexpr std::size_t kKc = 128;
  for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
    const std::size_t kc = std::min(kKc, k - p0);
    const double* bk = b + p0 * n;
    for (std::size_t i = 0; i < m; i += kMr) {
      const std::size_t mr = std::min(kMr, m - i);
      const double* ak = a + i * k + p0;
      for (std::size_t j = 0; j < n; j += kNr) {
        const std::size_t nr = std::min(kNr, n - j);
        if (mr == kMr && nr == kNr) {
          micro_4x8(kc, ak, k, bk + j, n, c + i * n + j, n);
        } else {
          micro_edge(mr, nr, kc, ak, k, bk + j, n, c + i * n + j, n);
        }
      }
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;
  thread_local std::vector<double> pack_a;
  thread_local std::vector<double> pack_b;
  const double* pa = a;
  const double* pb = b;
  if (trans_a) {
    transpose_into(a, k, m, pack_a);
    pa = pack_a.data();
  }
  if (trans_b) {
    transpose_into(b, n, k, pack_b);
    pb = pack_b.data();
  }
  kernel_nn(m, n, k, pa, pb, c);
}

}  // namespace chmffn
