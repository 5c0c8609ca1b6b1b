#pragma once

#include <cstddef>

namespace chmffn {

// Row-major C(M x N) = op(A)(M x K) * op(B)(K x N), or += when accumulate.
// op(X) is X or its transpose; a transposed A is stored K x M and a
// transposed B is stored N x K.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

}  // namespace chmffn
