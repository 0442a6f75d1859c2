#pragma once

#include <cstddef>

namespace gcaps::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C (Eigen product kernels).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc);

}  // namespace gcaps::detail
