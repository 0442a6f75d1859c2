#include "gemm.hpp"

#include <Eigen/Core>

namespace gcaps::detail {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor, Eigen::Unaligned, Eigen::OuterStride<>>;
using View = Eigen::Map<RowMajor, Eigen::Unaligned, Eigen::OuterStride<>>;

ConstView view(const double* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return ConstView(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

template <class A, class B>
void accumulate(View& c, const A& a, const B& b, double alpha, double beta) {
  if (beta == 0.0) {
    c.noalias() = alpha * (a * b);
  } else {
    if (beta != 1.0) c *= beta;
    c.noalias() += alpha * (a * b);
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  View cv(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n),
          Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
  if (k == 0) {
    if (beta == 0.0) cv.setZero();
    else cv *= beta;
    return;
  }
  // Stored shapes: A is [m, k] or [k, m]; B is [k, n] or [n, k].
  const ConstView av = trans_a ? view(a, k, m, lda) : view(a, m, k, lda);
  const ConstView bv = trans_b ? view(b, n, k, ldb) : view(b, k, n, ldb);
  if (trans_a && trans_b) accumulate(cv, av.transpose(), bv.transpose(), alpha, beta);
  else if (trans_a) accumulate(cv, av.transpose(), bv, alpha, beta);
  else if (trans_b) accumulate(cv, av, bv.transpose(), alpha, beta);
  else accumulate(cv, av, bv, alpha, beta);
}

}  // namespace gcaps::detail
