#include <Eigen/Core>

#include <algorithm>

#include "op_util.hpp"

namespace sapool::detail {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T, typename A, typename B>
void assign(MutMap<T>& c, const A& a, const B& b, T alpha, T beta) {
  if (beta == T(0)) {
    if (alpha == T(1)) {
      c.noalias() = a * b;
    } else {
      c.noalias() = alpha * (a * b);
    }
  } else {
    if (beta != T(1)) c *= beta;
    if (alpha == T(1)) {
      c.noalias() += a * b;
    } else {
      c.noalias() += alpha * (a * b);
    }
  }
}

// Fixed-order loop for vector-shaped and tiny products, where Eigen would
// pick kernels whose rounding depends on operand alignment.
template <typename T>
void small_gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
                const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * ldc;
    if (beta == T(0)) {
      std::fill(ci, ci + n, T(0));
    } else if (beta != T(1)) {
      for (std::size_t j = 0; j < n; ++j) ci[j] *= beta;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const T av = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * b[j * ldb + p];
      } else {
        const T* bp = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  if (m == 0 || n == 0) return;
  using Index = Eigen::Index;
  MutMap<T> cm(c, Index(m), Index(n), Eigen::OuterStride<>(Index(ldc)));
  if (k == 0) {
    if (beta == T(0)) {
      cm.setZero();
    } else {
      cm *= beta;
    }
    return;
  }
  if (m == 1 || n == 1 || m + n + k < 24) {
    small_gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  const ConstMap<T> am(a, trans_a ? Index(k) : Index(m), trans_a ? Index(m) : Index(k),
                       Eigen::OuterStride<>(Index(lda)));
  const ConstMap<T> bm(b, trans_b ? Index(n) : Index(k), trans_b ? Index(k) : Index(n),
                       Eigen::OuterStride<>(Index(ldb)));
  if (!trans_a && !trans_b) assign(cm, am, bm, alpha, beta);
  if (!trans_a && trans_b) assign(cm, am, bm.transpose(), alpha, beta);
  if (trans_a && !trans_b) assign(cm, am.transpose(), bm, alpha, beta);
  if (trans_a && trans_b) assign(cm, am.transpose(), bm.transpose(), alpha, beta);
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, float, const float*,
                          std::size_t, const float*, std::size_t, float, float*, std::size_t);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, double,
                           const double*, std::size_t, const double*, std::size_t, double, double*,
                           std::size_t);

}  // namespace sapool::detail
