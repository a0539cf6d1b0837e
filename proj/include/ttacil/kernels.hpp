#pragma once

// Dense row-major kernels shared by the forward and backward passes.
// Every output element accumulates its products in increasing k order, so a
// row of the result does not depend on how many other rows are computed.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace ttacil::kernels {

namespace detail {

// C[m×n] += op(A) · B[k×n] where op(A)(i, p) = a[i * rs + p * cs].
// Four output rows share each load of B; columns are tiled to stay in L1.
inline void gemm_strided(const double* a, std::size_t rs, std::size_t cs, const double* b, double* c,
                         std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kRows = 4, kCols = 64;
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * rs;
    for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
      const std::size_t j1 = std::min(n, j0 + kCols);
      for (std::size_t p = 0; p < k; ++p) {
        const double* br = b + p * n;
        const double* ap = a0 + p * cs;
        const double x0 = ap[0], x1 = ap[rs], x2 = ap[2 * rs], x3 = ap[3 * rs];
        for (std::size_t j = j0; j < j1; ++j) {
          const double bv = br[j];
          c0[j] += x0 * bv;
          c1[j] += x1 * bv;
          c2[j] += x2 * bv;
          c3[j] += x3 * bv;
        }
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * rs + p * cs];
      const double* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * br[j];
    }
  }
}

}  // namespace detail

// C[m×n] (+)= A[m×k] · B[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  detail::gemm_strided(a, k, 1, b, c, m, k, n);
}

// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  detail::gemm_strided(a, 1, m, b, c, m, k, n);
}

}  // namespace ttacil::kernels
