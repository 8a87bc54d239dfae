#pragma once

#include <cstdint>

namespace iomm {

// C[m x n] = alpha * op(A) * op(B) + beta * C, all row-major.
// Uses the CBLAS backend when built with one; kernels are deterministic for a
// given build (the backend is pinned to one thread).
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          float alpha, const float* a, int64_t lda, const float* b, int64_t ldb,
          float beta, float* c, int64_t ldc);
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b, int64_t ldb,
          double beta, double* c, int64_t ldc);

}  // namespace iomm
