#include "iomm/linalg.hpp"

#include <mutex>

#if IOMM_WITH_CBLAS
#include <cblas.h>

// Present in OpenBLAS builds only; weak so plain netlib BLAS still links.
extern "C" void openblas_set_num_threads(int) __attribute__((weak));
#endif

namespace iomm {

namespace {

#if IOMM_WITH_CBLAS
void pin_backend_threads() {
    // Batch-level parallelism lives in the trainer; a multithreaded BLAS
    // underneath it would only fight for cores and lose determinism.
    static std::once_flag once;
    std::call_once(once, [] {
        if (openblas_set_num_threads) openblas_set_num_threads(1);
    });
}
#else
template <typename T>
void gemm_fallback(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                   T alpha, const T* a, int64_t lda, const T* b, int64_t ldb,
                   T beta, T* c, int64_t ldc) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            c[i * ldc + j] = (beta == T(0)) ? T(0) : beta * c[i * ldc + j];
        }
    }
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const T av = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
            T* crow = c + i * ldc;
            if (trans_b) {
                for (int64_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
            } else {
                const T* brow = b + p * ldb;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}
#endif

}  // namespace

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          float alpha, const float* a, int64_t lda, const float* b, int64_t ldb,
          float beta, float* c, int64_t ldc) {
#if IOMM_WITH_CBLAS
    pin_backend_threads();
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, blasint(m), blasint(n),
                blasint(k), alpha, a, blasint(lda), b, blasint(ldb), beta, c,
                blasint(ldc));
#else
    gemm_fallback(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
#endif
}

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b, int64_t ldb,
          double beta, double* c, int64_t ldc) {
#if IOMM_WITH_CBLAS
    pin_backend_threads();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, blasint(m), blasint(n),
                blasint(k), alpha, a, blasint(lda), b, blasint(ldb), beta, c,
                blasint(ldc));
#else
    gemm_fallback(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
#endif
}

}  // namespace iomm
