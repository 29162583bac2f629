// Compiled with -mavx2 -mfma. Only reached through the dispatch table after a
// cpuid check, so nothing here may be inlined into portable code: keep this
// file free of templates and standard-library containers.

#include "dualdiff/kernels.h"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>

namespace dualdiff::kernels {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

inline void store_tile(double* c, __m256d acc, double beta) {
    if (beta == 0.0) {
        _mm256_storeu_pd(c, acc);
    } else {
        __m256d old = _mm256_loadu_pd(c);
        _mm256_storeu_pd(c, _mm256_fmadd_pd(_mm256_set1_pd(beta), old, acc));
    }
}

inline double scale_old(double old, double beta) { return beta == 0.0 ? 0.0 : beta * old; }

// 4 x 8 register tile: 8 accumulators, B row loaded once per k.
void tile_4x8(int k, const double* a, int lda, const double* b, int ldb, double beta, double* c,
              int ldc) {
    __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
    __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
    __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
    __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
    const double* a0 = a;
    const double* a1 = a + lda;
    const double* a2 = a + 2 * static_cast<std::ptrdiff_t>(lda);
    const double* a3 = a + 3 * static_cast<std::ptrdiff_t>(lda);
    for (int p = 0; p < k; ++p) {
        const double* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
        const __m256d b0 = _mm256_loadu_pd(brow);
        const __m256d b1 = _mm256_loadu_pd(brow + 4);
        __m256d av = _mm256_broadcast_sd(a0 + p);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(a1 + p);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(a2 + p);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(a3 + p);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
    }
    store_tile(c, c00, beta);
    store_tile(c + 4, c01, beta);
    store_tile(c + ldc, c10, beta);
    store_tile(c + ldc + 4, c11, beta);
    store_tile(c + 2 * static_cast<std::ptrdiff_t>(ldc), c20, beta);
    store_tile(c + 2 * static_cast<std::ptrdiff_t>(ldc) + 4, c21, beta);
    store_tile(c + 3 * static_cast<std::ptrdiff_t>(ldc), c30, beta);
    store_tile(c + 3 * static_cast<std::ptrdiff_t>(ldc) + 4, c31, beta);
}

// One output row, columns [j0, n).
void row_tail(int n, int j0, int k, const double* arow, const double* b, int ldb, double beta,
              double* crow) {
    int j = j0;
    for (; j + 4 <= n; j += 4) {
        __m256d acc = _mm256_setzero_pd();
        for (int p = 0; p < k; ++p) {
            acc = _mm256_fmadd_pd(_mm256_broadcast_sd(arow + p),
                                  _mm256_loadu_pd(b + static_cast<std::ptrdiff_t>(p) * ldb + j), acc);
        }
        store_tile(crow + j, acc, beta);
    }
    for (; j < n; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += arow[p] * b[static_cast<std::ptrdiff_t>(p) * ldb + j];
        crow[j] = scale_old(crow[j], beta) + s;
    }
}

void gemm_avx2(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
               double beta, double* c, int ldc) {
    const int n8 = n - n % 8;
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* ablk = a + static_cast<std::ptrdiff_t>(i) * lda;
        double* cblk = c + static_cast<std::ptrdiff_t>(i) * ldc;
        for (int j = 0; j < n8; j += 8) tile_4x8(k, ablk, lda, b + j, ldb, beta, cblk + j, ldc);
        if (n8 < n) {
            for (int r = 0; r < 4; ++r) {
                row_tail(n, n8, k, ablk + static_cast<std::ptrdiff_t>(r) * lda, b, ldb, beta,
                         cblk + static_cast<std::ptrdiff_t>(r) * ldc);
            }
        }
    }
    for (; i < m; ++i) {
        row_tail(n, 0, k, a + static_cast<std::ptrdiff_t>(i) * lda, b, ldb, beta,
                 c + static_cast<std::ptrdiff_t>(i) * ldc);
    }
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable* avx2_table() {
    static const KernelTable table{Isa::avx2, "avx2", &gemm_avx2, &dot_avx2, &axpy_avx2};
    return &table;
}

}  // namespace dualdiff::kernels

#else

namespace dualdiff::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace dualdiff::kernels

#endif
