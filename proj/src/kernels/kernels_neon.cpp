#include "dualdiff/kernels.h"

#if defined(__aarch64__)
#include <arm_neon.h>

namespace dualdiff::kernels {
namespace {

void gemm_neon(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
               double beta, double* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
        double* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        int j = 0;
        for (; j + 2 <= n; j += 2) {
            float64x2_t acc = vdupq_n_f64(0.0);
            for (int p = 0; p < k; ++p) {
                acc = vfmaq_n_f64(acc, vld1q_f64(b + static_cast<std::ptrdiff_t>(p) * ldb + j),
                                  arow[p]);
            }
            if (beta != 0.0) acc = vfmaq_n_f64(acc, vld1q_f64(crow + j), beta);
            vst1q_f64(crow + j, acc);
        }
        for (; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * b[static_cast<std::ptrdiff_t>(p) * ldb + j];
            crow[j] = (beta == 0.0 ? 0.0 : beta * crow[j]) + s;
        }
    }
}

double dot_neon(const double* x, const double* y, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vfmaq_f64(acc, vld1q_f64(x + i), vld1q_f64(y + i));
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_neon(double alpha, const double* x, double* y, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_n_f64(vld1q_f64(y + i), vld1q_f64(x + i), alpha));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable* neon_table() {
    static const KernelTable table{Isa::neon, "neon", &gemm_neon, &dot_neon, &axpy_neon};
    return &table;
}

}  // namespace dualdiff::kernels

#else

namespace dualdiff::kernels {
const KernelTable* neon_table() { return nullptr; }
}  // namespace dualdiff::kernels

#endif
