#include "dualdiff/kernels.h"

namespace dualdiff::kernels {
namespace {

void gemm_scalar(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (beta == 0.0) {
            for (int j = 0; j < n; ++j) crow[j] = 0.0;
        } else if (beta != 1.0) {
            for (int j = 0; j < n; ++j) crow[j] *= beta;
        }
        const double* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double dot_scalar(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{Isa::scalar, "scalar", &gemm_scalar, &dot_scalar, &axpy_scalar};
    return table;
}

}  // namespace dualdiff::kernels
