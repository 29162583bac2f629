#pragma once

// Dense double-precision inner loops used by the network layers. Every kernel
// has a portable scalar reference; SIMD variants (AVX2+FMA on x86-64, NEON on
// AArch64) are chosen once at runtime and must agree with the reference to
// rounding.

#include <cstddef>
#include <span>
#include <string_view>

namespace dualdiff::kernels {

enum class Isa { scalar, avx2, neon };

struct KernelTable {
    Isa isa;
    const char* name;
    // C[m x n] = beta * C + A[m x k] * B[k x n], all row-major with leading
    // dimensions. beta == 0 overwrites C without reading it.
    void (*gemm)(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc);
    double (*dot)(const double* x, const double* y, std::size_t n);
    // y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the variant was not compiled into this binary.
const KernelTable* avx2_table();
const KernelTable* neon_table();

bool cpu_supports(Isa isa);

// The table every caller goes through. Chosen on first use: DUALDIFF_SIMD
// (scalar|avx2|neon) overrides, otherwise the widest supported variant wins.
const KernelTable& active();

// Force a variant; throws std::runtime_error if it is unavailable here.
void select(Isa isa);

std::string_view isa_name(Isa isa);

// Asks the C allocator to keep large freed blocks instead of returning them to
// the OS; im2col buffers are reallocated on every layer call. No-op off glibc.
void keep_large_allocations();

inline void gemm(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
    active().gemm(m, n, k, a, lda, b, ldb, beta, c, ldc);
}

inline double dot(std::span<const double> x, std::span<const double> y) {
    return active().dot(x.data(), y.data(), x.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    active().axpy(alpha, x.data(), y.data(), x.size());
}

}  // namespace dualdiff::kernels
