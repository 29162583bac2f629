#include "doctest.h"
#include "support.h"

#include "dualdiff/kernels.h"

#include <cmath>
#include <vector>

using namespace dualdiff;
namespace k = dualdiff::kernels;

namespace {

std::vector<const k::KernelTable*> simd_tables() {
    std::vector<const k::KernelTable*> out;
    if (k::cpu_supports(k::Isa::avx2) && k::avx2_table()) out.push_back(k::avx2_table());
    if (k::cpu_supports(k::Isa::neon) && k::neon_table()) out.push_back(k::neon_table());
    return out;
}

// Textbook triple loop, independent of both kernel tables.
void naive_gemm(int m, int n, int kk, const double* a, int lda, const double* b, int ldb, double beta, double* c,
                int ldc) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            long double s = 0.0L;
            for (int p = 0; p < kk; ++p) s += static_cast<long double>(a[i * lda + p]) * b[p * ldb + j];
            c[i * ldc + j] = (beta == 0.0 ? 0.0 : beta * c[i * ldc + j]) + static_cast<double>(s);
        }
    }
}

}  // namespace

TEST_CASE("scalar gemm matches a naive product") {
    Rng rng(1);
    for (auto [m, n, kk] : std::vector<std::tuple<int, int, int>>{{1, 1, 1}, {3, 5, 7}, {17, 9, 33}, {64, 65, 31}}) {
        std::vector<double> a(static_cast<std::size_t>(m) * kk), b(static_cast<std::size_t>(kk) * n);
        fill_gaussian(rng, a);
        fill_gaussian(rng, b);
        std::vector<double> c1(static_cast<std::size_t>(m) * n), c2;
        fill_gaussian(rng, c1);
        c2 = c1;
        k::scalar_table().gemm(m, n, kk, a.data(), kk, b.data(), n, 0.5, c1.data(), n);
        naive_gemm(m, n, kk, a.data(), kk, b.data(), n, 0.5, c2.data(), n);
        for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-12));
    }
}

TEST_CASE("beta = 0 ignores garbage in C") {
    const double a[2] = {1, 2}, b[2] = {3, 4};
    double c[1] = {std::nan("")};
    k::scalar_table().gemm(1, 1, 2, a, 2, b, 1, 0.0, c, 1);
    CHECK(c[0] == 11.0);
    for (const auto* t : simd_tables()) {
        c[0] = std::nan("");
        t->gemm(1, 1, 2, a, 2, b, 1, 0.0, c, 1);
        CHECK(c[0] == 11.0);
    }
}

TEST_CASE("SIMD kernels agree with the scalar reference") {
    const auto tables = simd_tables();
    if (tables.empty()) {
        MESSAGE("no SIMD variant available on this CPU; nothing to compare");
        return;
    }
    Rng rng(2);
    const auto& ref = k::scalar_table();
    for (const auto* t : tables) {
        CAPTURE(t->name);
        // odd sizes exercise every remainder path
        for (int m : {1, 2, 3, 4, 5, 7, 8, 13, 32}) {
            for (int n : {1, 3, 4, 5, 8, 9, 16, 31, 67}) {
                for (int kk : {1, 2, 7, 16, 33}) {
                    const int lda = kk + 3, ldb = n + 2, ldc = n + 1;
                    std::vector<double> a(static_cast<std::size_t>(m) * lda), b(static_cast<std::size_t>(kk) * ldb);
                    std::vector<double> c(static_cast<std::size_t>(m) * ldc);
                    fill_gaussian(rng, a);
                    fill_gaussian(rng, b);
                    fill_gaussian(rng, c);
                    for (double beta : {0.0, 1.0, -0.25}) {
                        auto c1 = c, c2 = c;
                        ref.gemm(m, n, kk, a.data(), lda, b.data(), ldb, beta, c1.data(), ldc);
                        t->gemm(m, n, kk, a.data(), lda, b.data(), ldb, beta, c2.data(), ldc);
                        double worst = 0.0;
                        for (int i = 0; i < m; ++i) {
                            for (int j = 0; j < ldc; ++j) {
                                const std::size_t q = static_cast<std::size_t>(i) * ldc + j;
                                if (j >= n) {
                                    CHECK(c2[q] == c[q]);  // padding columns untouched
                                    continue;
                                }
                                worst = std::max(worst, std::abs(c1[q] - c2[q]) / (1.0 + std::abs(c1[q])));
                            }
                        }
                        CHECK(worst < 1e-12);
                    }
                }
            }
        }
        for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 16u, 1001u}) {
            std::vector<double> x(n), y(n);
            fill_gaussian(rng, x);
            fill_gaussian(rng, y);
            double mag = 0.0;
            for (std::size_t i = 0; i < n; ++i) mag += std::abs(x[i] * y[i]);
            CHECK(std::abs(ref.dot(x.data(), y.data(), n) - t->dot(x.data(), y.data(), n)) <= 1e-14 * (1.0 + mag) * 8);
            auto y1 = y, y2 = y;
            ref.axpy(0.37, x.data(), y1.data(), n);
            t->axpy(0.37, x.data(), y2.data(), n);
            for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-15 * (1.0 + std::abs(y1[i])) * 4);
        }
    }
}

TEST_CASE("runtime selection") {
    const auto& before = k::active();
    k::select(k::Isa::scalar);
    CHECK(k::active().isa == k::Isa::scalar);
    if (!k::cpu_supports(k::Isa::neon)) CHECK_THROWS_AS(k::select(k::Isa::neon), std::runtime_error);
    k::select(before.isa);
    CHECK(k::active().isa == before.isa);
    CHECK(k::isa_name(k::Isa::avx2) == "avx2");
}
