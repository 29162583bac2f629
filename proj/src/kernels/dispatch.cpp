#include "dualdiff/kernels.h"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dualdiff::kernels {
namespace {

const KernelTable* table_for(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return &scalar_table();
        case Isa::avx2:
            return avx2_table();
        case Isa::neon:
            return neon_table();
    }
    return nullptr;
}

const KernelTable* detect() {
    if (const char* env = std::getenv("DUALDIFF_SIMD")) {
        const std::string want(env);
        for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
            if (want == isa_name(isa) && cpu_supports(isa)) return table_for(isa);
        }
    }
    if (cpu_supports(Isa::avx2)) return avx2_table();
    if (cpu_supports(Isa::neon)) return neon_table();
    return &scalar_table();
}

std::atomic<const KernelTable*> current{nullptr};

}  // namespace

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return "scalar";
        case Isa::avx2:
            return "avx2";
        case Isa::neon:
            return "neon";
    }
    return "unknown";
}

bool cpu_supports(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
            return avx2_table() != nullptr && __builtin_cpu_supports("avx2") &&
                   __builtin_cpu_supports("fma");
#else
            return false;
#endif
        case Isa::neon:
            return neon_table() != nullptr;
    }
    return false;
}

const KernelTable& active() {
    const KernelTable* t = current.load(std::memory_order_acquire);
    if (t == nullptr) {
        t = detect();
        current.store(t, std::memory_order_release);
    }
    return *t;
}

void select(Isa isa) {
    if (!cpu_supports(isa)) {
        throw std::runtime_error("kernel variant '" + std::string(isa_name(isa)) +
                                 "' is not available on this machine");
    }
    current.store(table_for(isa), std::memory_order_release);
}

void keep_large_allocations() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace dualdiff::kernels
