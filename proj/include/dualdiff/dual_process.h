#pragma once

// Paired forward diffusions sharing a clean start z0: the positive chain is
// perturbed by +eps and the negative chain by the mirrored draw -eps. Both
// are undone by the same DDPM posterior-mean reverse step.

#include "dualdiff/schedule.h"
#include "dualdiff/tensor.h"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace dualdiff {

enum class Branch { clean, positive, negative };

struct LatentSample {
    Tensor z;  // [C, H, W]
    int t = 0;
    Branch branch = Branch::clean;
};

// A single Gaussian draw and its exact mirror.
struct NoisePair {
    Tensor eps;
    Tensor negated() const;
};

struct DiffusedPair {
    LatentSample positive;
    LatentSample negative;
};

// z_t = sqrt(abar_t) z0 + sign * sqrt(1 - abar_t) eps
LatentSample diffuse(const LatentSample& z0, int t, const Tensor& eps, const NoiseSchedule& s,
                     Branch branch = Branch::positive);

DiffusedPair diffuse_pair(const LatentSample& z0, int t, const NoisePair& eps, const NoiseSchedule& s);

// One step of the Markov chain: sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise.
// The negative branch adds the mirrored noise.
LatentSample forward_step(const LatentSample& prev, const Tensor& noise, const NoiseSchedule& s,
                          Branch branch);

// z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(a_t) + sqrt(beta_t) * noise.
// `noise` is ignored at t = 1 and may be null for a deterministic (mean) step.
LatentSample reverse_step(const LatentSample& zt, const Tensor& eps_pred, const NoiseSchedule& s,
                          const Tensor* noise);

struct NoisePredictor {
    std::function<Tensor(const Tensor& z, int t, std::span<const double> cond)> fn;
    int cond_dim = -1;  // -1 accepts any length
};

// Evenly spaced subsequence of timesteps 1 <= tau_1 < ... < tau_n = T, with
// the matching chain whose cumulative products equal abar at those steps.
struct RespacedSchedule {
    NoiseSchedule chain;
    std::vector<int> timesteps;  // original timestep for each chain step
};
RespacedSchedule respace(const NoiseSchedule& s, int steps);

// Ancestral sampling from z_T ~ N(0, I). `steps` = 0 runs the full chain;
// fewer steps run the respaced chain. Deterministic given the seed.
LatentSample sample(const NoisePredictor& denoiser, std::span<const double> cond,
                    const NoiseSchedule& s, const std::vector<int>& shape, std::uint64_t seed,
                    int steps = 0, Branch branch = Branch::positive);

}  // namespace dualdiff
