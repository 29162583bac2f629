#include "dualdiff/dual_process.h"

#include "dualdiff/random.h"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dualdiff {

Tensor NoisePair::negated() const {
    Tensor out = eps;
    for (double& v : out.values()) v = -v;
    return out;
}

LatentSample diffuse(const LatentSample& z0, int t, const Tensor& eps, const NoiseSchedule& s,
                     Branch branch) {
    if (z0.branch != Branch::clean) throw std::invalid_argument("diffuse: z0 must be a clean latent");
    if (branch == Branch::clean) throw std::invalid_argument("diffuse: target branch must be noisy");
    require_same_shape(z0.z, eps, "diffuse");
    const auto [signal, noise] = marginal_coeffs(s, t);
    LatentSample out{Tensor(z0.z.shape()), t, branch};
    const auto& zs = z0.z.values();
    const auto& es = eps.values();
    auto& os = out.z.values();
    if (branch == Branch::positive) {
        for (std::size_t i = 0; i < os.size(); ++i) os[i] = signal * zs[i] + noise * es[i];
    } else {
        for (std::size_t i = 0; i < os.size(); ++i) os[i] = signal * zs[i] - noise * es[i];
    }
    return out;
}

DiffusedPair diffuse_pair(const LatentSample& z0, int t, const NoisePair& eps, const NoiseSchedule& s) {
    return {diffuse(z0, t, eps.eps, s, Branch::positive), diffuse(z0, t, eps.eps, s, Branch::negative)};
}

LatentSample forward_step(const LatentSample& prev, const Tensor& noise, const NoiseSchedule& s,
                          Branch branch) {
    require_same_shape(prev.z, noise, "forward_step");
    if (branch == Branch::clean) throw std::invalid_argument("forward_step: target branch must be noisy");
    const int t = prev.t + 1;
    const double keep = std::sqrt(1.0 - s.beta(t));
    const double add = (branch == Branch::positive ? 1.0 : -1.0) * std::sqrt(s.beta(t));
    LatentSample out{Tensor(prev.z.shape()), t, branch};
    for (std::size_t i = 0; i < out.z.size(); ++i) out.z[i] = keep * prev.z[i] + add * noise[i];
    return out;
}

LatentSample reverse_step(const LatentSample& zt, const Tensor& eps_pred, const NoiseSchedule& s,
                          const Tensor* noise) {
    require_same_shape(zt.z, eps_pred, "reverse_step");
    const int t = zt.t;
    const double beta = s.beta(t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double eps_coeff = beta / std::sqrt(1.0 - s.alpha_bar(t));
    const bool add_noise = t > 1 && noise != nullptr;
    if (add_noise) require_same_shape(zt.z, *noise, "reverse_step noise");
    const double sigma = std::sqrt(beta);
    LatentSample out{Tensor(zt.z.shape()), t - 1, t - 1 == 0 ? Branch::clean : zt.branch};
    for (std::size_t i = 0; i < out.z.size(); ++i) {
        double v = inv_sqrt_alpha * (zt.z[i] - eps_coeff * eps_pred[i]);
        if (add_noise) v += sigma * (*noise)[i];
        out.z[i] = v;
    }
    return out;
}

RespacedSchedule respace(const NoiseSchedule& s, int steps) {
    const int total = s.steps();
    if (steps < 1 || steps > total) {
        throw std::invalid_argument("sampler steps " + std::to_string(steps) + " outside [1, " +
                                    std::to_string(total) + "]");
    }
    RespacedSchedule r;
    if (steps == total) {
        r.chain = s;
        for (int t = 1; t <= total; ++t) r.timesteps.push_back(t);
        return r;
    }
    for (int i = 0; i < steps; ++i) {
        const int tau = steps == 1 ? total
                                   : 1 + static_cast<int>(std::lround(static_cast<double>(i) *
                                                                      (total - 1) / (steps - 1)));
        r.timesteps.push_back(tau);
    }
    std::vector<double> betas;
    double prev = 1.0;
    for (int tau : r.timesteps) {
        const double ab = s.alpha_bar(tau);
        betas.push_back(1.0 - ab / prev);
        prev = ab;
    }
    r.chain = schedule_from_betas(std::move(betas));
    return r;
}

LatentSample sample(const NoisePredictor& denoiser, std::span<const double> cond,
                    const NoiseSchedule& s, const std::vector<int>& shape, std::uint64_t seed,
                    int steps, Branch branch) {
    if (!denoiser.fn) throw std::invalid_argument("sample: empty denoiser");
    if (denoiser.cond_dim >= 0 && static_cast<int>(cond.size()) != denoiser.cond_dim) {
        throw std::invalid_argument("sample: conditioning has " + std::to_string(cond.size()) +
                                    " values, denoiser expects " + std::to_string(denoiser.cond_dim));
    }
    const RespacedSchedule plan = respace(s, steps == 0 ? s.steps() : steps);
    Rng rng(seed);
    LatentSample z{Tensor(shape), plan.chain.steps(), branch};
    fill_gaussian(rng, z.z.data());
    Tensor noise(shape);
    for (int i = plan.chain.steps(); i >= 1; --i) {
        z.t = i;
        Tensor eps = denoiser.fn(z.z, plan.timesteps[static_cast<std::size_t>(i - 1)], cond);
        if (!eps.all_finite()) throw std::runtime_error("sample: denoiser produced non-finite values");
        if (i > 1) fill_gaussian(rng, noise.data());
        z = reverse_step(z, eps, plan.chain, i > 1 ? &noise : nullptr);
    }
    return z;
}

}  // namespace dualdiff
