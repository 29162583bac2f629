#include "doctest.h"
#include "support.h"

#include "dualdiff/dual_process.h"

#include <cmath>

using namespace dualdiff;
using dualdiff::testing::random_tensor;

namespace {

LatentSample clean(Tensor z) { return {std::move(z), 0, Branch::clean}; }
LatentSample scalar_clean(double v) { return clean(Tensor({1, 1, 1}, {v})); }

}  // namespace

TEST_CASE("worked example: T=3, t=2, z0=1, eps=1") {
    const auto s = build_linear_schedule(3, 0.1, 0.3);
    const auto pair = diffuse_pair(scalar_clean(1.0), 2, NoisePair{Tensor({1, 1, 1}, {1.0})}, s);
    CHECK(pair.positive.z[0] == doctest::Approx(std::sqrt(0.72) + std::sqrt(0.28)).epsilon(1e-14));
    CHECK(pair.negative.z[0] == doctest::Approx(std::sqrt(0.72) - std::sqrt(0.28)).epsilon(1e-14));
    // the commonly quoted decimals (1.37774, 0.31931) are only good to ~4 digits
    CHECK(pair.positive.z[0] == doctest::Approx(1.37774).epsilon(3e-4));
    CHECK(pair.negative.z[0] == doctest::Approx(0.31931).epsilon(3e-4));
    CHECK(pair.positive.branch == Branch::positive);
    CHECK(pair.negative.branch == Branch::negative);
    CHECK(pair.positive.t == 2);
}

TEST_CASE("worked example: posterior mean at t=2") {
    const auto s = build_linear_schedule(3, 0.1, 0.3);
    LatentSample zt{Tensor({1, 1, 1}, {1.0}), 2, Branch::positive};
    const auto out = reverse_step(zt, Tensor({1, 1, 1}, {0.5}), s, nullptr);
    const double mu = (1.0 / std::sqrt(0.8)) * (1.0 - 0.2 / std::sqrt(0.28) * 0.5);
    CHECK(out.z[0] == doctest::Approx(mu).epsilon(1e-14));
    CHECK(out.z[0] == doctest::Approx(0.906745).epsilon(1e-6));
    CHECK(out.z[0] == doctest::Approx(0.90659).epsilon(3e-4));  // quoted value, ~4 digits
    CHECK(out.t == 1);
}

TEST_CASE("mirror invariant and negative-branch equivalence on random draws") {
    const auto s = build_linear_schedule(1000, 1e-4, 0.02);
    Rng rng(11);
    double worst = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const auto z0 = clean(random_tensor({1, 4, 4}, rng));
        const int t = uniform_int(rng, 1, 1000);
        const NoisePair eps{random_tensor({1, 4, 4}, rng)};
        const auto pair = diffuse_pair(z0, t, eps, s);
        const double two_signal = 2.0 * std::sqrt(s.alpha_bar(t));
        const auto via_neg = diffuse(z0, t, eps.negated(), s, Branch::positive);
        for (std::size_t i = 0; i < z0.z.size(); ++i) {
            worst = std::max(worst, std::abs(pair.positive.z[i] + pair.negative.z[i] - two_signal * z0.z[i]));
            CHECK(pair.negative.z[i] == via_neg.z[i]);
            CHECK(eps.negated()[i] == -eps.eps[i]);
        }
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("zero signal gives pure mirrored noise") {
    const auto s = build_linear_schedule(10, 1e-4, 0.02);
    Rng rng(12);
    const NoisePair eps{random_tensor({1, 3, 3}, rng)};
    const auto pair = diffuse_pair(clean(Tensor({1, 3, 3})), 7, eps, s);
    const double k = std::sqrt(1.0 - s.alpha_bar(7));
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(pair.positive.z[i] == doctest::Approx(k * eps.eps[i]).epsilon(1e-15));
        CHECK(pair.negative.z[i] == -pair.positive.z[i]);
    }
}

TEST_CASE("reverse step inverts a one-step diffusion with the true noise") {
    const auto s = build_linear_schedule(1, 0.3, 0.3);
    Rng rng(13);
    const auto z0 = clean(random_tensor({2, 3, 3}, rng));
    const Tensor eps = random_tensor({2, 3, 3}, rng);
    const auto zt = diffuse(z0, 1, eps, s);
    Tensor ignored = random_tensor({2, 3, 3}, rng);
    const auto back = reverse_step(zt, eps, s, &ignored);  // t=1 adds no noise
    for (std::size_t i = 0; i < z0.z.size(); ++i) CHECK(std::abs(back.z[i] - z0.z[i]) < 1e-10);
    CHECK(back.branch == Branch::clean);
    CHECK(back.t == 0);

    LatentSample zero{Tensor({1, 2, 2}), 1, Branch::positive};
    const auto fixed = reverse_step(zero, Tensor({1, 2, 2}), s, nullptr);
    for (double v : fixed.z.values()) CHECK(v == 0.0);
}

TEST_CASE("shape and range errors") {
    const auto s = build_linear_schedule(5, 1e-4, 0.02);
    CHECK_THROWS(diffuse_pair(clean(Tensor({1, 2, 2})), 1, NoisePair{Tensor({1, 3, 3})}, s));
    CHECK_THROWS(diffuse_pair(clean(Tensor({1, 2, 2})), 6, NoisePair{Tensor({1, 2, 2})}, s));
    CHECK_THROWS(diffuse_pair(clean(Tensor({1, 2, 2})), 0, NoisePair{Tensor({1, 2, 2})}, s));
    LatentSample zt{Tensor({1, 2, 2}), 3, Branch::positive};
    CHECK_THROWS(reverse_step(zt, Tensor({1, 2, 3}), s, nullptr));
    zt.t = 9;
    CHECK_THROWS(reverse_step(zt, Tensor({1, 2, 2}), s, nullptr));
}

TEST_CASE("sampler closed forms and determinism") {
    const auto s1 = build_linear_schedule(1, 0.4, 0.4);
    const NoisePredictor zero{[](const Tensor& z, int, std::span<const double>) { return Tensor::zeros_like(z); }, -1};
    const auto out = sample(zero, {}, s1, {1, 2, 2}, 42);
    Rng rng(42);
    Tensor zT({1, 2, 2});
    fill_gaussian(rng, zT.data());
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.z[i] == doctest::Approx(zT[i] / std::sqrt(0.6)).epsilon(1e-15));

    const auto s = build_linear_schedule(20, 1e-3, 0.1);
    const NoisePredictor half{[](const Tensor& z, int, std::span<const double>) {
                                  Tensor e = z;
                                  for (double& v : e.values()) v *= 0.5;
                                  return e;
                              },
                              3};
    const std::vector<double> c{1, 2, 3};
    const auto a = sample(half, c, s, {1, 4, 4}, 7), b = sample(half, c, s, {1, 4, 4}, 7);
    CHECK(a.z.values() == b.z.values());
    CHECK(a.branch == Branch::clean);
    CHECK_THROWS(sample(half, std::vector<double>{1, 2}, s, {1, 4, 4}, 7));  // wrong conditioning size
}

TEST_CASE("respaced chain keeps the cumulative products") {
    const auto s = build_linear_schedule(200, 1e-4, 0.02);
    const auto r = respace(s, 50);
    REQUIRE(r.timesteps.size() == 50);
    CHECK(r.timesteps.front() == 1);
    CHECK(r.timesteps.back() == 200);
    for (int i = 1; i <= 50; ++i) {
        CHECK(r.chain.alpha_bar(i) == doctest::Approx(s.alpha_bar(r.timesteps[static_cast<std::size_t>(i - 1)])).epsilon(1e-13));
    }
    CHECK(respace(s, 200).chain.betas() == s.betas());
    CHECK_THROWS(respace(s, 201));
}

TEST_CASE("sampling a 1-D Gaussian with its analytic noise predictor") {
    // data ~ N(m, v): E[eps | z_t] = sqrt(1-abar) (z_t - sqrt(abar) m) / (abar v + 1 - abar)
    const double m = 1.5, v = 0.25;
    const auto s = build_linear_schedule(100, 1e-4, 0.2);
    const NoisePredictor oracle{[&](const Tensor& z, int t, std::span<const double>) {
                                    const double ab = s.alpha_bar(t);
                                    Tensor e = z;
                                    e[0] = std::sqrt(1.0 - ab) * (z[0] - std::sqrt(ab) * m) / (ab * v + 1.0 - ab);
                                    return e;
                                },
                                -1};
    const int n = 10000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = sample(oracle, {}, s, {1, 1, 1}, 1000 + i).z[0];
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    const double se = std::sqrt(var / n);
    CHECK(std::abs(mean - m) < 3.0 * se);
}

TEST_CASE("stepwise chain matches the closed-form marginal (T=50)") {
    const auto s = build_linear_schedule(50, 1e-4, 0.02);
    const Tensor z0({1, 1, 2}, {0.8, -1.3});
    const int n = 10000;
    Rng rng(21);
    for (Branch br : {Branch::positive, Branch::negative}) {
        for (int t : {1, 25, 50}) {
            std::vector<double> sum(2, 0.0), sq(2, 0.0);
            for (int trial = 0; trial < n; ++trial) {
                LatentSample z{z0, 0, Branch::clean};
                Tensor noise({1, 1, 2});
                for (int k = 1; k <= t; ++k) {
                    fill_gaussian(rng, noise.data());
                    z = forward_step(z, noise, s, br);
                }
                for (int i = 0; i < 2; ++i) {
                    sum[i] += z.z[i];
                    sq[i] += z.z[i] * z.z[i];
                }
            }
            const auto [sig, noi] = marginal_coeffs(s, t);
            for (int i = 0; i < 2; ++i) {
                const double mean = sum[i] / n;
                const double var = (sq[i] - n * mean * mean) / (n - 1);
                const double want_var = noi * noi;
                CHECK(std::abs(mean - sig * z0[i]) < 3.0 * std::sqrt(want_var / n));
                CHECK(std::abs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / (n - 1)));
            }
        }
    }
}
