#include "doctest.h"

#include "dualdiff/denoiser.h"
#include "support.h"

#include <cmath>
#include <set>

using namespace dualdiff;

namespace {

DenoiserConfig mini(bool column, bool attention) {
    DenoiserConfig cfg;
    cfg.latent_size = 8;
    cfg.channels = {2, 3, 3, 4};
    cfg.cond_dim = 16;
    cfg.time_dim = 8;
    cfg.embed_dim = 6;
    cfg.attention_dim = 3;
    cfg.column_conditioning = column;
    cfg.cross_attention = attention;
    return cfg;
}

}  // namespace

TEST_CASE("time embedding") {
    SUBCASE("t = 0 alternates 0, 1") {
        const auto e = time_embed(0.0, 32);
        for (int i = 0; i < 32; ++i) CHECK(e[i] == (i % 2 == 0 ? 0.0 : 1.0));
        const auto odd = time_embed(0.0, 7);
        CHECK(odd[6] == 0.0);
    }
    SUBCASE("closed form") {
        const auto e = time_embed(37.0, 8);
        for (int i = 0; i < 4; ++i) {
            const double f = std::pow(10000.0, -i / 4.0);
            CHECK(e[2 * i] == doctest::Approx(std::sin(37.0 * f)).epsilon(1e-15));
            CHECK(e[2 * i + 1] == doctest::Approx(std::cos(37.0 * f)).epsilon(1e-15));
        }
    }
    SUBCASE("distinct over 1..1000 and bounded by sqrt(dim)") {
        for (int dim : {2, 8, 32}) {
            std::vector<std::vector<double>> all;
            for (int t = 1; t <= 1000; ++t) {
                all.push_back(time_embed(t, dim));
                double n2 = 0.0;
                for (double v : all.back()) n2 += v * v;
                CHECK(std::sqrt(n2) <= std::sqrt(static_cast<double>(dim)) + 1e-12);
            }
            double closest = 1e300;
            for (std::size_t a = 0; a < all.size(); ++a)
                for (std::size_t b = a + 1; b < all.size(); ++b) {
                    double d = 0.0;
                    for (int k = 0; k < dim; ++k) d += (all[a][k] - all[b][k]) * (all[a][k] - all[b][k]);
                    closest = std::min(closest, d);
                }
            MESSAGE("dim " << dim << " closest squared distance " << closest);
            // dim 2 is (sin t, cos t): injective because 2*pi is irrational, but
            // 710 ~ 113 * 2*pi brings t and t + 710 close. Wider embeddings separate well.
            CHECK(closest > 0.0);
            if (dim >= 8) CHECK(closest > 0.1);
        }
    }
    CHECK_THROWS_AS(time_embed(-1.0, 8), std::invalid_argument);
}

TEST_CASE("shape contract and determinism") {
    DenoiserConfig cfg;  // desk defaults
    ParamStore store;
    Rng rng(1);
    Denoiser net(cfg, store, rng);
    const auto z = testing::random_tensor({1, 32, 32}, rng);
    std::vector<double> c(96);
    fill_gaussian(rng, c);
    for (int t : {1, 500, 1000}) {
        const auto a = net.predict(z, t, c);
        CHECK(a.shape() == z.shape());
        for (double v : a.data()) CHECK(std::isfinite(v));
        CHECK(net.predict(z, t, c).values() == a.values());
    }
    CHECK_THROWS_AS(net.predict(Tensor({1, 16, 16}), 1, c), std::invalid_argument);
    CHECK_THROWS_AS(net.predict(z, 1, std::vector<double>(95)), std::invalid_argument);
    DenoiserConfig bad;
    bad.cond_dim = 100;  // not a multiple of the latent width
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = DenoiserConfig{};
    bad.latent_size = 12;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("conditioning reaches the output") {
    for (auto [column, attention] : {std::pair{true, false}, std::pair{false, false}, std::pair{false, true},
                                     std::pair{true, true}}) {
        CAPTURE(column);
        CAPTURE(attention);
        const auto cfg = mini(column, attention);
        ParamStore store;
        Rng rng(2);
        Denoiser net(cfg, store, rng);
        const auto z = testing::random_tensor({1, 8, 8}, rng);
        const auto eps = testing::random_tensor({1, 8, 8}, rng);
        auto c = ag::leaf(testing::random_tensor({16}, rng), true);
        ag::Tape tape;
        tape.backward(ag::mse(tape, net.forward(tape, ag::leaf(z), 40, c), eps));
        double g2 = 0.0;
        for (double g : c->grad.data()) g2 += g * g;
        CHECK(std::sqrt(g2) > 1e-8);

        std::vector<double> c2(c->value.values());
        c2[3] += 0.5;
        const auto a = net.predict(z, 40, c->value.values());
        const auto b = net.predict(z, 40, c2);
        CHECK(a.values() != b.values());
    }
}

TEST_CASE("miniature gradients match finite differences") {
    for (auto [column, attention] : {std::pair{true, false}, std::pair{false, true}, std::pair{true, true}}) {
        CAPTURE(column);
        CAPTURE(attention);
        const auto cfg = mini(column, attention);
        ParamStore store;
        Rng rng(3);
        Denoiser net(cfg, store, rng);
        // Biases start at zero; give them values so their paths are generic.
        for (auto& [name, v] : store.entries()) {
            if (name.ends_with(".b")) fill_gaussian(rng, v->value.data(), 0.2);
        }
        auto z = ag::leaf(testing::random_tensor({1, 8, 8}, rng));
        auto c = ag::leaf(testing::random_tensor({16}, rng));
        const auto eps = testing::random_tensor({1, 8, 8}, rng);
        auto vars = store.entries();
        vars.emplace_back("z_t", z);
        vars.emplace_back("c", c);
        const auto rep = testing::grad_check(vars, [&](ag::Tape& tape) {
            return ag::mse(tape, net.forward(tape, z, 17, c), eps);
        }, 16, 1e-4, 7, 1e-6);  // some deep-layer groups have gradients ~1e-10
        CHECK(rep.groups == static_cast<int>(vars.size()));
        CHECK_MESSAGE(rep.max_rel < 1e-4, rep.worst << " " << rep.max_rel);
    }
}

TEST_CASE("one parameter set serves both branches") {
    const auto cfg = mini(true, true);
    ParamStore store;
    Rng rng(4);
    Denoiser net(cfg, store, rng);
    std::set<std::string> names;
    for (const auto& [name, v] : store.entries()) {
        CHECK(name.rfind("denoiser.", 0) == 0);
        CHECK(name.find("pos") == std::string::npos);
        CHECK(name.find("neg") == std::string::npos);
        CHECK(names.insert(name).second);
    }
    // Gradients from c+ and c- accumulate into the same tensors.
    const auto z = testing::random_tensor({1, 8, 8}, rng);
    const auto eps = testing::random_tensor({1, 8, 8}, rng);
    const auto cp = testing::random_tensor({16}, rng);
    Tensor cn = cp;
    for (double& v : cn.values()) v = -v;
    auto grads = [&](std::vector<const Tensor*> conds) {
        store.zero_grad();
        for (auto& [n, v] : store.entries()) v->requires_grad = true;
        for (const Tensor* c : conds) {
            ag::Tape tape;
            tape.backward(ag::mse(tape, net.forward(tape, ag::leaf(z), 5, ag::leaf(*c)), eps));
        }
        std::vector<double> g;
        for (auto& [n, v] : store.entries())
            for (double x : v->grad.data()) g.push_back(x);
        return g;
    };
    const auto gp = grads({&cp});
    const auto gn = grads({&cn});
    const auto both = grads({&cp, &cn});
    for (std::size_t i = 0; i < both.size(); ++i) CHECK(both[i] == doctest::Approx(gp[i] + gn[i]).epsilon(1e-12));

    // Rebinding to the same store reproduces the network exactly.
    Denoiser again(cfg, store);
    const auto cv = cp.values();
    CHECK(again.predict(z, 9, cv).values() == net.predict(z, 9, cv).values());
    CHECK_THROWS_AS(Denoiser(mini(false, true), store), std::invalid_argument);
}
