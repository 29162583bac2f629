#include "doctest.h"

#include "dualdiff/conditioning.h"
#include "dualdiff/latent_vae.h"
#include "support.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace dualdiff;

namespace {

// Synthetic-corpus spectrograms shrunk to side x side by block averaging, so
// the training-behaviour tests run in seconds.
std::vector<Tensor> small_corpus(int n, int side, std::uint64_t seed) {
    std::vector<Tensor> out;
    const double bpms[] = {90.0, 120.0, 150.0};
    for (int i = 0; i < n; ++i) {
        const auto clip = synth_rhythm_sequence(bpms[i % 3], 5.0, seed + static_cast<std::uint64_t>(i));
        const auto mel = wav_to_mel(clip.audio);
        const int f = mel.bins / side;
        Tensor t({1, side, side});
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                double acc = 0.0;
                for (int a = 0; a < f; ++a)
                    for (int b = 0; b < f; ++b) acc += mel.at(r * f + a, c * f + b);
                t.at(0, r, c) = acc / (f * f);
            }
        out.push_back(std::move(t));
    }
    return out;
}

double mean_mse(const Vae& vae, const std::vector<Tensor>& data) {
    double acc = 0.0;
    for (const auto& x : data) acc += vae.reconstruction_mse(x);
    return acc / static_cast<double>(data.size());
}

}  // namespace

TEST_CASE("default geometry is 256x256 -> 1x32x32") {
    VaeConfig cfg;
    CHECK(cfg.latent_size() == 32);
    CHECK(cfg.latent_shape() == std::vector<int>{1, 32, 32});
    Vae vae(cfg, 3);
    Rng rng(1);
    Tensor x({1, 256, 256});
    for (double& v : x.data()) v = uniform01(rng);
    const auto z = vae.encode(x);
    CHECK(z.shape() == std::vector<int>{1, 32, 32});
    const auto y = vae.decode(z);
    CHECK(y.shape() == std::vector<int>{1, 256, 256});
    CHECK(vae.encode(x).values() == z.values());
    CHECK(vae.decode(z).values() == y.values());
}

TEST_CASE("decoder output stays inside [0,1]") {
    VaeConfig cfg;
    cfg.input_size = 32;
    Vae vae(cfg, 4);
    Rng rng(2);
    for (double s : {0.1, 1.0, 30.0, 1e3}) {
        const auto z = testing::random_tensor(cfg.latent_shape(), rng, s);
        const auto y = vae.decode(z);
        for (double v : y.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("shape errors") {
    VaeConfig cfg;
    cfg.input_size = 32;
    Vae vae(cfg, 5);
    CHECK_THROWS_AS(vae.encode(Tensor({1, 16, 16})), std::invalid_argument);
    CHECK_THROWS_AS(vae.encode(Tensor({2, 32, 32})), std::invalid_argument);
    CHECK_THROWS_AS(vae.decode(Tensor({1, 8, 8})), std::invalid_argument);
    VaeConfig bad;
    bad.input_size = 36;  // not divisible by 8
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_THROWS_AS(train_vae(vae, {}, VaeTrainConfig{}), std::invalid_argument);
}

TEST_CASE("8x8 miniature gradients match finite differences") {
    for (int c : {1, 2}) {
        VaeConfig cfg;
        cfg.input_size = 8;
        cfg.channels = {2, 3, 3, 4};
        cfg.latent_channels = c;
        cfg.kl_weight = 0.05;  // large enough that the KL path is exercised
        Vae vae(cfg, 6);
        Rng rng(3);
        Tensor x({1, 8, 8});
        for (double& v : x.data()) v = uniform01(rng);
        auto vars = vae.params().entries();
        const auto rep = testing::grad_check(vars, [&](ag::Tape& tape) {
            Rng eps_rng(99);  // same reparameterisation noise on every evaluation
            return vae.loss(tape, x, eps_rng).total;
        }, 16, 1e-4);  // gradients here are small; smaller steps are roundoff-bound
        CHECK(rep.groups == static_cast<int>(vars.size()));
        CHECK_MESSAGE(rep.max_rel < 1e-4, rep.worst << " " << rep.max_rel);
    }
}

TEST_CASE("memorises a single spectrogram") {
    const auto data = small_corpus(1, 32, 1);
    VaeConfig cfg;
    cfg.input_size = 32;
    Vae vae(cfg, 7);
    VaeTrainConfig tc;
    tc.epochs = 400;
    tc.batch_size = 1;
    tc.lr = 3e-3;
    tc.lr_floor = 0.1;
    const double before = vae.reconstruction_mse(data[0]);
    train_vae(vae, data, tc);
    const double after = vae.reconstruction_mse(data[0]);
    MESSAGE("single-example MSE " << before << " -> " << after);
    CHECK(after < 1e-3);
    CHECK(after < 0.05 * before);
}

TEST_CASE("training curve and bottleneck direction") {
    const auto train = small_corpus(24, 32, 100);
    const auto held = small_corpus(8, 32, 500);

    auto fit = [&](std::vector<int> channels, double kl) {
        VaeConfig cfg;
        cfg.input_size = 32;
        cfg.channels = std::move(channels);
        cfg.kl_weight = kl;
        Vae vae(cfg, 8);
        VaeTrainConfig tc;
        tc.epochs = 12;
        tc.batch_size = 4;
        tc.lr = 2e-3;
        tc.seed = 1;
        auto hist = train_vae(vae, train, tc);
        return std::pair{mean_mse(vae, held), hist};
    };

    SUBCASE("running-average loss does not increase") {
        const auto [mse, hist] = fit({8, 8, 16, 16}, 1e-6);
        REQUIRE(hist.size() == 12u);
        // Three-epoch running mean, allowing no increase.
        std::vector<double> run;
        for (std::size_t i = 2; i < hist.size(); ++i)
            run.push_back((hist[i].loss + hist[i - 1].loss + hist[i - 2].loss) / 3.0);
        for (std::size_t i = 1; i < run.size(); ++i) CHECK(run[i] <= run[i - 1]);
        CHECK(hist.back().loss < 0.5 * hist.front().loss);
        CHECK(std::isfinite(mse));
    }
    SUBCASE("full-size latent reconstructs better than the 4x4 bottleneck") {
        const auto [bottleneck, h1] = fit({8, 8, 16, 16}, 1e-6);
        const auto [identity, h2] = fit({8}, 0.0);  // latent is 1x32x32, same as the input
        MESSAGE("held-out MSE bottleneck " << bottleneck << " identity-sized " << identity);
        CHECK(identity < bottleneck);
    }
}

TEST_CASE("latent scale and save/load") {
    const auto data = small_corpus(4, 32, 900);
    VaeConfig cfg;
    cfg.input_size = 32;
    Vae vae(cfg, 9);
    VaeTrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    train_vae(vae, data, tc);

    double sum = 0.0, sq = 0.0, n = 0.0;
    for (const auto& x : data) {
        const auto z = vae.encode(x);
        for (double v : z.data()) {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    const double var = sq / n - (sum / n) * (sum / n);
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-9));

    const auto path = std::filesystem::temp_directory_path() / "dualdiff_test_vae.ckpt";
    vae.save(path);
    const auto back = Vae::load(path);
    std::filesystem::remove(path);
    CHECK(back.latent_scale() == vae.latent_scale());
    CHECK(back.config().channels == cfg.channels);
    for (const auto& x : data) {
        CHECK(back.encode(x).values() == vae.encode(x).values());
        CHECK(back.decode(vae.encode(x)).values() == vae.decode(vae.encode(x)).values());
    }
    CHECK_THROWS_AS(vae.set_latent_scale(0.0), std::invalid_argument);
}

TEST_CASE("silence and a click track encode apart") {
    const auto clip = synth_rhythm_sequence(120.0, 5.0, 1);
    Waveform quiet;
    quiet.samples.assign(clip.audio.samples.size(), 0.0);
    VaeConfig cfg;
    Vae vae(cfg, 10);
    const auto a = vae.encode(wav_to_mel(quiet));
    const auto b = vae.encode(wav_to_mel(clip.audio));
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(std::sqrt(d) > 0.0);
}
