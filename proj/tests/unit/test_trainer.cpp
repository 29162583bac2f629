#include "doctest.h"

#include "dualdiff/trainer.h"
#include "support.h"

#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace dualdiff;

namespace {

FeatureSequence random_sequence(int frames, int dim, int joints, Rng& rng) {
    FeatureSequence s;
    s.num_frames = frames;
    s.visual_dim = dim;
    s.joints = joints;
    s.frames.resize(static_cast<std::size_t>(frames) * dim);
    s.poses.resize(static_cast<std::size_t>(frames) * joints * 2);
    fill_gaussian(rng, s.frames);
    fill_gaussian(rng, s.poses);
    return s;
}

// Miniature encoder + denoiser sharing one store, for the loss-level tests.
struct Mini {
    ConditioningConfig ccfg;
    DenoiserConfig dcfg;
    ParamStore store;
    std::unique_ptr<ConditionEncoder> enc;
    std::unique_ptr<Denoiser> net;
    NoiseSchedule sched = build_linear_schedule(50, 1e-4, 0.2);
    FeatureSequence seq;
    Tensor z0;

    explicit Mini(std::uint64_t seed = 1) {
        ccfg.visual_dim = 6;
        ccfg.joints = 4;
        ccfg.segments = 8;
        ccfg.kernel = 3;
        ccfg.visual_hidden = 3;
        ccfg.motion_hidden = 3;
        dcfg.latent_size = 8;
        dcfg.channels = {2, 3};
        dcfg.cond_dim = ccfg.cond_dim();  // 24
        dcfg.time_dim = 6;
        dcfg.embed_dim = 5;
        Rng rng(seed);
        enc = std::make_unique<ConditionEncoder>(ccfg, store, rng);
        net = std::make_unique<Denoiser>(dcfg, store, rng);
        for (auto& [name, v] : store.entries()) {
            if (name.ends_with("b1") || name.ends_with("b2") || name.ends_with("b3") || name.ends_with(".b"))
                fill_gaussian(rng, v->value.data(), 0.2);
        }
        seq = random_sequence(16, 6, 4, rng);
        z0 = testing::random_tensor({1, 8, 8}, rng);
    }

    NoisePair noise(std::uint64_t seed) const {
        Rng rng(seed);
        NoisePair n{Tensor({1, 8, 8})};
        fill_gaussian(rng, n.eps.data());
        return n;
    }
};

std::vector<double> flat_grads(const ParamStore& store) {
    std::vector<double> g;
    for (const auto& [n, v] : store.entries()) {
        if (v->grad.empty()) {
            g.insert(g.end(), v->value.size(), 0.0);
        } else {
            g.insert(g.end(), v->grad.data().begin(), v->grad.data().end());
        }
    }
    return g;
}

// Small end-to-end setup: a real (untrained) VAE on 256x256 spectrograms with
// a tiny denoiser, so Trainer/Generator run in seconds.
struct Corpus {
    Vae vae{VaeConfig{256, 1, {2, 2, 2, 2}, 1e-6}, 5};
    std::vector<TrainExample> data;
    AudioRange range;

    explicit Corpus(int n) {
        double lo = 0.0, hi = 0.0;
        const double bpms[] = {90.0, 120.0, 150.0};
        for (int i = 0; i < n; ++i) {
            const auto clip = synth_rhythm_sequence(bpms[i % 3], 5.0, 300 + static_cast<std::uint64_t>(i));
            const auto mel = wav_to_mel(clip.audio);
            data.push_back({"c" + std::to_string(i), vae.encode(mel), clip.seq});
            lo += mel.log_min;
            hi += mel.log_max;
        }
        range = {lo / n, hi / n};
    }

    TrainConfig config() const {
        TrainConfig cfg;
        cfg.diffusion_steps = 100;
        cfg.beta_end = 0.05;
        cfg.batch_size = 4;
        cfg.lr = 1e-3;
        cfg.epochs = 4;
        cfg.seed = 77;
        cfg.denoiser.channels = {4, 4};
        cfg.denoiser.time_dim = 8;
        cfg.denoiser.embed_dim = 8;
        return cfg;
    }
};

std::vector<double> losses(const std::vector<StepRecord>& r) {
    std::vector<double> out;
    for (const auto& s : r) out.push_back(s.loss);
    return out;
}

}  // namespace

TEST_CASE("loss is the alpha blend of the two branch losses") {
    Mini m;
    const auto eps = m.noise(3);
    for (int t : {1, 17, 50}) {
        ag::Tape tape;
        Rng rng(0);
        const auto cond = condition_vars(tape, *m.enc, m.seq, CondVariant::reverse, rng);
        const double lp = bidirectional_loss(tape, *m.net, m.z0, cond, t, eps, m.sched, 1.0).loss;
        const double ln = bidirectional_loss(tape, *m.net, m.z0, cond, t, eps, m.sched, 0.0).loss;
        for (int k = 0; k <= 10; ++k) {
            const double a = k / 10.0;
            const auto lb = bidirectional_loss(tape, *m.net, m.z0, cond, t, eps, m.sched, a);
            CHECK(std::abs(lb.loss - (a * lp + (1.0 - a) * ln)) <= 1e-12);
            CHECK(lb.pos.has_value() == (a > 0.0));
            CHECK(lb.neg.has_value() == (a < 1.0));
        }
    }
}

TEST_CASE("alpha = 1 is the single-branch DDPM loss, bit for bit") {
    Mini m;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto eps = m.noise(seed);
        const int t = 7 + static_cast<int>(seed) * 11;
        ag::Tape tape;
        Rng rng(0);
        const auto cond = condition_vars(tape, *m.enc, m.seq, CondVariant::none, rng);
        const double dual = bidirectional_loss(tape, *m.net, m.z0, cond, t, eps, m.sched, 1.0).loss;

        // Plain DDPM: z_t = sqrt(abar) z0 + sqrt(1 - abar) eps, loss = mean (eps - eps_theta)^2.
        Tensor zt({1, 8, 8});
        const double ab = m.sched.alpha_bar(t);
        for (std::size_t i = 0; i < zt.size(); ++i) zt[i] = std::sqrt(ab) * m.z0[i] + std::sqrt(1.0 - ab) * eps.eps[i];
        const Tensor pred = m.net->forward(tape, ag::leaf(zt), t, cond.pos)->value;
        double single = 0.0;
        for (std::size_t i = 0; i < zt.size(); ++i) single += (eps.eps[i] - pred[i]) * (eps.eps[i] - pred[i]);
        single /= static_cast<double>(zt.size());
        CHECK(std::bit_cast<std::uint64_t>(dual) == std::bit_cast<std::uint64_t>(single));
    }
}

TEST_CASE("a perfect noise oracle scores zero for every alpha") {
    Mini m;
    // Inverts the forward marginal: (z_t - sqrt(abar) z0) / sqrt(1 - abar). It
    // returns +eps on the positive chain and -eps on the mirrored one.
    const NoiseModel oracle = [&](ag::Tape&, const ag::Var& z, int t, const ag::Var&) {
        const double ab = m.sched.alpha_bar(t);
        Tensor out(z->value.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (z->value[i] - std::sqrt(ab) * m.z0[i]) / std::sqrt(1.0 - ab);
        return ag::leaf(std::move(out));
    };
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto eps = m.noise(seed);
        for (int k = 0; k <= 10; ++k) {
            ag::Tape tape;
            Rng rng(0);
            const auto cond = condition_vars(tape, *m.enc, m.seq, CondVariant::reverse, rng);
            const auto lb = bidirectional_loss(tape, oracle, m.z0, cond, 5 + 9 * static_cast<int>(seed), eps, m.sched, k / 10.0);
            CHECK(lb.loss <= 1e-24);
        }
    }
}

TEST_CASE("parameter gradient is linear in alpha") {
    Mini m;
    const auto eps = m.noise(9);
    auto grads_at = [&](double a) {
        m.store.zero_grad();
        ag::Tape tape;
        Rng rng(0);
        const auto cond = condition_vars(tape, *m.enc, m.seq, CondVariant::reverse, rng);
        tape.backward(bidirectional_loss(tape, *m.net, m.z0, cond, 23, eps, m.sched, a).total);
        return flat_grads(m.store);
    };
    for (auto& [n, v] : m.store.entries()) v->requires_grad = true;
    const auto gp = grads_at(1.0);
    const auto gn = grads_at(0.0);
    double scale = 0.0;
    for (std::size_t i = 0; i < gp.size(); ++i) scale = std::max({scale, std::abs(gp[i]), std::abs(gn[i])});
    for (double a : {0.1, 0.25, 0.5, 0.9}) {
        const auto g = grads_at(a);
        double worst = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(g[i] - (a * gp[i] + (1.0 - a) * gn[i])));
        CHECK(worst <= 1e-8 * scale);
    }
}

TEST_CASE("alpha = 0 sends no gradient to the positive conditioning") {
    Mini m;
    const auto eps = m.noise(4);
    ag::Tape tape;
    ConditionVars cond;
    cond.pos = ag::leaf(Tensor({24}, std::vector<double>(m.enc->encode(m.seq))), true);
    cond.neg = ag::leaf(Tensor({24}, std::vector<double>(m.enc->encode(reverse(m.seq)))), true);
    tape.backward(bidirectional_loss(tape, *m.net, m.z0, cond, 30, eps, m.sched, 0.0).total);
    double gpos = 0.0, gneg = 0.0;
    for (std::size_t i = 0; i < 24; ++i) {
        gpos += cond.pos->grad.empty() ? 0.0 : std::abs(cond.pos->grad[i]);
        gneg += cond.neg->grad.empty() ? 0.0 : std::abs(cond.neg->grad[i]);
    }
    CHECK(gpos == 0.0);
    CHECK(gneg > 0.0);
}

TEST_CASE("full loss gradients through denoiser and both encoders") {
    for (auto variant : {CondVariant::reverse, CondVariant::negated}) {
        CAPTURE(to_string(variant));
        Mini m(5);
        const auto eps = m.noise(6);
        auto vars = m.store.entries();
        const auto rep = testing::grad_check(vars, [&](ag::Tape& tape) {
            Rng rng(0);
            const auto cond = condition_vars(tape, *m.enc, m.seq, variant, rng);
            return bidirectional_loss(tape, *m.net, m.z0, cond, 19, eps, m.sched, 0.3).total;
        }, 16, 1e-4);
        CHECK(rep.groups == static_cast<int>(vars.size()));
        CHECK_MESSAGE(rep.max_rel < 1e-4, rep.worst << " " << rep.max_rel);
    }
}

TEST_CASE("loss argument errors") {
    Mini m;
    const auto eps = m.noise(1);
    ag::Tape tape;
    Rng rng(0);
    const auto none = condition_vars(tape, *m.enc, m.seq, CondVariant::none, rng);
    CHECK_THROWS_AS(bidirectional_loss(tape, *m.net, m.z0, none, 3, eps, m.sched, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(bidirectional_loss(tape, *m.net, m.z0, none, 3, eps, m.sched, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(bidirectional_loss(tape, *m.net, m.z0, none, 3, eps, m.sched, -0.1), std::invalid_argument);
    CHECK_NOTHROW(bidirectional_loss(tape, *m.net, m.z0, none, 3, eps, m.sched, 1.0));
}

TEST_CASE("every mode maps to one regime") {
    struct Row {
        TrainMode mode;
        const char* name;
        CondVariant variant;
        CondMask mask;
        std::optional<double> alpha;
    };
    const Row rows[] = {
        {TrainMode::PN, "PN", CondVariant::reverse, CondMask::full, std::nullopt},
        {TrainMode::P, "P", CondVariant::none, CondMask::full, 1.0},
        {TrainMode::N, "N", CondVariant::reverse, CondMask::full, 0.0},
        {TrainMode::RN, "RN", CondVariant::random, CondMask::full, std::nullopt},
        {TrainMode::DN, "DN", CondVariant::negated, CondMask::full, std::nullopt},
        {TrainMode::PN_V, "PN-V", CondVariant::reverse, CondMask::visual_only, std::nullopt},
        {TrainMode::PN_M, "PN-M", CondVariant::reverse, CondMask::motion_only, std::nullopt},
    };
    for (const auto& r : rows) {
        CHECK(to_string(r.mode) == r.name);
        CHECK(parse_mode(r.name) == r.mode);
        const auto g = regime(r.mode);
        CHECK(g.variant == r.variant);
        CHECK(g.mask == r.mask);
        CHECK(g.forced_alpha == r.alpha);
        TrainConfig cfg;
        cfg.mode = r.mode;
        cfg.alpha = 0.3;
        CHECK(cfg.effective_alpha() == r.alpha.value_or(0.3));
    }
    CHECK_THROWS_AS(parse_mode("pn"), std::invalid_argument);
    CHECK_THROWS_AS(parse_mode("PNV"), std::invalid_argument);
    CHECK_THROWS_AS(to_string(static_cast<TrainMode>(99)), std::invalid_argument);
}

TEST_CASE("step records serialise with nulls for absent branches") {
    StepRecord r;
    r.epoch = 2;
    r.step = 9;
    r.loss = 0.5;
    r.loss_pos = 0.25;
    r.lr = 1e-4;
    const auto j = nlohmann::json::parse(r.to_json());
    CHECK(j["epoch"] == 2);
    CHECK(j["step"] == 9);
    CHECK(j["loss"] == 0.5);
    CHECK(j["loss_pos"] == 0.25);
    CHECK(j["loss_neg"].is_null());
    CHECK(r.to_json().rfind("{\"epoch\":2,\"step\":9,\"loss\":", 0) == 0);
}

TEST_CASE("trainer runs") {
    const Corpus corpus(8);

    SUBCASE("mode P reproduces PN at alpha = 1") {
        auto cfg = corpus.config();
        cfg.epochs = 2;
        cfg.mode = TrainMode::PN;
        cfg.alpha = 1.0;
        Trainer pn(cfg, corpus.vae, corpus.range);
        cfg.mode = TrainMode::P;
        cfg.alpha = 0.1;  // ignored: P forces 1
        Trainer p(cfg, corpus.vae, corpus.range);
        const auto a = pn.fit(corpus.data);
        const auto b = p.fit(corpus.data);
        REQUIRE(a.size() == 4u);
        CHECK(losses(a) == losses(b));
        for (const auto& r : b) CHECK_FALSE(r.loss_neg.has_value());
    }

    SUBCASE("resume reproduces the uninterrupted run") {
        const auto dir = std::filesystem::temp_directory_path() / "dualdiff_test_resume";
        std::filesystem::create_directories(dir);
        const auto cfg = corpus.config();
        Trainer whole(cfg, corpus.vae, corpus.range);
        const auto full = whole.fit(corpus.data);

        Trainer first(cfg, corpus.vae, corpus.range);
        FitOptions opts;
        opts.checkpoint = dir / "diffusion.ckpt";
        opts.stop_after_epoch = 2;
        auto part = first.fit(corpus.data, opts);
        CHECK(first.epoch() == 2);
        Trainer second = Trainer::load(opts.checkpoint);
        CHECK(second.epoch() == 2);
        CHECK(second.step() == first.step());
        const auto rest = second.fit(corpus.data);
        part.insert(part.end(), rest.begin(), rest.end());
        REQUIRE(part.size() == full.size());
        CHECK(losses(part) == losses(full));
        for (std::size_t i = 0; i < part.size(); ++i) CHECK(part[i].step == full[i].step);
        const auto& pa = whole.params().entries();
        const auto& pb = second.params().entries();
        for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second->value.values() == pb[i].second->value.values());
        std::filesystem::remove_all(dir);
    }

    SUBCASE("every mode trains") {
        for (auto mode : {TrainMode::PN, TrainMode::P, TrainMode::N, TrainMode::RN, TrainMode::DN, TrainMode::PN_V,
                          TrainMode::PN_M}) {
            CAPTURE(to_string(mode));
            auto cfg = corpus.config();
            cfg.mode = mode;
            cfg.epochs = 1;
            Trainer tr(cfg, corpus.vae, corpus.range);
            const auto recs = tr.fit(corpus.data);
            REQUIRE(recs.size() == 2u);
            for (const auto& r : recs) {
                CHECK(std::isfinite(r.loss));
                CHECK(r.loss_pos.has_value() == (mode != TrainMode::N));
                CHECK(r.loss_neg.has_value() == (mode != TrainMode::P));
            }
        }
    }

    SUBCASE("step cap") {
        auto cfg = corpus.config();
        cfg.max_steps = 3;
        Trainer tr(cfg, corpus.vae, corpus.range);
        CHECK(tr.fit(corpus.data).size() == 3u);
        CHECK(tr.step() == 3);
        CHECK(tr.fit(corpus.data).empty());
    }

    SUBCASE("divergence keeps the last finite checkpoint") {
        const auto dir = std::filesystem::temp_directory_path() / "dualdiff_test_diverge";
        std::filesystem::create_directories(dir);
        auto cfg = corpus.config();
        Trainer tr(cfg, corpus.vae, corpus.range);
        FitOptions opts;
        opts.checkpoint = dir / "diffusion.ckpt";
        opts.stop_after_epoch = 1;
        tr.fit(corpus.data, opts);
        auto poisoned = corpus.data;
        poisoned[3].z0[0] = std::nan("");
        opts.stop_after_epoch = 0;
        CHECK_THROWS_WITH_AS(tr.fit(poisoned, opts), doctest::Contains("non-finite"), std::runtime_error);
        CHECK(Trainer::load(opts.checkpoint).epoch() == 1);
        std::filesystem::remove_all(dir);
    }

    SUBCASE("checkpoint is self-describing") {
        auto cfg = corpus.config();
        cfg.epochs = 1;
        cfg.mode = TrainMode::RN;
        cfg.alpha = 0.2;
        cfg.denoiser.cross_attention = true;
        Trainer tr(cfg, corpus.vae, corpus.range);
        tr.fit(corpus.data);
        const auto c = tr.checkpoint();
        CHECK(c.get("kind") == "diffusion");
        CHECK(c.get_int("schema_version") == 1);
        const auto back = Trainer::from_checkpoint(c);
        CHECK(back.config().mode == TrainMode::RN);
        CHECK(back.config().alpha == 0.2);
        CHECK(back.config().diffusion_steps == 100);
        CHECK(back.config().denoiser.cross_attention);
        CHECK(back.vae().latent_scale() == corpus.vae.latent_scale());
        CHECK(back.audio_range().log_max == corpus.range.log_max);
        CHECK(back.params().entries().size() == tr.params().entries().size());
        Container broken = c;
        broken.set("schema_version", 2);
        CHECK_THROWS(Trainer::from_checkpoint(broken));
    }

    SUBCASE("rejects bad inputs") {
        auto cfg = corpus.config();
        cfg.alpha = 1.5;
        CHECK_THROWS_AS(Trainer(cfg, corpus.vae, corpus.range), std::invalid_argument);
        cfg = corpus.config();
        Trainer tr(cfg, corpus.vae, corpus.range);
        CHECK_THROWS_AS(tr.fit({}), std::invalid_argument);
        auto wrong = corpus.data;
        wrong[0].z0 = Tensor({1, 16, 16});
        CHECK_THROWS_AS(tr.fit(wrong), std::invalid_argument);
        cfg.mode = TrainMode::RN;
        Trainer rn(cfg, corpus.vae, corpus.range);
        CHECK_THROWS_AS(rn.fit({corpus.data[0]}), std::invalid_argument);
    }
}

TEST_CASE("running-average loss falls over the first five epochs") {
    const Corpus corpus(16);
    auto cfg = corpus.config();
    cfg.epochs = 5;
    Trainer tr(cfg, corpus.vae, corpus.range);
    std::vector<double> epoch_mean;
    FitOptions opts;
    opts.on_epoch = [&](int, double mean) { epoch_mean.push_back(mean); };
    tr.fit(corpus.data, opts);
    REQUIRE(epoch_mean.size() == 5u);
    MESSAGE("epoch means " << epoch_mean[0] << " " << epoch_mean[1] << " " << epoch_mean[2] << " " << epoch_mean[3]
                           << " " << epoch_mean[4]);
    // Cumulative running average.
    double acc = 0.0;
    std::vector<double> running;
    for (std::size_t i = 0; i < epoch_mean.size(); ++i) {
        acc += epoch_mean[i];
        running.push_back(acc / static_cast<double>(i + 1));
    }
    for (std::size_t i = 1; i < running.size(); ++i) CHECK(running[i] < running[i - 1]);
}

TEST_CASE("generation") {
    const Corpus corpus(4);
    auto cfg = corpus.config();
    cfg.epochs = 1;
    cfg.ema_decay = 0.5;
    Trainer tr(cfg, corpus.vae, corpus.range);
    tr.fit(corpus.data);
    const Container ckpt = tr.checkpoint();
    const Generator gen(ckpt);
    const auto& seq = corpus.data[1].seq;

    SUBCASE("same seed gives byte-identical 5 s audio") {
        const auto a = gen.generate(seq, 5, 42, 4);
        const auto b = Generator(ckpt).generate(seq, 5, 42, 4);
        CHECK(a.sample_rate == 22050);
        CHECK(a.samples.size() == 110250u);
        CHECK(a.samples == b.samples);
        const auto dir = std::filesystem::temp_directory_path();
        write_wav(dir / "dualdiff_gen_a.wav", a);
        write_wav(dir / "dualdiff_gen_b.wav", b);
        auto bytes = [](const std::filesystem::path& p) {
            std::ifstream is(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(is), {});
        };
        CHECK(bytes(dir / "dualdiff_gen_a.wav") == bytes(dir / "dualdiff_gen_b.wav"));
        std::filesystem::remove(dir / "dualdiff_gen_a.wav");
        std::filesystem::remove(dir / "dualdiff_gen_b.wav");
        CHECK(gen.generate(seq, 5, 43, 4).samples != a.samples);
    }
    SUBCASE("inference uses the averaged weights") {
        bool differs = false;
        for (const auto& [name, v] : gen.model().params().entries()) {
            CHECK(v->value.values() == ckpt.array("ema." + name).values());
            if (v->value.values() != ckpt.array(name).values()) differs = true;
        }
        CHECK(differs);
    }
    SUBCASE("latent and mel shapes") {
        const auto z = gen.sample_latent(seq, 5, 1);
        CHECK(z.z.shape() == std::vector<int>{1, 32, 32});
        const auto mel = gen.generate_mel(seq, 5, 1);
        CHECK(mel.bins == 256);
        CHECK(mel.frames == 256);
        CHECK(mel.log_min == corpus.range.log_min);
    }
}
