#include "dualdiff/conditioning.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dualdiff {

void FeatureSequence::validate() const {
    if (num_frames < 2) throw std::invalid_argument("feature sequence needs at least 2 frames");
    if (visual_dim < 1 || joints < 1) throw std::invalid_argument("feature sequence has empty feature dimensions");
    if (!(fps > 0.0)) throw std::invalid_argument("feature sequence fps must be positive");
    if (frames.size() != static_cast<std::size_t>(num_frames) * visual_dim) {
        throw std::invalid_argument("frame feature array does not match F x d_v");
    }
    if (poses.size() != static_cast<std::size_t>(num_frames) * joints * 2) {
        throw std::invalid_argument("pose array does not match F x J x 2");
    }
    for (double v : frames) {
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite frame feature");
    }
    for (double v : poses) {
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite keypoint");
    }
}

FeatureSequence reverse(const FeatureSequence& seq) {
    FeatureSequence r = seq;
    const int f = seq.num_frames;
    const std::size_t fw = static_cast<std::size_t>(seq.visual_dim);
    const std::size_t pw = static_cast<std::size_t>(seq.joints) * 2;
    for (int i = 0; i < f; ++i) {
        const std::size_t src = static_cast<std::size_t>(f - 1 - i);
        std::copy_n(seq.frames.begin() + static_cast<std::ptrdiff_t>(src * fw), fw,
                    r.frames.begin() + static_cast<std::ptrdiff_t>(i * fw));
        std::copy_n(seq.poses.begin() + static_cast<std::ptrdiff_t>(src * pw), pw,
                    r.poses.begin() + static_cast<std::ptrdiff_t>(i * pw));
    }
    return r;
}

JointEdges default_skeleton(int joints) {
    if (joints < 1) throw std::invalid_argument("joint count must be positive");
    if (joints == 8) return {{0, 1}, {1, 7}, {7, 2}, {7, 3}, {7, 4}, {4, 5}, {4, 6}};
    JointEdges e;
    for (int j = 1; j < joints; ++j) e.emplace_back(j - 1, j);
    return e;
}

Tensor normalized_adjacency(int joints, const JointEdges& edges) {
    Tensor a({joints, joints});
    for (int j = 0; j < joints; ++j) a[static_cast<std::size_t>(j * joints + j)] = 1.0;
    for (auto [u, v] : edges) {
        if (u < 0 || v < 0 || u >= joints || v >= joints) {
            throw std::invalid_argument("skeleton edge (" + std::to_string(u) + "," + std::to_string(v) +
                                        ") outside " + std::to_string(joints) + " joints");
        }
        a[static_cast<std::size_t>(u * joints + v)] = 1.0;
        a[static_cast<std::size_t>(v * joints + u)] = 1.0;
    }
    std::vector<double> deg(static_cast<std::size_t>(joints), 0.0);
    for (int i = 0; i < joints; ++i) {
        for (int j = 0; j < joints; ++j) deg[static_cast<std::size_t>(i)] += a[static_cast<std::size_t>(i * joints + j)];
    }
    for (int i = 0; i < joints; ++i) {
        for (int j = 0; j < joints; ++j) {
            a[static_cast<std::size_t>(i * joints + j)] /= std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)]);
        }
    }
    return a;
}

void ConditioningConfig::validate() const {
    if (visual_dim < 1 || joints < 1) throw std::invalid_argument("conditioning: feature dimensions must be positive");
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("conditioning: kernel width must be odd");
    if (segments < 1) throw std::invalid_argument("conditioning: segments must be positive");
    if (visual_hidden < 1 || visual_channels < 1 || motion_hidden < 1 || motion_channels < 1) {
        throw std::invalid_argument("conditioning: channel counts must be positive");
    }
}

std::string to_string(CondVariant v) {
    switch (v) {
        case CondVariant::reverse: return "reverse";
        case CondVariant::random: return "random";
        case CondVariant::negated: return "negated";
        case CondVariant::none: return "none";
    }
    throw std::invalid_argument("unknown conditioning variant");
}

CondVariant parse_variant(const std::string& s) {
    if (s == "reverse") return CondVariant::reverse;
    if (s == "random") return CondVariant::random;
    if (s == "negated") return CondVariant::negated;
    if (s == "none") return CondVariant::none;
    throw std::invalid_argument("unknown conditioning variant '" + s + "'");
}

// ---------------------------------------------------------------------------

ConditionEncoder::ConditionEncoder(const ConditioningConfig& cfg, ParamStore& store, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int k = cfg_.kernel;
    store.add("cond.visual.w1", he_normal({cfg_.visual_hidden, cfg_.visual_dim, 1, k}, cfg_.visual_dim * k, rng));
    store.add("cond.visual.b1", Tensor({cfg_.visual_hidden}));
    store.add("cond.visual.w2", he_normal({cfg_.visual_channels, cfg_.visual_hidden, 1, 1}, cfg_.visual_hidden, rng));
    store.add("cond.visual.b2", Tensor({cfg_.visual_channels}));
    store.add("cond.motion.w1", he_normal({cfg_.motion_hidden, 2, 1, 1}, 2, rng));
    store.add("cond.motion.b1", Tensor({cfg_.motion_hidden}));
    store.add("cond.motion.w2", he_normal({cfg_.motion_hidden, cfg_.motion_hidden, 1, k}, cfg_.motion_hidden * k, rng));
    store.add("cond.motion.b2", Tensor({cfg_.motion_hidden}));
    store.add("cond.motion.w3", he_normal({cfg_.motion_channels, cfg_.motion_hidden, 1, 1}, cfg_.motion_hidden, rng));
    store.add("cond.motion.b3", Tensor({cfg_.motion_channels}));
    bind(store);
}

ConditionEncoder::ConditionEncoder(const ConditioningConfig& cfg, const ParamStore& store) : cfg_(cfg) {
    cfg_.validate();
    bind(store);
}

void ConditionEncoder::bind(const ParamStore& store) {
    adjacency_ = normalized_adjacency(cfg_.joints, default_skeleton(cfg_.joints));
    vw1_ = store.get("cond.visual.w1");
    vb1_ = store.get("cond.visual.b1");
    vw2_ = store.get("cond.visual.w2");
    vb2_ = store.get("cond.visual.b2");
    mw1_ = store.get("cond.motion.w1");
    mb1_ = store.get("cond.motion.b1");
    mw2_ = store.get("cond.motion.w2");
    mb2_ = store.get("cond.motion.b2");
    mw3_ = store.get("cond.motion.w3");
    mb3_ = store.get("cond.motion.b3");
    const std::vector<int> expect_vw1{cfg_.visual_hidden, cfg_.visual_dim, 1, cfg_.kernel};
    const std::vector<int> expect_mw2{cfg_.motion_hidden, cfg_.motion_hidden, 1, cfg_.kernel};
    if (vw1_->value.shape() != expect_vw1 || mw2_->value.shape() != expect_mw2 ||
        vw2_->value.dim(0) != cfg_.visual_channels || mw3_->value.dim(0) != cfg_.motion_channels) {
        throw std::invalid_argument("conditioning parameters do not match the configuration");
    }
    if (cfg_.freeze_visual) {
        for (const auto& v : {vw1_, vb1_, vw2_, vb2_}) v->requires_grad = false;
    }
}

void ConditionEncoder::check(const FeatureSequence& seq) const {
    seq.validate();
    if (seq.num_frames < cfg_.kernel) {
        throw std::invalid_argument("sequence of " + std::to_string(seq.num_frames) +
                                    " frames is shorter than the temporal kernel (" +
                                    std::to_string(cfg_.kernel) + ")");
    }
    if (seq.visual_dim != cfg_.visual_dim) {
        throw std::invalid_argument("visual feature dimension " + std::to_string(seq.visual_dim) +
                                    " does not match encoder (" + std::to_string(cfg_.visual_dim) + ")");
    }
    if (seq.joints != cfg_.joints) {
        throw std::invalid_argument("sequence has " + std::to_string(seq.joints) +
                                    " joints but the skeleton adjacency has " + std::to_string(cfg_.joints));
    }
}

std::vector<std::pair<int, int>> ConditionEncoder::cells(const FeatureSequence& seq) const {
    const int f = seq.num_frames, s = cfg_.segments;
    std::vector<std::pair<int, int>> out;
    if (cfg_.span_seconds <= 0.0) {
        if (f < s) {
            throw std::invalid_argument("sequence of " + std::to_string(f) + " frames is shorter than " +
                                        std::to_string(s) + " pooling cells");
        }
        for (int i = 0; i < s; ++i) {
            out.emplace_back(static_cast<int>(static_cast<long long>(i) * f / s),
                             static_cast<int>(static_cast<long long>(i + 1) * f / s));
        }
        return out;
    }
    const double cell = cfg_.span_seconds * seq.fps / s;  // frames per cell
    auto edge = [&](int i) { return std::clamp(static_cast<int>(std::ceil(i * cell - 1e-9)), 0, f); };
    for (int i = 0; i < s; ++i) out.emplace_back(edge(i), edge(i + 1));
    return out;
}

ag::Var ConditionEncoder::visual(ag::Tape& tape, const FeatureSequence& seq) const {
    check(seq);
    const int f = seq.num_frames, pad = cfg_.kernel / 2, d = seq.visual_dim;
    Tensor x({d, 1, f + 2 * pad});
    for (int i = 0; i < f + 2 * pad; ++i) {
        const int src = std::clamp(i - pad, 0, f - 1);
        for (int k = 0; k < d; ++k) x.at(k, 0, i) = seq.frame(src, k);
    }
    auto h = ag::silu(tape, ag::conv2d(tape, ag::leaf(std::move(x)), vw1_, vb1_, {}));
    h = ag::conv2d(tape, h, vw2_, vb2_, {});
    return ag::segment_pool(tape, h, cells(seq));
}

ag::Var ConditionEncoder::motion(ag::Tape& tape, const FeatureSequence& seq) const {
    check(seq);
    const int f = seq.num_frames, pad = cfg_.kernel / 2, jn = seq.joints;
    double mean[2] = {0.0, 0.0};
    for (int i = 0; i < f; ++i) {
        for (int j = 0; j < jn; ++j) {
            mean[0] += seq.pose(i, j, 0);
            mean[1] += seq.pose(i, j, 1);
        }
    }
    mean[0] /= static_cast<double>(f) * jn;
    mean[1] /= static_cast<double>(f) * jn;
    Tensor x({2, jn, f + 2 * pad});
    for (int i = 0; i < f + 2 * pad; ++i) {
        const int src = std::clamp(i - pad, 0, f - 1);
        for (int j = 0; j < jn; ++j) {
            for (int c = 0; c < 2; ++c) x.at(c, j, i) = seq.pose(src, j, c) - mean[c];
        }
    }
    auto h = ag::mix_rows(tape, ag::leaf(std::move(x)), adjacency_);
    h = ag::silu(tape, ag::conv2d(tape, h, mw1_, mb1_, {}));
    h = ag::silu(tape, ag::conv2d(tape, h, mw2_, mb2_, {}));
    h = ag::mean_rows(tape, h);
    h = ag::conv2d(tape, h, mw3_, mb3_, {});
    return ag::segment_pool(tape, h, cells(seq));
}

ag::Var ConditionEncoder::condition(ag::Tape& tape, const FeatureSequence& seq, CondMask mask) const {
    auto v = ag::l2_normalize(tape, visual(tape, seq));
    auto m = ag::l2_normalize(tape, motion(tape, seq));
    switch (mask) {
        case CondMask::full: break;
        case CondMask::visual_only: m = ag::leaf(Tensor({cfg_.motion_out()})); break;
        case CondMask::motion_only: v = ag::leaf(Tensor({cfg_.visual_out()})); break;
    }
    return ag::concat_vec(tape, {v, m});
}

std::vector<double> ConditionEncoder::encode_visual(const FeatureSequence& seq) const {
    ag::Tape tape;
    return visual(tape, seq)->value.values();
}

std::vector<double> ConditionEncoder::encode_motion(const FeatureSequence& seq) const {
    ag::Tape tape;
    return motion(tape, seq)->value.values();
}

std::vector<double> ConditionEncoder::encode(const FeatureSequence& seq, CondMask mask) const {
    ag::Tape tape;
    return condition(tape, seq, mask)->value.values();
}

ConditionVars condition_vars(ag::Tape& tape, const ConditionEncoder& enc, const FeatureSequence& seq,
                             CondVariant variant, Rng& rng, const std::vector<const FeatureSequence*>& pool,
                             CondMask mask) {
    ConditionVars out;
    out.pos = enc.condition(tape, seq, mask);
    switch (variant) {
        case CondVariant::reverse:
            out.neg = enc.condition(tape, reverse(seq), mask);
            break;
        case CondVariant::random: {
            if (pool.empty()) throw std::invalid_argument("variant 'random' needs a non-empty pool of other clips");
            const auto* other = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
            out.neg = enc.condition(tape, *other, mask);
            break;
        }
        case CondVariant::negated:
            out.neg = ag::scale(tape, out.pos, -1.0);
            break;
        case CondVariant::none:
            break;
    }
    return out;
}

ConditionPair make_condition_pair(const ConditionEncoder& enc, const FeatureSequence& seq, CondVariant variant,
                                  Rng& rng, const std::vector<const FeatureSequence*>& pool, CondMask mask) {
    ag::Tape tape;
    const auto vars = condition_vars(tape, enc, seq, variant, rng, pool, mask);
    ConditionPair p;
    p.variant = variant;
    p.c_pos = vars.pos->value.values();
    if (vars.neg) p.c_neg = vars.neg->value.values();
    return p;
}

// ---------------------------------------------------------------------------
// Synthetic clips

namespace {

constexpr std::uint64_t kProjectionSeed = 0x7669737561ULL;
constexpr int kLatentFactors = 5;

double positive_mod(double x, double m) {
    const double r = std::fmod(x, m);
    return r < 0.0 ? r + m : r;
}

}  // namespace

SynthClip synth_rhythm_sequence(double bpm, double duration, std::uint64_t seed, const SynthConfig& cfg) {
    if (!(bpm >= 60.0 && bpm <= 240.0)) {
        throw std::invalid_argument("bpm " + std::to_string(bpm) + " outside [60, 240]");
    }
    if (!(duration > 0.0) || !(cfg.fps > 0.0) || cfg.visual_dim < 1 || cfg.joints < 1) {
        throw std::invalid_argument("synth_rhythm_sequence: bad duration or dimensions");
    }
    Rng rng(seed);
    const double period = 60.0 / bpm;
    const double phase = uniform(rng, 0.1 * period, 0.9 * period);

    SynthClip clip;
    clip.bpm = bpm;
    for (int k = 0;; ++k) {
        const double t = phase + k * period;
        if (t >= duration) break;
        clip.beats.push_back(t);
    }

    auto bounce = [&](double t) { return std::cos(2.0 * std::numbers::pi * (t - phase) / period); };
    auto accent = [&](double t) {
        if (t < phase) return 0.0;
        return std::exp(-positive_mod(t - phase, period) / cfg.accent_decay);
    };
    auto sway = [&](double t) { return std::sin(std::numbers::pi * (t - phase) / period); };

    FeatureSequence& seq = clip.seq;
    seq.fps = cfg.fps;
    seq.num_frames = static_cast<int>(std::lround(duration * cfg.fps));
    seq.visual_dim = cfg.visual_dim;
    seq.joints = cfg.joints;
    seq.frames.assign(static_cast<std::size_t>(seq.num_frames) * seq.visual_dim, 0.0);
    seq.poses.assign(static_cast<std::size_t>(seq.num_frames) * seq.joints * 2, 0.0);

    // Stick-figure rest pose; extra joints get random rest positions.
    static constexpr double kRest8[8][2] = {{0.0, 1.7}, {0.0, 1.5}, {-0.5, 1.2}, {0.5, 1.2},
                                            {0.0, 1.0}, {-0.2, 0.0}, {0.2, 0.0}, {0.0, 1.3}};
    std::vector<double> rest(static_cast<std::size_t>(cfg.joints) * 2);
    std::vector<double> bounce_amp(static_cast<std::size_t>(cfg.joints));
    std::vector<double> accent_amp(static_cast<std::size_t>(cfg.joints));
    std::vector<double> sway_amp(static_cast<std::size_t>(cfg.joints));
    const double global_amp = uniform(rng, 0.8, 1.2);
    for (int j = 0; j < cfg.joints; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        if (cfg.joints == 8) {
            rest[2 * jj] = kRest8[j][0];
            rest[2 * jj + 1] = kRest8[j][1];
        } else {
            rest[2 * jj] = uniform(rng, -0.5, 0.5);
            rest[2 * jj + 1] = uniform(rng, 0.0, 1.8);
        }
        bounce_amp[jj] = global_amp * uniform(rng, 0.05, 0.1);
        accent_amp[jj] = global_amp * uniform(rng, 0.1, 0.3);
        sway_amp[jj] = global_amp * uniform(rng, 0.02, 0.08);
    }
    const double pose_noise = 0.005;
    for (int i = 0; i < seq.num_frames; ++i) {
        const double t = i / cfg.fps;
        const double b = bounce(t), a = accent(t), s = sway(t);
        for (int j = 0; j < cfg.joints; ++j) {
            const auto jj = static_cast<std::size_t>(j);
            const std::size_t at = (static_cast<std::size_t>(i) * cfg.joints + jj) * 2;
            seq.poses[at] = rest[2 * jj] + sway_amp[jj] * s + pose_noise * gaussian(rng);
            seq.poses[at + 1] = rest[2 * jj + 1] + bounce_amp[jj] * b + accent_amp[jj] * a + pose_noise * gaussian(rng);
        }
    }

    // Visual features: a fixed random projection (shared by every clip) of the
    // latent rhythm factors, plus per-clip noise.
    Rng proj_rng(kProjectionSeed + static_cast<std::uint64_t>(cfg.visual_dim));
    std::vector<double> proj(static_cast<std::size_t>(cfg.visual_dim) * kLatentFactors);
    fill_gaussian(proj_rng, proj, 1.0 / std::sqrt(static_cast<double>(kLatentFactors)));
    const double feature_gain = uniform(rng, 0.8, 1.2);
    for (int i = 0; i < seq.num_frames; ++i) {
        const double t = i / cfg.fps;
        const double a = accent(t);
        const double factors[kLatentFactors] = {bounce(t), a, -std::sin(2.0 * std::numbers::pi * (t - phase) / period),
                                                a * a, sway(t)};
        for (int k = 0; k < cfg.visual_dim; ++k) {
            double v = 0.0;
            for (int q = 0; q < kLatentFactors; ++q) v += proj[static_cast<std::size_t>(k) * kLatentFactors + q] * factors[q];
            seq.frames[static_cast<std::size_t>(i) * cfg.visual_dim + k] = feature_gain * v + cfg.feature_noise * gaussian(rng);
        }
    }

    // Audio: clicks on the beats over a faded-in harmonic bed.
    const double click_amp = uniform(rng, 0.5, 0.7);
    clip.audio = click_track(clip.beats, duration, click_amp, cfg.sample_rate, rng());
    const double root = uniform(rng, 110.0, 220.0);
    const double bed_amp = uniform(rng, 0.03, 0.06);
    static constexpr double kPartials[3][2] = {{1.0, 1.0}, {1.5, 0.6}, {2.0, 0.4}};
    const double fade = 0.3 * cfg.sample_rate;
    for (std::size_t n = 0; n < clip.audio.samples.size(); ++n) {
        const double t = static_cast<double>(n) / cfg.sample_rate;
        double bed = 0.0;
        for (const auto& p : kPartials) bed += p[1] * std::sin(2.0 * std::numbers::pi * root * p[0] * t);
        const double g = std::min(1.0, static_cast<double>(n) / fade);
        clip.audio.samples[n] = std::clamp(clip.audio.samples[n] + bed_amp * g * bed, -1.0, 1.0);
    }
    return clip;
}

// ---------------------------------------------------------------------------
// Feature files

namespace {

static_assert(std::endian::native == std::endian::little, "feature IO assumes a little-endian host");
constexpr std::uint32_t kFeatMagic = 0x41454644;  // "DFEA"
constexpr std::uint32_t kFeatVersion = 1;

}  // namespace

void write_features(const std::filesystem::path& path, const FeatureSequence& seq) {
    seq.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    const std::uint32_t header[8] = {kFeatMagic,
                                     kFeatVersion,
                                     static_cast<std::uint32_t>(seq.num_frames),
                                     static_cast<std::uint32_t>(seq.visual_dim),
                                     static_cast<std::uint32_t>(seq.joints),
                                     static_cast<std::uint32_t>(std::lround(seq.fps * 1000.0)),
                                     0,
                                     0};
    os.write(reinterpret_cast<const char*>(header), sizeof(header));
    std::vector<float> buf(seq.frames.begin(), seq.frames.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    buf.assign(seq.poses.begin(), seq.poses.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

FeatureSequence read_features(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + name);
    std::vector<char> raw((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::uint32_t header[8];
    if (raw.size() < sizeof(header)) throw std::runtime_error(name + ": truncated feature header");
    std::memcpy(header, raw.data(), sizeof(header));
    if (header[0] != kFeatMagic) throw std::runtime_error(name + ": not a feature file");
    if (header[1] != kFeatVersion) throw std::runtime_error(name + ": unsupported feature file version");
    FeatureSequence seq;
    seq.num_frames = static_cast<int>(header[2]);
    seq.visual_dim = static_cast<int>(header[3]);
    seq.joints = static_cast<int>(header[4]);
    seq.fps = header[5] / 1000.0;
    const std::size_t nf = static_cast<std::size_t>(seq.num_frames) * seq.visual_dim;
    const std::size_t np = static_cast<std::size_t>(seq.num_frames) * seq.joints * 2;
    if (raw.size() != sizeof(header) + 4 * (nf + np)) throw std::runtime_error(name + ": size does not match header");
    std::vector<float> buf(nf + np);
    std::memcpy(buf.data(), raw.data() + sizeof(header), buf.size() * sizeof(float));
    seq.frames.assign(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(nf));
    seq.poses.assign(buf.begin() + static_cast<std::ptrdiff_t>(nf), buf.end());
    seq.validate();
    return seq;
}

}  // namespace dualdiff
