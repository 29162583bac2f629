#include "dualdiff/trainer.h"

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dualdiff {

namespace {

constexpr int kCheckpointSchema = 1;
constexpr std::uint64_t kInitSalt = 0x696e6974ULL;

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

}  // namespace

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::PN: return "PN";
        case TrainMode::P: return "P";
        case TrainMode::N: return "N";
        case TrainMode::RN: return "RN";
        case TrainMode::DN: return "DN";
        case TrainMode::PN_V: return "PN-V";
        case TrainMode::PN_M: return "PN-M";
    }
    throw std::invalid_argument("unknown training mode");
}

TrainMode parse_mode(const std::string& s) {
    if (s == "PN") return TrainMode::PN;
    if (s == "P") return TrainMode::P;
    if (s == "N") return TrainMode::N;
    if (s == "RN") return TrainMode::RN;
    if (s == "DN") return TrainMode::DN;
    if (s == "PN-V") return TrainMode::PN_V;
    if (s == "PN-M") return TrainMode::PN_M;
    throw std::invalid_argument("unknown training mode '" + s + "' (expected PN, P, N, RN, DN, PN-V or PN-M)");
}

ModeRegime regime(TrainMode m) {
    switch (m) {
        case TrainMode::PN: return {CondVariant::reverse, CondMask::full, std::nullopt};
        case TrainMode::P: return {CondVariant::none, CondMask::full, 1.0};
        case TrainMode::N: return {CondVariant::reverse, CondMask::full, 0.0};
        case TrainMode::RN: return {CondVariant::random, CondMask::full, std::nullopt};
        case TrainMode::DN: return {CondVariant::negated, CondMask::full, std::nullopt};
        case TrainMode::PN_V: return {CondVariant::reverse, CondMask::visual_only, std::nullopt};
        case TrainMode::PN_M: return {CondVariant::reverse, CondMask::motion_only, std::nullopt};
    }
    throw std::invalid_argument("unknown training mode");
}

double TrainConfig::effective_alpha() const { return regime(mode).forced_alpha.value_or(alpha); }

void TrainConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (diffusion_steps < 1) throw std::invalid_argument("diffusion step count must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (epochs < 0 || max_steps < 0) throw std::invalid_argument("epoch and step caps must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("ema decay must lie in [0, 1)");
    conditioning.validate();
    denoiser.validate();
}

LossBreakdown bidirectional_loss(ag::Tape& tape, const NoiseModel& model, const Tensor& z0, const ConditionVars& cond,
                                 int t, const NoisePair& eps, const NoiseSchedule& s, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (alpha < 1.0 && !cond.neg) throw std::invalid_argument("negative conditioning required when alpha < 1");
    if (!cond.pos && alpha > 0.0) throw std::invalid_argument("positive conditioning missing");
    const LatentSample clean{z0, 0, Branch::clean};
    LossBreakdown out;
    ag::Var lp, ln;
    if (alpha > 0.0) {
        const LatentSample zp = diffuse(clean, t, eps.eps, s, Branch::positive);
        lp = ag::mse(tape, model(tape, ag::leaf(zp.z), t, cond.pos), eps.eps);
        out.pos = lp->value[0];
    }
    if (alpha < 1.0) {
        const LatentSample zn = diffuse(clean, t, eps.eps, s, Branch::negative);
        ln = ag::mse(tape, model(tape, ag::leaf(zn.z), t, cond.neg), eps.negated());
        out.neg = ln->value[0];
    }
    if (lp && ln) {
        out.total = ag::weighted_sum(tape, lp, alpha, ln, 1.0 - alpha);
    } else {
        out.total = lp ? lp : ln;
    }
    out.loss = out.total->value[0];
    return out;
}

LossBreakdown bidirectional_loss(ag::Tape& tape, const Denoiser& net, const Tensor& z0, const ConditionVars& cond,
                                 int t, const NoisePair& eps, const NoiseSchedule& s, double alpha) {
    const NoiseModel model = [&net](ag::Tape& tp, const ag::Var& z, int step, const ag::Var& c) {
        return net.forward(tp, z, step, c);
    };
    return bidirectional_loss(tape, model, z0, cond, t, eps, s, alpha);
}

std::string StepRecord::to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["loss"] = loss;
    j["loss_pos"] = loss_pos ? nlohmann::ordered_json(*loss_pos) : nlohmann::ordered_json(nullptr);
    j["loss_neg"] = loss_neg ? nlohmann::ordered_json(*loss_neg) : nlohmann::ordered_json(nullptr);
    j["lr"] = lr;
    j["wall_ms"] = wall_ms;
    return j.dump();
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg, Vae vae, AudioRange range) : cfg_(cfg), vae_(std::move(vae)), range_(range) {
    Rng init(cfg_.seed ^ kInitSalt);
    build(&init);
    rng_.seed(cfg_.seed);
}

Trainer::Trainer(Trainer&&) noexcept = default;
Trainer& Trainer::operator=(Trainer&&) noexcept = default;
Trainer::~Trainer() = default;

void Trainer::build(Rng* init_rng) {
    const auto& vc = vae_.config();
    cfg_.denoiser.latent_channels = vc.latent_channels;
    cfg_.denoiser.latent_size = vc.latent_size();
    cfg_.denoiser.cond_dim = cfg_.conditioning.cond_dim();
    cfg_.validate();
    schedule_ = build_linear_schedule(cfg_.diffusion_steps, cfg_.beta_start, cfg_.beta_end);
    store_ = std::make_unique<ParamStore>();
    Rng fallback(0);
    Rng& rng = init_rng ? *init_rng : fallback;
    encoder_ = std::make_unique<ConditionEncoder>(cfg_.conditioning, *store_, rng);
    denoiser_ = std::make_unique<Denoiser>(cfg_.denoiser, *store_, rng);
    opt_ = std::make_unique<RmsProp>(store_->entries(), RmsProp::Config{cfg_.lr, 0.99, 1e-8, cfg_.clip_norm});
    ema_.clear();
    if (cfg_.ema_decay > 0.0) {
        for (const auto& [n, v] : store_->entries()) ema_.push_back(v->value);
    }
}

void Trainer::set_budget(int epochs, long long max_steps) {
    if (epochs < 0 || max_steps < 0) throw std::invalid_argument("epoch and step caps must be >= 0");
    cfg_.epochs = epochs;
    cfg_.max_steps = max_steps;
}

void Trainer::update_ema() {
    if (ema_.empty()) return;
    const double d = cfg_.ema_decay;
    const auto& entries = store_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Tensor& v = entries[i].second->value;
        for (std::size_t k = 0; k < v.size(); ++k) ema_[i][k] = d * ema_[i][k] + (1.0 - d) * v[k];
    }
}

std::vector<StepRecord> Trainer::fit(const std::vector<TrainExample>& data, const FitOptions& opts) {
    if (data.empty()) throw std::invalid_argument("training set is empty");
    const std::vector<int> shape = vae_.config().latent_shape();
    for (const auto& ex : data) {
        if (ex.z0.shape() != shape) {
            throw std::invalid_argument("latent of '" + ex.id + "' is " + ex.z0.shape_str() + ", expected " +
                                        shape_to_string(shape));
        }
    }
    const ModeRegime reg = regime(cfg_.mode);
    const double alpha = cfg_.effective_alpha();
    if (reg.variant == CondVariant::random && data.size() < 2) {
        throw std::invalid_argument("mode RN needs at least two training clips");
    }

    std::vector<StepRecord> records;
    std::vector<std::size_t> order(data.size());
    std::vector<const FeatureSequence*> pool;
    pool.reserve(data.size());
    const int last_epoch = opts.stop_after_epoch > 0 ? std::min(cfg_.epochs, opts.stop_after_epoch) : cfg_.epochs;
    bool capped = cfg_.max_steps > 0 && step_ >= cfg_.max_steps;

    while (!capped && epoch_ < last_epoch) {
        ++epoch_;
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(rng_, 0, static_cast<int>(i) - 1))]);
        }
        double epoch_loss = 0.0;
        std::size_t epoch_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size() && !capped; b0 += static_cast<std::size_t>(cfg_.batch_size)) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg_.batch_size));
            double sum = 0.0, sum_pos = 0.0, sum_neg = 0.0;
            bool has_pos = false, has_neg = false;
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t idx = order[k];
                const TrainExample& ex = data[idx];
                const int t = uniform_int(rng_, 1, cfg_.diffusion_steps);
                NoisePair eps{Tensor(shape)};
                fill_gaussian(rng_, eps.eps.data());
                if (reg.variant == CondVariant::random) {
                    pool.clear();
                    for (std::size_t j = 0; j < data.size(); ++j) {
                        if (j != idx) pool.push_back(&data[j].seq);
                    }
                }
                ag::Tape tape;
                const ConditionVars cond = condition_vars(tape, *encoder_, ex.seq, alpha < 1.0 ? reg.variant : CondVariant::none,
                                                          rng_, pool, reg.mask);
                const LossBreakdown lb = bidirectional_loss(tape, *denoiser_, ex.z0, cond, t, eps, schedule_, alpha);
                if (!std::isfinite(lb.loss)) {
                    throw std::runtime_error("training diverged at step " + std::to_string(step_ + 1) +
                                             " (non-finite loss); last finite checkpoint kept");
                }
                tape.backward(lb.total);
                sum += lb.loss;
                if (lb.pos) {
                    sum_pos += *lb.pos;
                    has_pos = true;
                }
                if (lb.neg) {
                    sum_neg += *lb.neg;
                    has_neg = true;
                }
            }
            const double n = static_cast<double>(b1 - b0);
            opt_->step(1.0 / n);
            update_ema();
            ++step_;
            StepRecord r;
            r.epoch = epoch_;
            r.step = step_;
            r.loss = sum / n;
            if (has_pos) r.loss_pos = sum_pos / n;
            if (has_neg) r.loss_neg = sum_neg / n;
            r.lr = opt_->config().lr;
            r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            records.push_back(r);
            if (opts.on_step) opts.on_step(r);
            epoch_loss += r.loss;
            ++epoch_batches;
            if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) capped = true;
        }
        if (!opts.checkpoint.empty()) save(opts.checkpoint);
        if (opts.on_epoch) opts.on_epoch(epoch_, epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_batches, 1)));
    }
    return records;
}

Container Trainer::checkpoint() const {
    Container c;
    c.set("kind", "diffusion");
    c.set("schema_version", kCheckpointSchema);
    c.set("train.alpha", cfg_.alpha);
    c.set("train.mode", to_string(cfg_.mode));
    c.set("train.batch_size", cfg_.batch_size);
    c.set("train.lr", cfg_.lr);
    c.set("train.clip_norm", cfg_.clip_norm);
    c.set("train.epochs", cfg_.epochs);
    c.set("train.max_steps", cfg_.max_steps);
    c.set("train.seed", std::to_string(cfg_.seed));
    c.set("train.ema_decay", cfg_.ema_decay);
    c.set("schedule.T", cfg_.diffusion_steps);
    c.set("schedule.beta_start", cfg_.beta_start);
    c.set("schedule.beta_end", cfg_.beta_end);
    const auto& d = cfg_.denoiser;
    c.set("denoiser.channels", join_ints(d.channels));
    c.set("denoiser.time_dim", d.time_dim);
    c.set("denoiser.embed_dim", d.embed_dim);
    c.set("denoiser.column_conditioning", d.column_conditioning ? 1 : 0);
    c.set("denoiser.cross_attention", d.cross_attention ? 1 : 0);
    c.set("denoiser.attention_dim", d.attention_dim);
    const auto& k = cfg_.conditioning;
    c.set("conditioning.visual_dim", k.visual_dim);
    c.set("conditioning.joints", k.joints);
    c.set("conditioning.kernel", k.kernel);
    c.set("conditioning.segments", k.segments);
    c.set("conditioning.span_seconds", k.span_seconds);
    c.set("conditioning.visual_hidden", k.visual_hidden);
    c.set("conditioning.visual_channels", k.visual_channels);
    c.set("conditioning.motion_hidden", k.motion_hidden);
    c.set("conditioning.motion_channels", k.motion_channels);
    c.set("conditioning.freeze_visual", k.freeze_visual ? 1 : 0);
    c.set("audio.log_min", range_.log_min);
    c.set("audio.log_max", range_.log_max);
    c.set("train.epoch", epoch_);
    c.set("train.step", step_);
    std::ostringstream rs;
    rs << rng_;
    c.set("train.rng", rs.str());
    vae_.save_to(c);
    store_->save_to(c);
    opt_->save_to(c);
    const auto& entries = store_->entries();
    for (std::size_t i = 0; i < ema_.size(); ++i) c.put("ema." + entries[i].first, ema_[i]);
    return c;
}

void Trainer::save(const std::filesystem::path& path) const { checkpoint().save(path); }

Trainer Trainer::from_checkpoint(const Container& c) {
    if (!c.has("kind") || c.get("kind") != "diffusion") throw std::runtime_error("not a diffusion checkpoint");
    if (c.get_int("schema_version") != kCheckpointSchema) throw std::runtime_error("unsupported checkpoint schema version");
    Trainer tr;
    TrainConfig& cfg = tr.cfg_;
    cfg.alpha = c.get_double("train.alpha");
    cfg.mode = parse_mode(c.get("train.mode"));
    cfg.batch_size = static_cast<int>(c.get_int("train.batch_size"));
    cfg.lr = c.get_double("train.lr");
    cfg.clip_norm = c.get_double("train.clip_norm");
    cfg.epochs = static_cast<int>(c.get_int("train.epochs"));
    cfg.max_steps = c.get_int("train.max_steps");
    cfg.seed = std::stoull(c.get("train.seed"));
    cfg.ema_decay = c.get_double("train.ema_decay");
    cfg.diffusion_steps = static_cast<int>(c.get_int("schedule.T"));
    cfg.beta_start = c.get_double("schedule.beta_start");
    cfg.beta_end = c.get_double("schedule.beta_end");
    cfg.denoiser.channels = split_ints(c.get("denoiser.channels"));
    cfg.denoiser.time_dim = static_cast<int>(c.get_int("denoiser.time_dim"));
    cfg.denoiser.embed_dim = static_cast<int>(c.get_int("denoiser.embed_dim"));
    cfg.denoiser.column_conditioning = c.get_int("denoiser.column_conditioning") != 0;
    cfg.denoiser.cross_attention = c.get_int("denoiser.cross_attention") != 0;
    cfg.denoiser.attention_dim = static_cast<int>(c.get_int("denoiser.attention_dim"));
    auto& k = cfg.conditioning;
    k.visual_dim = static_cast<int>(c.get_int("conditioning.visual_dim"));
    k.joints = static_cast<int>(c.get_int("conditioning.joints"));
    k.kernel = static_cast<int>(c.get_int("conditioning.kernel"));
    k.segments = static_cast<int>(c.get_int("conditioning.segments"));
    k.span_seconds = c.get_double("conditioning.span_seconds");
    k.visual_hidden = static_cast<int>(c.get_int("conditioning.visual_hidden"));
    k.visual_channels = static_cast<int>(c.get_int("conditioning.visual_channels"));
    k.motion_hidden = static_cast<int>(c.get_int("conditioning.motion_hidden"));
    k.motion_channels = static_cast<int>(c.get_int("conditioning.motion_channels"));
    k.freeze_visual = c.get_int("conditioning.freeze_visual") != 0;
    tr.range_ = {c.get_double("audio.log_min"), c.get_double("audio.log_max")};
    tr.vae_ = Vae::from_container(c);
    tr.build(nullptr);
    tr.store_->load_from(c);
    tr.opt_->load_from(c);
    const auto& entries = tr.store_->entries();
    for (std::size_t i = 0; i < tr.ema_.size(); ++i) {
        const Tensor& e = c.array("ema." + entries[i].first);
        if (!e.same_shape(tr.ema_[i])) throw std::runtime_error("EMA shape mismatch for " + entries[i].first);
        tr.ema_[i] = e;
    }
    tr.epoch_ = static_cast<int>(c.get_int("train.epoch"));
    tr.step_ = c.get_int("train.step");
    std::istringstream rs(c.get("train.rng"));
    rs >> tr.rng_;
    if (!rs) throw std::runtime_error("corrupt RNG state in checkpoint");
    return tr;
}

Trainer Trainer::load(const std::filesystem::path& path) { return from_checkpoint(Container::load(path)); }

// ---------------------------------------------------------------------------

Generator::Generator(const Container& ckpt) : trainer_(Trainer::from_checkpoint(ckpt)) {
    // Inference runs on the averaged weights when they were tracked.
    for (const auto& [name, v] : trainer_.params().entries()) {
        if (ckpt.has_array("ema." + name)) v->value = ckpt.array("ema." + name);
    }
}

Generator Generator::load(const std::filesystem::path& path) { return Generator(Container::load(path)); }

LatentSample Generator::sample_latent(const FeatureSequence& seq, int steps, std::uint64_t seed) const {
    const ModeRegime reg = regime(trainer_.config().mode);
    const std::vector<double> c = trainer_.encoder().encode(seq, reg.mask);
    return sample(trainer_.denoiser().predictor(), c, trainer_.schedule(), trainer_.vae().config().latent_shape(), seed,
                  steps);
}

MelSpectrogram Generator::generate_mel(const FeatureSequence& seq, int steps, std::uint64_t seed) const {
    const LatentSample z = sample_latent(seq, steps, seed);
    const AudioRange r = trainer_.audio_range();
    return trainer_.vae().decode_mel(z.z, r.log_min, r.log_max);
}

Waveform Generator::generate(const FeatureSequence& seq, int steps, std::uint64_t seed, int griffin_lim_iters) const {
    return mel_to_wav(generate_mel(seq, steps, seed), griffin_lim_iters);
}

}  // namespace dualdiff
