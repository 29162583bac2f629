#pragma once

#include "dualdiff/conditioning.h"
#include "dualdiff/container.h"
#include "dualdiff/denoiser.h"
#include "dualdiff/dual_process.h"
#include "dualdiff/latent_vae.h"
#include "dualdiff/schedule.h"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dualdiff {

// PN: reverse-played negative; P / N: single branch (alpha forced to 1 / 0);
// RN: random other clip; DN: negated c+; PN-V / PN-M: one half of c zeroed.
enum class TrainMode { PN, P, N, RN, DN, PN_V, PN_M };

std::string to_string(TrainMode m);
TrainMode parse_mode(const std::string& s);

struct ModeRegime {
    CondVariant variant;
    CondMask mask;
    std::optional<double> forced_alpha;
};
ModeRegime regime(TrainMode m);

struct TrainConfig {
    double alpha = 0.1;
    TrainMode mode = TrainMode::PN;
    int diffusion_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int batch_size = 32;
    double lr = 1e-4;
    double clip_norm = 1.0;
    int epochs = 100;
    long long max_steps = 0;  // optimiser steps; 0 = no cap
    std::uint64_t seed = 0;
    double ema_decay = 0.0;   // 0 disables
    DenoiserConfig denoiser;
    ConditioningConfig conditioning;

    double effective_alpha() const;
    void validate() const;
};

struct LossBreakdown {
    ag::Var total;
    double loss = 0.0;
    std::optional<double> pos;  // absent when the branch carries zero weight
    std::optional<double> neg;
};

// Anything that maps (z_t, t, c) to a noise estimate on the tape.
using NoiseModel = std::function<ag::Var(ag::Tape&, const ag::Var& z_t, int t, const ag::Var& c)>;

// alpha * ||eps - eps_theta(z_t+, t, c+)||^2 + (1 - alpha) * ||-eps - eps_theta(z_t-, t, c-)||^2,
// each term a mean over latent elements. A branch with zero weight is not evaluated.
LossBreakdown bidirectional_loss(ag::Tape& tape, const NoiseModel& model, const Tensor& z0, const ConditionVars& cond,
                                 int t, const NoisePair& eps, const NoiseSchedule& s, double alpha);
LossBreakdown bidirectional_loss(ag::Tape& tape, const Denoiser& net, const Tensor& z0, const ConditionVars& cond,
                                 int t, const NoisePair& eps, const NoiseSchedule& s, double alpha);

struct TrainExample {
    std::string id;
    Tensor z0;  // scaled VAE latent
    FeatureSequence seq;
};

struct StepRecord {
    int epoch = 0;
    long long step = 0;
    double loss = 0.0;
    std::optional<double> loss_pos;
    std::optional<double> loss_neg;
    double lr = 0.0;
    double wall_ms = 0.0;

    std::string to_json() const;
};

struct AudioRange {
    double log_min = 0.0;
    double log_max = 1.0;
};

struct FitOptions {
    std::filesystem::path checkpoint;  // rewritten after every epoch when non-empty
    std::function<void(const StepRecord&)> on_step;
    std::function<void(int epoch, double mean_loss)> on_epoch;
    int stop_after_epoch = 0;  // return early (for resumable runs); 0 = run to cfg.epochs
};

class Trainer {
public:
    Trainer(const TrainConfig& cfg, Vae vae, AudioRange range);
    static Trainer from_checkpoint(const Container& c);
    static Trainer load(const std::filesystem::path& path);

    Trainer(Trainer&&) noexcept;
    Trainer& operator=(Trainer&&) noexcept;
    ~Trainer();

    // Runs epochs epoch()+1 .. cfg.epochs (or until max_steps). Returns the
    // per-step records produced by this call.
    std::vector<StepRecord> fit(const std::vector<TrainExample>& data, const FitOptions& opts = {});

    const TrainConfig& config() const { return cfg_; }
    // Changes the epoch / step caps, e.g. to extend a resumed run.
    void set_budget(int epochs, long long max_steps);
    int epoch() const { return epoch_; }
    long long step() const { return step_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const Denoiser& denoiser() const { return *denoiser_; }
    const ConditionEncoder& encoder() const { return *encoder_; }
    const Vae& vae() const { return vae_; }
    const ParamStore& params() const { return *store_; }
    AudioRange audio_range() const { return range_; }

    Container checkpoint() const;
    void save(const std::filesystem::path& path) const;

private:
    Trainer() = default;
    void build(Rng* init_rng);
    void update_ema();

    TrainConfig cfg_;
    Vae vae_{VaeConfig{}};
    AudioRange range_;
    NoiseSchedule schedule_;
    std::unique_ptr<ParamStore> store_;
    std::unique_ptr<Denoiser> denoiser_;
    std::unique_ptr<ConditionEncoder> encoder_;
    std::unique_ptr<RmsProp> opt_;
    std::vector<Tensor> ema_;
    Rng rng_;
    int epoch_ = 0;
    long long step_ = 0;
};

// Inference from a diffusion checkpoint: only the positive conditioning of
// the forward-played clip is used.
class Generator {
public:
    explicit Generator(const Container& ckpt);
    static Generator load(const std::filesystem::path& path);

    LatentSample sample_latent(const FeatureSequence& seq, int steps, std::uint64_t seed) const;
    MelSpectrogram generate_mel(const FeatureSequence& seq, int steps, std::uint64_t seed) const;
    Waveform generate(const FeatureSequence& seq, int steps, std::uint64_t seed, int griffin_lim_iters = 64) const;

    const Trainer& model() const { return trainer_; }

private:
    Trainer trainer_;
};

}  // namespace dualdiff
