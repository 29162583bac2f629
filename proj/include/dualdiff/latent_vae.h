#pragma once

#include "dualdiff/audio.h"
#include "dualdiff/autograd.h"
#include "dualdiff/container.h"
#include "dualdiff/params.h"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dualdiff {

struct VaeConfig {
    int input_size = 256;           // square input, H = W
    int latent_channels = 1;
    // channels[0] at full resolution; each further entry follows one stride-2
    // downsampling, so the latent side is input_size >> (channels.size() - 1).
    std::vector<int> channels{8, 8, 16, 16};
    double kl_weight = 1e-6;

    int downsamples() const { return static_cast<int>(channels.size()) - 1; }
    int latent_size() const { return input_size >> downsamples(); }
    std::vector<int> latent_shape() const { return {latent_channels, latent_size(), latent_size()}; }
    void validate() const;
};

// Convolutional autoencoder with a diagonal Gaussian posterior. encode()
// returns the posterior mean multiplied by latent_scale so that diffusion sees
// roughly unit-variance latents; decode() undoes the scale.
class Vae {
public:
    explicit Vae(const VaeConfig& cfg, std::uint64_t seed = 0);

    const VaeConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    double latent_scale() const { return latent_scale_; }
    void set_latent_scale(double s);

    // x [1,H,W] -> [2C, h, w] (mean channels then log-variance channels).
    ag::Var moments(ag::Tape& tape, const ag::Var& x) const;
    // z [C,h,w] (unscaled) -> [1,H,W] in (0,1).
    ag::Var decode(ag::Tape& tape, const ag::Var& z) const;

    struct LossParts {
        ag::Var total;
        double mse = 0.0;
        double kl = 0.0;
    };
    // Reparameterised sample, reconstruction MSE + kl_weight * KL.
    LossParts loss(ag::Tape& tape, const Tensor& x, Rng& rng) const;

    Tensor encode(const Tensor& x) const;       // scaled posterior mean
    Tensor decode(const Tensor& z) const;       // from scaled latent
    Tensor encode(const MelSpectrogram& m) const;
    MelSpectrogram decode_mel(const Tensor& z, double log_min, double log_max) const;
    double reconstruction_mse(const Tensor& x) const;

    void save_to(Container& c) const;
    void save(const std::filesystem::path& path) const;
    static Vae from_container(const Container& c);
    static Vae load(const std::filesystem::path& path);

private:
    void require_input(const Tensor& x) const;
    void require_latent(const Tensor& z) const;

    VaeConfig cfg_;
    ParamStore params_;
    double latent_scale_ = 1.0;
};

Tensor mel_to_tensor(const MelSpectrogram& m);

struct VaeEpochStats {
    int epoch = 0;
    double loss = 0.0;
    double mse = 0.0;
    double kl = 0.0;
    double wall_ms = 0.0;
};

struct VaeTrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double lr = 1e-3;
    // Cosine decay from lr to lr * lr_floor over the scheduled epochs (1 = constant).
    double lr_floor = 0.1;
    double clip_norm = 1.0;
    // Stop once an epoch's mean training MSE is below this (0 disables).
    double target_mse = 0.0;
    std::uint64_t seed = 0;
    std::function<void(const VaeEpochStats&)> on_epoch;
};

// Trains in place and sets the latent scale to 1 / std of the dataset latents.
std::vector<VaeEpochStats> train_vae(Vae& vae, const std::vector<Tensor>& data, const VaeTrainConfig& cfg);

// 1 / standard deviation of all latent elements over `data` (1 when degenerate).
double estimate_latent_scale(const Vae& vae, const std::vector<Tensor>& data);

}  // namespace dualdiff
