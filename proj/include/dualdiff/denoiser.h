#pragma once

#include "dualdiff/autograd.h"
#include "dualdiff/dual_process.h"
#include "dualdiff/params.h"

#include <span>
#include <string>
#include <vector>

namespace dualdiff {

struct DenoiserConfig {
    int latent_channels = 1;
    int latent_size = 32;
    std::vector<int> channels{16, 32, 64, 64};  // one entry per scale
    int cond_dim = 96;
    int time_dim = 32;
    int embed_dim = 64;
    // Reshape c to [cond_dim / latent_size, 1, W], repeat it down the rows and
    // feed it as extra input channels, so time-indexed conditioning lines up
    // with latent columns. Requires cond_dim % latent_size == 0.
    bool column_conditioning = true;
    // Single-head cross-attention from feature pixels to the conditioning
    // columns after each encoder/decoder residual block.
    bool cross_attention = false;
    int attention_dim = 16;

    int scales() const { return static_cast<int>(channels.size()); }
    int cond_columns() const { return cond_dim / latent_size; }
    void validate() const;
};

// Sinusoidal embedding: (sin(t f_0), cos(t f_0), sin(t f_1), ...), with
// f_i = 10000^(-i / (dim/2)); an odd trailing slot is zero.
std::vector<double> time_embed(double t, int dim);

// Conditional noise predictor eps_theta(z_t, t, c): a U-Net whose residual
// blocks are modulated (scale/shift) by an MLP over [time_embed(t) || c].
// The positive and negative branches share these parameters; only the
// conditioning vector differs.
class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, ParamStore& store, Rng& rng);
    Denoiser(const DenoiserConfig& cfg, const ParamStore& store);

    const DenoiserConfig& config() const { return cfg_; }
    const ParamStore& store() const { return *store_; }

    ag::Var forward(ag::Tape& tape, const ag::Var& z, int t, const ag::Var& cond) const;
    Tensor predict(const Tensor& z, int t, std::span<const double> cond) const;

    NoisePredictor predictor() const;

private:
    void create(Rng& rng, ParamStore& store);
    ag::Var p(const std::string& name) const { return store_->get("denoiser." + name); }
    ag::Var res_block(ag::Tape& tape, const std::string& name, const ag::Var& x, const ag::Var& emb) const;
    ag::Var attend(ag::Tape& tape, const std::string& name, const ag::Var& h, const ag::Var& tokens) const;

    DenoiserConfig cfg_;
    const ParamStore* store_;
    std::vector<int> in_ch_;  // per encoder level input channels
};

}  // namespace dualdiff
