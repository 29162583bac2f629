#pragma once

#include "dualdiff/autograd.h"
#include "dualdiff/container.h"
#include "dualdiff/random.h"

#include <string>
#include <utility>
#include <vector>

namespace dualdiff {

using NamedParam = std::pair<std::string, ag::Var>;

// Ordered set of named trainable tensors. Names are globally unique within a
// checkpoint, so each owner prefixes its own ("denoiser.", "vae.", ...).
class ParamStore {
public:
    ag::Var add(const std::string& name, Tensor init);
    ag::Var get(const std::string& name) const;
    bool contains(const std::string& name) const;

    const std::vector<NamedParam>& entries() const { return entries_; }
    std::size_t scalar_count() const;

    void zero_grad();
    void set_trainable(bool trainable);

    void save_to(Container& c) const;
    // Every parameter must be present with a matching shape.
    void load_from(const Container& c);

private:
    std::vector<NamedParam> entries_;
};

// N(0, gain^2 / fan_in) initialisation.
Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng, double gain = 1.0);

double grad_norm(const std::vector<NamedParam>& params);

// Momentum-free adaptive first-order optimiser (RMSProp) with global
// gradient-norm clipping.
class RmsProp {
public:
    struct Config {
        double lr = 1e-4;
        double decay = 0.99;
        double eps = 1e-8;
        double clip_norm = 1.0;
    };

    RmsProp(std::vector<NamedParam> params, Config cfg);

    // Scales accumulated gradients by grad_scale (e.g. 1/batch), clips, applies
    // one update and clears gradients. Returns the clipped-from norm.
    double step(double grad_scale = 1.0);

    const Config& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    void save_to(Container& c) const;
    void load_from(const Container& c);

private:
    std::vector<NamedParam> params_;
    std::vector<Tensor> sq_avg_;
    Config cfg_;
    long long steps_ = 0;
};

}  // namespace dualdiff
