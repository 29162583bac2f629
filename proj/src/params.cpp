#include "dualdiff/params.h"

#include <cmath>
#include <stdexcept>

namespace dualdiff {

ag::Var ParamStore::add(const std::string& name, Tensor init) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto v = ag::leaf(std::move(init), true);
    entries_.emplace_back(name, v);
    return v;
}

ag::Var ParamStore::get(const std::string& name) const {
    for (const auto& [n, v] : entries_) {
        if (n == name) return v;
    }
    throw std::out_of_range("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& [n, v] : entries_) {
        if (n == name) return true;
    }
    return false;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v->value.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [n, v] : entries_) v->grad = Tensor();
}

void ParamStore::set_trainable(bool trainable) {
    for (auto& [n, v] : entries_) v->requires_grad = trainable;
}

void ParamStore::save_to(Container& c) const {
    for (const auto& [n, v] : entries_) c.put(n, v->value);
}

void ParamStore::load_from(const Container& c) {
    for (auto& [n, v] : entries_) {
        const Tensor& t = c.array(n);
        if (!t.same_shape(v->value)) {
            throw std::runtime_error("parameter '" + n + "' has shape " + t.shape_str() +
                                     " in checkpoint, expected " + v->value.shape_str());
        }
        v->value = t;
    }
}

Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng, double gain) {
    Tensor t(std::move(shape));
    fill_gaussian(rng, t.data(), gain / std::sqrt(static_cast<double>(fan_in)));
    return t;
}

double grad_norm(const std::vector<NamedParam>& params) {
    double s = 0.0;
    for (const auto& [n, v] : params) {
        if (!v->grad.empty()) s += v->grad.squared_norm();
    }
    return std::sqrt(s);
}

RmsProp::RmsProp(std::vector<NamedParam> params, Config cfg) : params_(std::move(params)), cfg_(cfg) {
    sq_avg_.reserve(params_.size());
    for (const auto& [n, v] : params_) sq_avg_.push_back(Tensor::zeros_like(v->value));
}

double RmsProp::step(double grad_scale) {
    double norm = 0.0;
    for (const auto& [n, v] : params_) {
        if (v->grad.empty()) continue;
        for (double& g : v->grad.values()) g *= grad_scale;
        norm += v->grad.squared_norm();
    }
    norm = std::sqrt(norm);
    if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient norm");
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    // Debias the running square like Adam does; without it the first updates
    // are ~10x lr per weight and early training spikes.
    const double debias = 1.0 - std::pow(cfg_.decay, static_cast<double>(steps_ + 1));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& v = params_[i].second;
        if (v->grad.empty() || !v->requires_grad) {
            v->grad = Tensor();
            continue;
        }
        Tensor& sq = sq_avg_[i];
        for (std::size_t k = 0; k < sq.size(); ++k) {
            const double g = v->grad[k] * clip;
            sq[k] = cfg_.decay * sq[k] + (1.0 - cfg_.decay) * g * g;
            v->value[k] -= cfg_.lr * g / (std::sqrt(sq[k] / debias) + cfg_.eps);
        }
        v->grad = Tensor();
    }
    ++steps_;
    return norm;
}

void RmsProp::save_to(Container& c) const {
    for (std::size_t i = 0; i < params_.size(); ++i) c.put("optim.sq." + params_[i].first, sq_avg_[i]);
    c.set("optim.steps", steps_);
    c.set("optim.lr", cfg_.lr);
}

void RmsProp::load_from(const Container& c) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Tensor& t = c.array("optim.sq." + params_[i].first);
        if (!t.same_shape(sq_avg_[i])) throw std::runtime_error("optimizer state shape mismatch");
        sq_avg_[i] = t;
    }
    steps_ = c.get_int("optim.steps");
}

}  // namespace dualdiff
