#pragma once

// Shared helpers for the unit tests: finite-difference gradient checks and
// small random tensors.

#include "dualdiff/autograd.h"
#include "dualdiff/random.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace dualdiff::testing {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    fill_gaussian(rng, t.data(), stddev);
    return t;
}

struct GradReport {
    double max_rel = 0.0;  // worst ||analytic - numeric|| / max(||analytic||, ||numeric||) over groups
    std::string worst;
    int groups = 0;
};

// Compares backprop gradients of `loss` against central differences for up
// to `per_group` randomly chosen entries of every variable in `vars`.
// `min_scale` floors the normaliser: a group whose sampled gradients are all
// far below it is judged on absolute error, since central differences only
// resolve gradients to about 1e-16 * |loss| / h.
inline GradReport grad_check(const std::vector<std::pair<std::string, ag::Var>>& vars,
                             const std::function<ag::Var(ag::Tape&)>& loss, int per_group = 16,
                             double h = 1e-5, std::uint64_t seed = 7, double min_scale = 1e-12) {
    for (auto& [n, v] : vars) {
        v->requires_grad = true;
        v->grad = Tensor();
    }
    {
        ag::Tape tape;
        tape.backward(loss(tape));
    }
    auto value = [&] {
        ag::Tape tape;
        return loss(tape)->value[0];
    };
    Rng rng(seed);
    GradReport rep;
    for (auto& [name, v] : vars) {
        const std::size_t n = v->value.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
        idx.resize(std::min<std::size_t>(n, static_cast<std::size_t>(per_group)));
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i : idx) {
            const double a = v->grad.empty() ? 0.0 : v->grad[i];
            const double orig = v->value[i];
            v->value[i] = orig + h;
            const double lp = value();
            v->value[i] = orig - h;
            const double lm = value();
            v->value[i] = orig;
            const double num = (lp - lm) / (2.0 * h);
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        const double scale = std::max(std::sqrt(std::max(na, nn)), min_scale);
        const double rel = std::sqrt(diff) / scale;
        ++rep.groups;
        if (rel > rep.max_rel) {
            rep.max_rel = rel;
            rep.worst = name;
        }
    }
    return rep;
}

}  // namespace dualdiff::testing
