#include "dualdiff/schedule.h"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dualdiff {

std::size_t NoiseSchedule::index(int t) const {
    if (t < 1 || t > steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                                std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
    if (betas.empty()) throw std::invalid_argument("schedule needs at least one step");
    NoiseSchedule s;
    s.beta_ = std::move(betas);
    s.alpha_.resize(s.beta_.size());
    s.alpha_bar_.resize(s.beta_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < s.beta_.size(); ++i) {
        const double b = s.beta_[i];
        if (!(b > 0.0 && b < 1.0)) {
            throw std::invalid_argument("beta_" + std::to_string(i + 1) + " = " + std::to_string(b) +
                                        " outside (0, 1)");
        }
        s.alpha_[i] = 1.0 - b;
        prod *= s.alpha_[i];
        s.alpha_bar_[i] = prod;
    }
    s.beta_start_ = s.beta_.front();
    s.beta_end_ = s.beta_.back();
    return s;
}

NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("schedule step count must be positive");
    if (!(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0)) {
        throw std::invalid_argument("beta endpoints must lie in (0, 1)");
    }
    if (beta_start > beta_end) throw std::invalid_argument("beta_start exceeds beta_end");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int t = 1; t <= steps; ++t) {
        betas[static_cast<std::size_t>(t - 1)] =
            steps == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) /
                                          static_cast<double>(steps - 1);
    }
    NoiseSchedule s = schedule_from_betas(std::move(betas));
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    return s;
}

std::pair<double, double> marginal_coeffs(const NoiseSchedule& s, int t) {
    const double ab = s.alpha_bar(t);
    return {std::sqrt(ab), std::sqrt(1.0 - ab)};
}

}  // namespace dualdiff
