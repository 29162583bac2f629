#pragma once

#include <utility>
#include <vector>

namespace dualdiff {

// Variance schedule beta_1..beta_T with a_t = 1 - beta_t and the cumulative
// products abar_t. Timesteps are 1-based throughout the public interface.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    int steps() const { return static_cast<int>(beta_.size()); }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }

    double beta(int t) const { return beta_[index(t)]; }
    double alpha(int t) const { return alpha_[index(t)]; }
    double alpha_bar(int t) const { return alpha_bar_[index(t)]; }

    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

    friend NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end);
    friend NoiseSchedule schedule_from_betas(std::vector<double> betas);

private:
    std::size_t index(int t) const;

    double beta_start_ = 0.0;
    double beta_end_ = 0.0;
    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
};

// beta linearly interpolated from beta_start (t = 1) to beta_end (t = T).
NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end);

// Arbitrary betas in (0, 1); used for respaced sampling chains.
NoiseSchedule schedule_from_betas(std::vector<double> betas);

// (sqrt(abar_t), sqrt(1 - abar_t)).
std::pair<double, double> marginal_coeffs(const NoiseSchedule& s, int t);

}  // namespace dualdiff
