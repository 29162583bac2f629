#include "dualdiff/metrics.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dualdiff {

void BeatVector::validate(double duration) const {
    for (std::size_t i = 0; i < times.size(); ++i) {
        const double t = times[i];
        if (!std::isfinite(t) || t < 0.0) throw std::invalid_argument("beat time must be finite and >= 0");
        if (duration > 0.0 && t > duration) throw std::invalid_argument("beat time beyond clip duration");
        if (i > 0 && !(t > times[i - 1])) throw std::invalid_argument("beat times must be strictly increasing");
    }
}

std::vector<double> spectral_flux(const Waveform& w, const OnsetConfig& cfg) {
    if (w.sample_rate <= 0) throw std::invalid_argument("detect_onsets: bad sample rate");
    if (w.samples.empty()) return {};
    const Stft stft(cfg.window, cfg.hop);
    const int frames = static_cast<int>((w.samples.size() + static_cast<std::size_t>(cfg.hop) - 1) / cfg.hop) + 1;
    const int nb = stft.bins();
    const auto mag = stft.magnitude(w.samples, frames);
    std::vector<double> flux(static_cast<std::size_t>(frames), 0.0);
    const std::vector<double> before(static_cast<std::size_t>(nb), 0.0);  // silence precedes the clip
    for (int k = 0; k < frames; ++k) {
        const double* cur = mag.data() + static_cast<std::size_t>(k) * nb;
        const double* prev = k > 0 ? cur - nb : before.data();
        double s = 0.0;
        for (int b = 0; b < nb; ++b) s += std::max(0.0, cur[b] - prev[b]);
        flux[static_cast<std::size_t>(k)] = s;
    }
    const double peak = *std::max_element(flux.begin(), flux.end());
    if (peak < cfg.silence_flux) return std::vector<double>(flux.size(), 0.0);
    for (double& f : flux) f /= peak;
    return flux;
}

BeatVector detect_onsets(const Waveform& w, double sensitivity, const OnsetConfig& cfg) {
    if (!(sensitivity >= 0.0)) throw std::invalid_argument("detect_onsets: sensitivity must be >= 0");
    BeatVector out;
    const auto flux = spectral_flux(w, cfg);
    const int n = static_cast<int>(flux.size());
    if (n == 0 || *std::max_element(flux.begin(), flux.end()) <= 0.0) return out;

    std::vector<double> prefix(static_cast<std::size_t>(n) + 1, 0.0);
    for (int i = 0; i < n; ++i) prefix[static_cast<std::size_t>(i) + 1] = prefix[static_cast<std::size_t>(i)] + flux[static_cast<std::size_t>(i)];

    struct Peak {
        int frame;
        double strength;
    };
    std::vector<Peak> peaks;
    for (int k = 0; k < n; ++k) {
        const double f = flux[static_cast<std::size_t>(k)];
        if (f <= 0.0) continue;
        bool is_max = true;
        for (int j = std::max(0, k - cfg.peak_radius); j <= std::min(n - 1, k + cfg.peak_radius) && is_max; ++j) {
            const double g = flux[static_cast<std::size_t>(j)];
            // ties resolve to the earliest frame of a plateau
            if (g > f || (g == f && j < k)) is_max = false;
        }
        if (!is_max) continue;
        const int lo = std::max(0, k - cfg.mean_radius), hi = std::min(n - 1, k + cfg.mean_radius);
        const double mean = (prefix[static_cast<std::size_t>(hi) + 1] - prefix[static_cast<std::size_t>(lo)]) / (hi - lo + 1);
        if (f >= mean + cfg.delta * sensitivity) peaks.push_back({k, f});
    }

    std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.strength > b.strength; });
    const double frame_sec = static_cast<double>(cfg.hop) / w.sample_rate;
    const double duration = w.duration();
    std::vector<double> kept;
    for (const Peak& p : peaks) {
        const double t = std::min(p.frame * frame_sec, duration);
        bool clash = false;
        for (double u : kept) {
            if (std::abs(u - t) < cfg.min_gap) {
                clash = true;
                break;
            }
        }
        if (!clash) kept.push_back(t);
    }
    std::sort(kept.begin(), kept.end());
    kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
    out.times = std::move(kept);
    return out;
}

double harmonic_mean(double a, double b) { return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0; }

AlignmentResult AlignmentResult::from_counts(int b_t, int b_g, int b_a) {
    if (b_t < 0 || b_g < 0 || b_a < 0 || b_a > std::min(b_t, b_g)) {
        throw std::invalid_argument("alignment counts must satisfy 0 <= B_a <= min(B_t, B_g)");
    }
    AlignmentResult r;
    r.b_t = b_t;
    r.b_g = b_g;
    r.b_a = b_a;
    r.bcs = b_g > 0 ? static_cast<double>(b_a) / b_g : 0.0;
    r.bhs = b_t > 0 ? static_cast<double>(b_a) / b_t : 0.0;
    r.f1 = harmonic_mean(r.bcs, r.bhs);
    return r;
}

AlignmentResult align_beats(const BeatVector& gt, const BeatVector& gen, double window) {
    if (!(window >= 0.0)) throw std::invalid_argument("align_beats: window must be >= 0");
    gt.validate();
    gen.validate();
    const auto& a = gt.times;
    const auto& b = gen.times;
    std::size_t i = 0, j = 0;
    int matched = 0;
    while (i < a.size() && j < b.size()) {
        if (b[j] < a[i] - window) {
            ++j;
        } else if (a[i] < b[j] - window) {
            ++i;
        } else {
            ++matched;
            ++i;
            ++j;
        }
    }
    return AlignmentResult::from_counts(static_cast<int>(a.size()), static_cast<int>(b.size()), matched);
}

AggregateScores aggregate_scores(const std::vector<AlignmentResult>& results) {
    if (results.empty()) throw std::invalid_argument("aggregate_scores: empty result list");
    const double n = static_cast<double>(results.size());
    double mc = 0.0, mh = 0.0;
    for (const auto& r : results) {
        mc += r.bcs;
        mh += r.bhs;
    }
    mc /= n;
    mh /= n;
    double vc = 0.0, vh = 0.0;
    for (const auto& r : results) {
        vc += (r.bcs - mc) * (r.bcs - mc);
        vh += (r.bhs - mh) * (r.bhs - mh);
    }
    AggregateScores s;
    s.bcs = 100.0 * mc;
    s.bhs = 100.0 * mh;
    s.csd = 100.0 * std::sqrt(vc / n);
    s.hsd = 100.0 * std::sqrt(vh / n);
    s.f1 = harmonic_mean(s.bcs, s.bhs);
    return s;
}

EmbeddingStats EmbeddingStats::from_samples(const std::vector<std::vector<double>>& rows) {
    if (rows.size() < 2) throw std::invalid_argument("embedding statistics need at least 2 samples");
    const std::size_t d = rows.front().size();
    if (d == 0) throw std::invalid_argument("embedding dimension must be positive");
    EmbeddingStats s;
    s.n = static_cast<int>(rows.size());
    s.mu.assign(d, 0.0);
    for (const auto& r : rows) {
        if (r.size() != d) throw std::invalid_argument("embedding dimension mismatch across samples");
        for (std::size_t k = 0; k < d; ++k) s.mu[k] += r[k];
    }
    for (double& m : s.mu) m /= static_cast<double>(s.n);
    s.sigma.assign(d * d, 0.0);
    for (const auto& r : rows) {
        for (std::size_t p = 0; p < d; ++p) {
            const double dp = r[p] - s.mu[p];
            for (std::size_t q = p; q < d; ++q) s.sigma[p * d + q] += dp * (r[q] - s.mu[q]);
        }
    }
    for (std::size_t p = 0; p < d; ++p) {
        for (std::size_t q = p; q < d; ++q) {
            s.sigma[p * d + q] /= static_cast<double>(s.n - 1);
            s.sigma[q * d + p] = s.sigma[p * d + q];
        }
    }
    return s;
}

namespace {

constexpr double kPsdTolerance = -1e-8;

Eigen::MatrixXd covariance(const EmbeddingStats& s, const char* which) {
    const int d = s.dim();
    if (s.sigma.size() != static_cast<std::size_t>(d) * d) {
        throw std::invalid_argument(std::string("frechet_distance: covariance of ") + which + " is not d x d");
    }
    Eigen::MatrixXd m = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        s.sigma.data(), d, d);
    return 0.5 * (m + m.transpose());
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw std::runtime_error(std::string("eigendecomposition failed for ") + what);
    Eigen::VectorXd ev = es.eigenvalues();
    for (int i = 0; i < ev.size(); ++i) {
        if (ev[i] < kPsdTolerance) {
            throw std::invalid_argument(std::string(what) + " is not positive semidefinite (eigenvalue " +
                                        std::to_string(ev[i]) + ")");
        }
        ev[i] = std::sqrt(std::max(ev[i], 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

namespace {

double frechet_one_way(const Eigen::MatrixXd& sa, const Eigen::MatrixXd& sb, const Eigen::MatrixXd& ra) {
    // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2); the inner product is symmetric PSD.
    const Eigen::MatrixXd inner = ra * sb * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    double tr_sqrt = 0.0;
    for (int i = 0; i < es.eigenvalues().size(); ++i) tr_sqrt += std::sqrt(std::max(es.eigenvalues()[i], 0.0));
    return sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

}  // namespace

double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b) {
    if (a.dim() == 0 || a.dim() != b.dim()) throw std::invalid_argument("frechet_distance: dimension mismatch");
    const Eigen::MatrixXd sa = covariance(a, "a");
    const Eigen::MatrixXd sb = covariance(b, "b");
    const Eigen::MatrixXd ra = psd_sqrt(sa, "covariance a");
    const Eigen::MatrixXd rb = psd_sqrt(sb, "covariance b");
    // Near-singular covariances make the one-sided trace term differ in the
    // last digits depending on which side is square-rooted; average both.
    const double cov_term = 0.5 * (frechet_one_way(sa, sb, ra) + frechet_one_way(sb, sa, rb));
    double mean_term = 0.0;
    for (int k = 0; k < a.dim(); ++k) {
        const double d = a.mu[static_cast<std::size_t>(k)] - b.mu[static_cast<std::size_t>(k)];
        mean_term += d * d;
    }
    return std::max(0.0, mean_term + cov_term);
}

std::vector<double> toy_embedder(const Waveform& w) {
    constexpr int kBands = 8, kWindows = 4, kFft = 1024, kHop = 256;
    constexpr double kFloor = 1e-10;
    std::vector<double> out(static_cast<std::size_t>(kBands) * kWindows, std::log(kFloor));
    if (w.samples.empty() || w.sample_rate <= 0) return out;

    AudioConfig cfg;
    cfg.sample_rate = w.sample_rate;
    cfg.fft_size = kFft;
    cfg.mel_bins = kBands;
    cfg.fmin = 0.0;
    cfg.fmax = w.sample_rate / 2.0;
    const auto fb = mel_filterbank(cfg);
    const Stft stft(kFft, kHop);
    const int frames = static_cast<int>((w.samples.size() + kHop - 1) / kHop);
    const int nb = stft.bins();
    const auto mag = stft.magnitude(w.samples, frames);
    for (int win = 0; win < kWindows; ++win) {
        const int f0 = win * frames / kWindows, f1 = (win + 1) * frames / kWindows;
        if (f1 <= f0) continue;
        for (int band = 0; band < kBands; ++band) {
            const double* filt = fb.data() + static_cast<std::size_t>(band) * nb;
            double e = 0.0;
            for (int f = f0; f < f1; ++f) {
                const double* row = mag.data() + static_cast<std::size_t>(f) * nb;
                for (int k = 0; k < nb; ++k) e += filt[k] * row[k] * row[k];
            }
            out[static_cast<std::size_t>(band) * kWindows + win] = std::log(kFloor + e / (f1 - f0) / kFft);
        }
    }
    return out;
}

double frechet_audio_distance(const std::vector<Waveform>& a, const std::vector<Waveform>& b,
                              const AudioEmbedder& embed) {
    std::vector<std::vector<double>> ea, eb;
    for (const auto& w : a) ea.push_back(embed(w));
    for (const auto& w : b) eb.push_back(embed(w));
    return frechet_distance(EmbeddingStats::from_samples(ea), EmbeddingStats::from_samples(eb));
}

}  // namespace dualdiff
