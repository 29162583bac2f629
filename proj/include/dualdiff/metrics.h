#pragma once

#include "dualdiff/audio.h"

#include <functional>
#include <string>
#include <vector>

namespace dualdiff {

enum class BeatSource { ground_truth, generated };

// Sorted onset times in seconds.
struct BeatVector {
    std::vector<double> times;
    BeatSource source = BeatSource::generated;

    std::size_t size() const { return times.size(); }
    // Throws unless times are finite, non-negative and strictly increasing
    // (and no later than `duration` when it is positive).
    void validate(double duration = 0.0) const;
};

struct OnsetConfig {
    int window = 1024;
    int hop = 128;
    int peak_radius = 3;       // local maximum over +-peak_radius frames
    int mean_radius = 16;      // moving-mean half width in frames
    double delta = 0.1;        // threshold above the moving mean, in units of max flux
    double min_gap = 0.05;     // seconds
    double silence_flux = 1e-6;
};

// Spectral-flux onsets: half-wave rectified magnitude increase between
// consecutive frames, normalised by its maximum, then adaptive peak picking
// with threshold mean + delta * sensitivity.
BeatVector detect_onsets(const Waveform& w, double sensitivity = 1.0, const OnsetConfig& cfg = {});

// Per-frame normalised flux (exposed for diagnostics and tests).
std::vector<double> spectral_flux(const Waveform& w, const OnsetConfig& cfg = {});

struct AlignmentResult {
    int b_t = 0;  // ground-truth beats
    int b_g = 0;  // generated beats
    int b_a = 0;  // aligned pairs
    double bcs = 0.0;
    double bhs = 0.0;
    double f1 = 0.0;

    static AlignmentResult from_counts(int b_t, int b_g, int b_a);
};

// One-to-one matching of generated to ground-truth onsets within +-window
// seconds. Both lists are swept in time order and each generated onset takes
// the earliest ground-truth onset still compatible with it, which yields a
// maximum matching for interval constraints.
AlignmentResult align_beats(const BeatVector& gt, const BeatVector& gen, double window = 0.1);

struct AggregateScores {
    double bcs = 0.0;  // all x100
    double csd = 0.0;
    double bhs = 0.0;
    double hsd = 0.0;
    double f1 = 0.0;
};

AggregateScores aggregate_scores(const std::vector<AlignmentResult>& results);
double harmonic_mean(double a, double b);

struct EmbeddingStats {
    std::vector<double> mu;
    std::vector<double> sigma;  // d x d row-major
    int n = 0;

    int dim() const { return static_cast<int>(mu.size()); }
    static EmbeddingStats from_samples(const std::vector<std::vector<double>>& rows);
};

double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b);

using AudioEmbedder = std::function<std::vector<double>(const Waveform&)>;

// Log band energies on an 8-band mel scale pooled over 4 equal time windows.
std::vector<double> toy_embedder(const Waveform& w);
inline constexpr int kToyEmbeddingDim = 32;

double frechet_audio_distance(const std::vector<Waveform>& a, const std::vector<Waveform>& b,
                              const AudioEmbedder& embed = toy_embedder);

}  // namespace dualdiff
