#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

namespace dualdiff {

struct Waveform {
    std::vector<double> samples;
    int sample_rate = 22050;

    double duration() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

struct AudioConfig {
    int sample_rate = 22050;
    int fft_size = 2048;
    int hop = 512;
    int mel_bins = 256;
    int frames = 256;        // spectrogram width after padding
    double clip_seconds = 5.0;
    double fmin = 0.0;
    double fmax = 11025.0;
    double log_ref = 1e-5;   // log(1 + S / log_ref)
    int griffin_lim_iters = 64;

    int clip_samples() const;
    // Frames that carry audio; the rest of the image is floor padding.
    int valid_frames() const;
};

// bins x frames image in [0,1], stored bin-major (row = mel bin, col = frame).
// log_min/log_max are the per-clip log-amplitude range used to normalise,
// kept so the image can be inverted.
struct MelSpectrogram {
    int bins = 0;
    int frames = 0;
    std::vector<double> values;
    double log_min = 0.0;
    double log_max = 0.0;

    double at(int bin, int frame) const {
        return values[static_cast<std::size_t>(bin) * frames + frame];
    }
    double& at(int bin, int frame) { return values[static_cast<std::size_t>(bin) * frames + frame]; }
};

// Centred short-time Fourier transform with a periodic Hann window; frame k
// is centred on sample k * hop and samples outside the signal read as zero.
class Stft {
public:
    Stft(int fft_size, int hop);
    ~Stft();
    Stft(const Stft&) = delete;
    Stft& operator=(const Stft&) = delete;

    int fft_size() const { return n_; }
    int hop() const { return hop_; }
    int bins() const { return n_ / 2 + 1; }

    // frames x bins complex spectrum.
    std::vector<std::complex<double>> forward(std::span<const double> x, int frames) const;
    std::vector<double> magnitude(std::span<const double> x, int frames) const;
    // Weighted overlap-add inverse of `forward`.
    std::vector<double> inverse(std::span<const std::complex<double>> spec, int frames,
                                int length) const;

    const std::vector<double>& window() const { return window_; }

private:
    struct Plans;
    int n_;
    int hop_;
    std::vector<double> window_;
    std::unique_ptr<Plans> plans_;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// mel_bins x (fft_size/2 + 1) triangular filters, HTK mel scale, unit peak.
std::vector<double> mel_filterbank(const AudioConfig& cfg);

// Raw log(1 + mel / ref) image before normalisation: mel_bins x valid_frames,
// bin-major. Requires exactly clip_samples() samples.
std::vector<double> log_mel_frames(std::span<const double> samples, const AudioConfig& cfg);

MelSpectrogram wav_to_mel(const Waveform& w, const AudioConfig& cfg = {});
Waveform mel_to_wav(const MelSpectrogram& m, int iterations, const AudioConfig& cfg = {});

// Crops or zero-pads to exactly clip_samples(); rejects clips outside
// [clip_seconds - 0.1, clip_seconds + 0.1].
std::vector<double> fit_clip(const Waveform& w, const AudioConfig& cfg);

// 16-bit PCM mono little-endian WAV.
Waveform read_wav(const std::filesystem::path& path, int expected_rate = 22050);
void write_wav(const std::filesystem::path& path, const Waveform& w);

// Flat spectrogram file: eight little-endian uint32 header words
// (magic "DMEL", version, rows, cols, sample_rate, hop, fft_size, reserved),
// rows*cols little-endian float32 values, then two float32 (log_min, log_max).
void write_spectrogram(const std::filesystem::path& path, const MelSpectrogram& m,
                       const AudioConfig& cfg = {});
MelSpectrogram read_spectrogram(const std::filesystem::path& path);

// Test signals.
Waveform sine_wave(double freq_hz, double seconds, double amplitude = 0.5, int sample_rate = 22050);
// Short decaying noise bursts starting at each time in `times` (seconds).
Waveform click_track(const std::vector<double>& times, double seconds, double amplitude = 0.8,
                     int sample_rate = 22050, std::uint64_t seed = 1);
std::vector<double> beat_times(double bpm, double seconds, double offset = 0.0);

}  // namespace dualdiff
