#include "dualdiff/audio.h"

#include "dualdiff/random.h"

#include <Eigen/Dense>
#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <tuple>

namespace dualdiff {

int AudioConfig::clip_samples() const {
    return static_cast<int>(std::lround(clip_seconds * sample_rate));
}

int AudioConfig::valid_frames() const { return (clip_samples() + hop - 1) / hop; }

// ---------------------------------------------------------------------------
// STFT

namespace {
std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace

struct Stft::Plans {
    double* real = nullptr;
    fftw_complex* spec = nullptr;
    fftw_plan r2c = nullptr;
    fftw_plan c2r = nullptr;

    explicit Plans(int n) {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        real = fftw_alloc_real(static_cast<std::size_t>(n));
        spec = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
        r2c = fftw_plan_dft_r2c_1d(n, real, spec, FFTW_ESTIMATE);
        c2r = fftw_plan_dft_c2r_1d(n, spec, real, FFTW_ESTIMATE);
    }
    ~Plans() {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fftw_destroy_plan(r2c);
        fftw_destroy_plan(c2r);
        fftw_free(real);
        fftw_free(spec);
    }
};

Stft::Stft(int fft_size, int hop) : n_(fft_size), hop_(hop) {
    if (fft_size < 2 || fft_size % 2 != 0) throw std::invalid_argument("FFT size must be even");
    if (hop < 1) throw std::invalid_argument("hop must be positive");
    window_.resize(static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) {
        window_[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n_);
    }
    plans_ = std::make_unique<Plans>(n_);
}

Stft::~Stft() = default;

std::vector<std::complex<double>> Stft::forward(std::span<const double> x, int frames) const {
    const int nb = bins();
    const long long len = static_cast<long long>(x.size());
    std::vector<std::complex<double>> out(static_cast<std::size_t>(frames) * nb);
    for (int k = 0; k < frames; ++k) {
        const long long start = static_cast<long long>(k) * hop_ - n_ / 2;
        for (int i = 0; i < n_; ++i) {
            const long long idx = start + i;
            plans_->real[i] = (idx >= 0 && idx < len) ? x[static_cast<std::size_t>(idx)] * window_[static_cast<std::size_t>(i)] : 0.0;
        }
        fftw_execute(plans_->r2c);
        auto* row = out.data() + static_cast<std::size_t>(k) * nb;
        for (int b = 0; b < nb; ++b) row[b] = {plans_->spec[b][0], plans_->spec[b][1]};
    }
    return out;
}

std::vector<double> Stft::magnitude(std::span<const double> x, int frames) const {
    auto spec = forward(x, frames);
    std::vector<double> mag(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) mag[i] = std::abs(spec[i]);
    return mag;
}

std::vector<double> Stft::inverse(std::span<const std::complex<double>> spec, int frames,
                                  int length) const {
    const int nb = bins();
    if (spec.size() != static_cast<std::size_t>(frames) * nb) {
        throw std::invalid_argument("inverse STFT: spectrum size does not match frame count");
    }
    std::vector<double> out(static_cast<std::size_t>(length), 0.0);
    std::vector<double> wsum(static_cast<std::size_t>(length), 0.0);
    const double inv_n = 1.0 / n_;
    for (int k = 0; k < frames; ++k) {
        const auto* row = spec.data() + static_cast<std::size_t>(k) * nb;
        for (int b = 0; b < nb; ++b) {
            plans_->spec[b][0] = row[b].real();
            plans_->spec[b][1] = row[b].imag();
        }
        fftw_execute(plans_->c2r);
        const long long start = static_cast<long long>(k) * hop_ - n_ / 2;
        for (int i = 0; i < n_; ++i) {
            const long long idx = start + i;
            if (idx < 0 || idx >= length) continue;
            const double w = window_[static_cast<std::size_t>(i)];
            out[static_cast<std::size_t>(idx)] += plans_->real[i] * inv_n * w;
            wsum[static_cast<std::size_t>(idx)] += w * w;
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = wsum[i] > 1e-10 ? out[i] / wsum[i] : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Mel scale

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_filterbank(const AudioConfig& cfg) {
    const int nb = cfg.fft_size / 2 + 1;
    const int nm = cfg.mel_bins;
    if (nm < 1 || !(cfg.fmax > cfg.fmin) || cfg.fmin < 0.0) {
        throw std::invalid_argument("invalid mel filterbank configuration");
    }
    const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
    std::vector<double> edges(static_cast<std::size_t>(nm) + 2);
    for (int i = 0; i < nm + 2; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz(lo + (hi - lo) * i / (nm + 1));
    std::vector<double> fb(static_cast<std::size_t>(nm) * nb, 0.0);
    for (int m = 0; m < nm; ++m) {
        const double f0 = edges[static_cast<std::size_t>(m)];
        const double f1 = edges[static_cast<std::size_t>(m) + 1];
        const double f2 = edges[static_cast<std::size_t>(m) + 2];
        for (int k = 0; k < nb; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
            const double w = std::min((f - f0) / (f1 - f0), (f2 - f) / (f2 - f1));
            if (w > 0.0) fb[static_cast<std::size_t>(m) * nb + k] = w;
        }
    }
    return fb;
}

namespace {

using MelKey = std::tuple<int, int, int, double, double>;

MelKey mel_key(const AudioConfig& cfg) {
    return {cfg.sample_rate, cfg.fft_size, cfg.mel_bins, cfg.fmin, cfg.fmax};
}

const std::vector<double>& cached_filterbank(const AudioConfig& cfg) {
    static std::mutex mu;
    static std::map<MelKey, std::vector<double>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto [it, inserted] = cache.try_emplace(mel_key(cfg));
    if (inserted) it->second = mel_filterbank(cfg);
    return it->second;
}

// (fft_size/2+1) x mel_bins right pseudo-inverse fb^T (fb fb^T)^-1.
const Eigen::MatrixXd& cached_mel_pinv(const AudioConfig& cfg) {
    static std::mutex mu;
    static std::map<MelKey, Eigen::MatrixXd> cache;
    const auto& fb = cached_filterbank(cfg);
    std::lock_guard<std::mutex> lock(mu);
    auto [it, inserted] = cache.try_emplace(mel_key(cfg));
    if (inserted) {
        const int nb = cfg.fft_size / 2 + 1;
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
            fb.data(), cfg.mel_bins, nb);
        it->second = m.completeOrthogonalDecomposition().pseudoInverse();
    }
    return it->second;
}

const Stft& cached_stft(int n, int hop) {
    static std::mutex mu;
    static std::map<std::pair<int, int>, std::unique_ptr<Stft>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[{n, hop}];
    if (!slot) slot = std::make_unique<Stft>(n, hop);
    return *slot;
}

}  // namespace

std::vector<double> fit_clip(const Waveform& w, const AudioConfig& cfg) {
    if (w.samples.empty()) throw std::invalid_argument("empty waveform");
    if (w.sample_rate != cfg.sample_rate) {
        throw std::invalid_argument("waveform sample rate " + std::to_string(w.sample_rate) +
                                    " Hz, expected " + std::to_string(cfg.sample_rate) + " Hz");
    }
    const double d = w.duration();
    if (d < cfg.clip_seconds - 0.1 - 1e-9 || d > cfg.clip_seconds + 0.1 + 1e-9) {
        throw std::invalid_argument("clip duration " + std::to_string(d) + " s outside [" +
                                    std::to_string(cfg.clip_seconds - 0.1) + ", " +
                                    std::to_string(cfg.clip_seconds + 0.1) + "] s");
    }
    std::vector<double> x(w.samples);
    x.resize(static_cast<std::size_t>(cfg.clip_samples()), 0.0);
    return x;
}

std::vector<double> log_mel_frames(std::span<const double> samples, const AudioConfig& cfg) {
    if (samples.size() != static_cast<std::size_t>(cfg.clip_samples())) {
        throw std::invalid_argument("log_mel_frames: expected " + std::to_string(cfg.clip_samples()) +
                                    " samples");
    }
    const int frames = cfg.valid_frames();
    const int nb = cfg.fft_size / 2 + 1;
    const auto mag = cached_stft(cfg.fft_size, cfg.hop).magnitude(samples, frames);
    const auto& fb = cached_filterbank(cfg);
    std::vector<double> out(static_cast<std::size_t>(cfg.mel_bins) * frames);
    for (int m = 0; m < cfg.mel_bins; ++m) {
        const double* w = fb.data() + static_cast<std::size_t>(m) * nb;
        for (int f = 0; f < frames; ++f) {
            const double* row = mag.data() + static_cast<std::size_t>(f) * nb;
            double e = 0.0;
            for (int k = 0; k < nb; ++k) e += w[k] * row[k];
            out[static_cast<std::size_t>(m) * frames + f] = std::log1p(e / cfg.log_ref);
        }
    }
    return out;
}

MelSpectrogram wav_to_mel(const Waveform& w, const AudioConfig& cfg) {
    const auto x = fit_clip(w, cfg);
    for (double v : x) {
        if (!std::isfinite(v)) throw std::invalid_argument("waveform contains non-finite samples");
    }
    const int valid = cfg.valid_frames();
    if (valid > cfg.frames) throw std::invalid_argument("clip longer than spectrogram width");
    const auto logmel = log_mel_frames(x, cfg);
    const auto [mn, mx] = std::minmax_element(logmel.begin(), logmel.end());

    MelSpectrogram m;
    m.bins = cfg.mel_bins;
    m.frames = cfg.frames;
    m.values.assign(static_cast<std::size_t>(m.bins) * m.frames, 0.0);
    m.log_min = *mn;
    m.log_max = *mx;
    const double range = m.log_max - m.log_min;
    if (range > 1e-12) {
        for (int b = 0; b < m.bins; ++b) {
            for (int f = 0; f < valid; ++f) {
                const double v = (logmel[static_cast<std::size_t>(b) * valid + f] - m.log_min) / range;
                m.at(b, f) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return m;
}

Waveform mel_to_wav(const MelSpectrogram& m, int iterations, const AudioConfig& cfg) {
    if (m.bins != cfg.mel_bins || m.frames < cfg.valid_frames() ||
        m.values.size() != static_cast<std::size_t>(m.bins) * m.frames) {
        throw std::invalid_argument("mel_to_wav: spectrogram shape does not match configuration");
    }
    for (double v : m.values) {
        if (!std::isfinite(v)) throw std::invalid_argument("mel_to_wav: non-finite spectrogram value");
    }
    if (!std::isfinite(m.log_min) || !std::isfinite(m.log_max)) {
        throw std::invalid_argument("mel_to_wav: non-finite normalisation range");
    }
    if (iterations < 0) throw std::invalid_argument("mel_to_wav: negative iteration count");

    const int frames = cfg.valid_frames();
    const int nb = cfg.fft_size / 2 + 1;
    const int len = cfg.clip_samples();
    const double range = m.log_max - m.log_min;

    Eigen::MatrixXd mel(cfg.mel_bins, frames);
    for (int b = 0; b < cfg.mel_bins; ++b) {
        for (int f = 0; f < frames; ++f) {
            const double v = std::clamp(m.at(b, f), 0.0, 1.0);
            mel(b, f) = cfg.log_ref * std::expm1(v * range + m.log_min);
        }
    }
    const Eigen::MatrixXd lin = (cached_mel_pinv(cfg) * mel).cwiseMax(0.0);  // nb x frames

    const Stft& stft = cached_stft(cfg.fft_size, cfg.hop);
    std::vector<double> target(static_cast<std::size_t>(frames) * nb);
    for (int f = 0; f < frames; ++f) {
        for (int k = 0; k < nb; ++k) target[static_cast<std::size_t>(f) * nb + k] = lin(k, f);
    }

    Rng rng(0x6c696e);
    std::vector<std::complex<double>> spec(target.size());
    for (std::size_t i = 0; i < spec.size(); ++i) {
        spec[i] = std::polar(target[i], 2.0 * std::numbers::pi * uniform01(rng));
    }
    std::vector<double> x = stft.inverse(spec, frames, len);
    for (int it = 0; it < iterations; ++it) {
        const auto est = stft.forward(x, frames);
        for (std::size_t i = 0; i < spec.size(); ++i) {
            const double a = std::abs(est[i]);
            spec[i] = a > 1e-12 ? est[i] * (target[i] / a) : std::complex<double>(target[i], 0.0);
        }
        x = stft.inverse(spec, frames, len);
    }

    double peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    if (peak >= 1e-4) {
        const double g = 0.99 / peak;
        for (double& v : x) v *= g;
    }
    return Waveform{std::move(x), cfg.sample_rate};
}

// ---------------------------------------------------------------------------
// WAV

namespace {

static_assert(std::endian::native == std::endian::little, "WAV IO assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::vector<char>& buf, std::size_t off) {
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
}

}  // namespace

void write_wav(const std::filesystem::path& path, const Waveform& w) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
    os.write("RIFF", 4);
    put<std::uint32_t>(os, 36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    put<std::uint32_t>(os, 16);
    put<std::uint16_t>(os, 1);  // PCM
    put<std::uint16_t>(os, 1);  // mono
    put<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate) * 2);
    put<std::uint16_t>(os, 2);
    put<std::uint16_t>(os, 16);
    os.write("data", 4);
    put<std::uint32_t>(os, data_bytes);
    std::vector<std::int16_t> pcm(w.samples.size());
    for (std::size_t i = 0; i < pcm.size(); ++i) {
        double v = w.samples[i];
        if (!std::isfinite(v)) throw std::invalid_argument("write_wav: non-finite sample");
        v = std::clamp(v, -1.0, 1.0);
        pcm[i] = static_cast<std::int16_t>(std::lround(v * 32767.0));
    }
    os.write(reinterpret_cast<const char*>(pcm.data()), static_cast<std::streamsize>(pcm.size() * 2));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

Waveform read_wav(const std::filesystem::path& path, int expected_rate) {
    const std::string name = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + name);
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
        std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
        throw std::runtime_error(name + ": not a RIFF/WAVE file");
    }
    std::size_t pos = 12;
    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    while (pos + 8 <= buf.size()) {
        const std::string id(buf.data() + pos, 4);
        const std::uint32_t size = take<std::uint32_t>(buf, pos + 4);
        const std::size_t body = pos + 8;
        if (body + size > buf.size()) throw std::runtime_error(name + ": truncated '" + id + "' chunk");
        if (id == "fmt ") {
            if (size < 16) throw std::runtime_error(name + ": malformed fmt chunk");
            format = take<std::uint16_t>(buf, body);
            channels = take<std::uint16_t>(buf, body + 2);
            rate = take<std::uint32_t>(buf, body + 4);
            bits = take<std::uint16_t>(buf, body + 14);
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw std::runtime_error(name + ": data chunk before fmt chunk");
            if (format != 1 || bits != 16) {
                throw std::runtime_error(name + ": only 16-bit PCM is supported (format " +
                                         std::to_string(format) + ", " + std::to_string(bits) + " bits)");
            }
            if (channels != 1) {
                throw std::runtime_error(name + ": expected mono, got " + std::to_string(channels) +
                                         " channels");
            }
            if (static_cast<int>(rate) != expected_rate) {
                throw std::runtime_error(name + ": sample rate " + std::to_string(rate) +
                                         " Hz, expected " + std::to_string(expected_rate) + " Hz");
            }
            Waveform w;
            w.sample_rate = static_cast<int>(rate);
            w.samples.resize(size / 2);
            for (std::size_t i = 0; i < w.samples.size(); ++i) {
                w.samples[i] = take<std::int16_t>(buf, body + 2 * i) / 32767.0;
            }
            return w;
        }
        pos = body + size + (size & 1u);
    }
    throw std::runtime_error(name + ": no data chunk");
}

// ---------------------------------------------------------------------------
// Spectrogram files

namespace {
constexpr std::uint32_t kMelMagic = 0x4C454D44;  // "DMEL"
constexpr std::uint32_t kMelVersion = 1;
}  // namespace

void write_spectrogram(const std::filesystem::path& path, const MelSpectrogram& m,
                       const AudioConfig& cfg) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (std::uint32_t v : {kMelMagic, kMelVersion, static_cast<std::uint32_t>(m.bins),
                            static_cast<std::uint32_t>(m.frames),
                            static_cast<std::uint32_t>(cfg.sample_rate),
                            static_cast<std::uint32_t>(cfg.hop),
                            static_cast<std::uint32_t>(cfg.fft_size), 0u}) {
        put(os, v);
    }
    for (double v : m.values) put(os, static_cast<float>(v));
    put(os, static_cast<float>(m.log_min));
    put(os, static_cast<float>(m.log_max));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

MelSpectrogram read_spectrogram(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + name);
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 32) throw std::runtime_error(name + ": truncated spectrogram header");
    if (take<std::uint32_t>(buf, 0) != kMelMagic) throw std::runtime_error(name + ": bad spectrogram magic");
    if (take<std::uint32_t>(buf, 4) != kMelVersion) throw std::runtime_error(name + ": unsupported spectrogram version");
    MelSpectrogram m;
    m.bins = static_cast<int>(take<std::uint32_t>(buf, 8));
    m.frames = static_cast<int>(take<std::uint32_t>(buf, 12));
    const std::size_t n = static_cast<std::size_t>(m.bins) * m.frames;
    if (buf.size() != 32 + 4 * n + 8) throw std::runtime_error(name + ": size does not match header");
    m.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) m.values[i] = take<float>(buf, 32 + 4 * i);
    m.log_min = take<float>(buf, 32 + 4 * n);
    m.log_max = take<float>(buf, 36 + 4 * n);
    return m;
}

}  // namespace dualdiff

namespace dualdiff {

Waveform sine_wave(double freq_hz, double seconds, double amplitude, int sample_rate) {
    if (seconds < 0.0 || sample_rate <= 0) throw std::invalid_argument("sine_wave: bad length or rate");
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.resize(static_cast<std::size_t>(std::lround(seconds * sample_rate)));
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
        w.samples[i] = amplitude * std::sin(2.0 * std::numbers::pi * freq_hz * static_cast<double>(i) / sample_rate);
    }
    return w;
}

Waveform click_track(const std::vector<double>& times, double seconds, double amplitude,
                     int sample_rate, std::uint64_t seed) {
    if (seconds < 0.0 || sample_rate <= 0) throw std::invalid_argument("click_track: bad length or rate");
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(static_cast<std::size_t>(std::lround(seconds * sample_rate)), 0.0);
    Rng rng(seed);
    const int len = static_cast<int>(0.02 * sample_rate);
    const double tau = 0.003 * sample_rate;
    for (double t : times) {
        const long long start = std::llround(t * sample_rate);
        for (int i = 0; i < len; ++i) {
            const long long idx = start + i;
            const double v = amplitude * std::exp(-i / tau) * (2.0 * uniform01(rng) - 1.0);
            if (idx >= 0 && idx < static_cast<long long>(w.samples.size())) {
                w.samples[static_cast<std::size_t>(idx)] += v;
            }
        }
    }
    return w;
}

std::vector<double> beat_times(double bpm, double seconds, double offset) {
    if (!(bpm > 0.0)) throw std::invalid_argument("beat_times: bpm must be positive");
    std::vector<double> out;
    const double period = 60.0 / bpm;
    for (int k = 0;; ++k) {
        const double t = offset + k * period;
        if (t >= seconds - 1e-9) break;
        if (t >= 0.0) out.push_back(t);
    }
    return out;
}

}  // namespace dualdiff
