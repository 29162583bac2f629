#include "dualdiff/latent_vae.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dualdiff {

namespace {

constexpr int kVaeSchema = 1;

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

void add_conv(ParamStore& ps, const std::string& name, int out, int in, int k, Rng& rng, double gain = 1.0) {
    ps.add(name + ".w", he_normal({out, in, k, k}, in * k * k, rng, gain));
    ps.add(name + ".b", Tensor({out}));
}

ag::Var conv(ag::Tape& tape, const ParamStore& ps, const std::string& name, const ag::Var& x, int stride = 1) {
    const ag::Var& w = ps.get(name + ".w");
    const int pad = w->value.dim(2) / 2;
    return ag::conv2d(tape, x, w, ps.get(name + ".b"), {stride, pad, pad});
}

}  // namespace

void VaeConfig::validate() const {
    if (channels.empty()) throw std::invalid_argument("vae: channel list is empty");
    for (int c : channels) {
        if (c < 1) throw std::invalid_argument("vae: channel counts must be positive");
    }
    if (latent_channels < 1) throw std::invalid_argument("vae: latent_channels must be positive");
    if (input_size < 1 || input_size % (1 << downsamples()) != 0) {
        throw std::invalid_argument("vae: input size " + std::to_string(input_size) + " is not divisible by 2^" +
                                    std::to_string(downsamples()));
    }
    if (!(kl_weight >= 0.0)) throw std::invalid_argument("vae: kl_weight must be >= 0");
}

Vae::Vae(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const auto& ch = cfg_.channels;
    const int d = cfg_.downsamples();
    const int c = cfg_.latent_channels;
    add_conv(params_, "vae.enc.in", ch[0], 1, 3, rng);
    for (int i = 0; i < d; ++i) add_conv(params_, "vae.enc.down" + std::to_string(i), ch[i + 1], ch[i], 3, rng);
    add_conv(params_, "vae.enc.mid", ch[d], ch[d], 3, rng);
    add_conv(params_, "vae.enc.head", 2 * c, ch[d], 3, rng, 0.5);
    add_conv(params_, "vae.dec.in", ch[d], c, 3, rng);
    for (int i = d; i > 0; --i) add_conv(params_, "vae.dec.up" + std::to_string(i - 1), ch[i - 1], ch[i], 3, rng);
    add_conv(params_, "vae.dec.out", 1, ch[0], 3, rng, 0.5);
}

void Vae::set_latent_scale(double s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("latent scale must be positive and finite");
    latent_scale_ = s;
}

ag::Var Vae::moments(ag::Tape& tape, const ag::Var& x) const {
    auto h = ag::silu(tape, conv(tape, params_, "vae.enc.in", x));
    for (int i = 0; i < cfg_.downsamples(); ++i) {
        h = ag::silu(tape, conv(tape, params_, "vae.enc.down" + std::to_string(i), h, 2));
    }
    h = ag::silu(tape, conv(tape, params_, "vae.enc.mid", h));
    return conv(tape, params_, "vae.enc.head", h);
}

ag::Var Vae::decode(ag::Tape& tape, const ag::Var& z) const {
    auto h = ag::silu(tape, conv(tape, params_, "vae.dec.in", z));
    for (int i = cfg_.downsamples(); i > 0; --i) {
        h = ag::upsample2x(tape, h);
        h = ag::silu(tape, conv(tape, params_, "vae.dec.up" + std::to_string(i - 1), h));
    }
    return ag::sigmoid(tape, conv(tape, params_, "vae.dec.out", h));
}

Vae::LossParts Vae::loss(ag::Tape& tape, const Tensor& x, Rng& rng) const {
    require_input(x);
    auto ml = moments(tape, ag::leaf(x));
    Tensor eps(cfg_.latent_shape());
    fill_gaussian(rng, eps.data());
    auto z = ag::gaussian_sample(tape, ml, eps);
    auto rec = ag::mse(tape, decode(tape, z), x);
    auto kl = ag::kl_standard_normal(tape, ml);
    LossParts out;
    out.mse = rec->value[0];
    out.kl = kl->value[0];
    out.total = ag::weighted_sum(tape, rec, 1.0, kl, cfg_.kl_weight);
    return out;
}

void Vae::require_input(const Tensor& x) const {
    const std::vector<int> want{1, cfg_.input_size, cfg_.input_size};
    if (x.shape() != want) {
        throw std::invalid_argument("vae input must be " + shape_to_string(want) + ", got " + x.shape_str());
    }
}

void Vae::require_latent(const Tensor& z) const {
    if (z.shape() != cfg_.latent_shape()) {
        throw std::invalid_argument("vae latent must be " + shape_to_string(cfg_.latent_shape()) + ", got " +
                                    z.shape_str());
    }
}

Tensor Vae::encode(const Tensor& x) const {
    require_input(x);
    ag::Tape tape;
    const Tensor ml = moments(tape, ag::leaf(x))->value;
    Tensor z(cfg_.latent_shape());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = ml[i] * latent_scale_;
    return z;
}

Tensor Vae::decode(const Tensor& z) const {
    require_latent(z);
    Tensor raw = z;
    for (double& v : raw.values()) v /= latent_scale_;
    ag::Tape tape;
    return decode(tape, ag::leaf(std::move(raw)))->value;
}

Tensor mel_to_tensor(const MelSpectrogram& m) { return Tensor({1, m.bins, m.frames}, m.values); }

Tensor Vae::encode(const MelSpectrogram& m) const { return encode(mel_to_tensor(m)); }

MelSpectrogram Vae::decode_mel(const Tensor& z, double log_min, double log_max) const {
    const Tensor x = decode(z);
    MelSpectrogram m;
    m.bins = x.dim(1);
    m.frames = x.dim(2);
    m.values = x.values();
    for (double& v : m.values) v = std::clamp(v, 0.0, 1.0);
    m.log_min = log_min;
    m.log_max = log_max;
    return m;
}

double Vae::reconstruction_mse(const Tensor& x) const {
    const Tensor y = decode(encode(x));
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (y[i] - x[i]) * (y[i] - x[i]);
    return acc / static_cast<double>(x.size());
}

void Vae::save_to(Container& c) const {
    c.set("vae.schema_version", kVaeSchema);
    c.set("vae.input_size", cfg_.input_size);
    c.set("vae.latent_channels", cfg_.latent_channels);
    c.set("vae.channels", join_ints(cfg_.channels));
    c.set("vae.kl_weight", cfg_.kl_weight);
    c.set("vae.latent_scale", latent_scale_);
    params_.save_to(c);
}

void Vae::save(const std::filesystem::path& path) const {
    Container c;
    c.set("kind", "vae");
    save_to(c);
    c.save(path);
}

Vae Vae::from_container(const Container& c) {
    if (!c.has("vae.schema_version")) throw std::runtime_error("container holds no VAE");
    if (c.get_int("vae.schema_version") != kVaeSchema) throw std::runtime_error("unsupported VAE schema version");
    VaeConfig cfg;
    cfg.input_size = static_cast<int>(c.get_int("vae.input_size"));
    cfg.latent_channels = static_cast<int>(c.get_int("vae.latent_channels"));
    cfg.channels = split_ints(c.get("vae.channels"));
    cfg.kl_weight = c.get_double("vae.kl_weight");
    Vae v(cfg);
    v.params_.load_from(c);
    v.set_latent_scale(c.get_double("vae.latent_scale"));
    return v;
}

Vae Vae::load(const std::filesystem::path& path) { return from_container(Container::load(path)); }

double estimate_latent_scale(const Vae& vae, const std::vector<Tensor>& data) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& x : data) {
        ag::Tape tape;
        const Tensor ml = vae.moments(tape, ag::leaf(x))->value;
        const std::size_t half = ml.size() / 2;
        for (std::size_t i = 0; i < half; ++i) {
            sum += ml[i];
            sq += ml[i] * ml[i];
        }
        n += half;
    }
    if (n < 2) return 1.0;
    const double mean = sum / static_cast<double>(n);
    const double var = sq / static_cast<double>(n) - mean * mean;
    return var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
}

std::vector<VaeEpochStats> train_vae(Vae& vae, const std::vector<Tensor>& data, const VaeTrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train_vae: empty dataset");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("train_vae: epochs and batch size must be positive");
    if (!(cfg.lr > 0.0) || !(cfg.lr_floor > 0.0 && cfg.lr_floor <= 1.0)) throw std::invalid_argument("train_vae: lr must be positive and lr_floor in (0, 1]");
    Rng rng(cfg.seed);
    RmsProp opt(vae.params().entries(), {cfg.lr, 0.99, 1e-8, cfg.clip_norm});
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<VaeEpochStats> history;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double progress = cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 0.0;
        opt.set_lr(cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + std::cos(M_PI * progress))));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i) - 1))]);
        }
        VaeEpochStats st;
        st.epoch = epoch;
        std::size_t in_batch = 0;
        for (std::size_t k = 0; k < order.size(); ++k) {
            ag::Tape tape;
            auto parts = vae.loss(tape, data[order[k]], rng);
            if (!std::isfinite(parts.total->value[0])) {
                throw std::runtime_error("VAE training diverged at epoch " + std::to_string(epoch) +
                                         " (non-finite loss)");
            }
            tape.backward(parts.total);
            st.loss += parts.total->value[0];
            st.mse += parts.mse;
            st.kl += parts.kl;
            if (++in_batch == static_cast<std::size_t>(cfg.batch_size) || k + 1 == order.size()) {
                opt.step(1.0 / static_cast<double>(in_batch));
                in_batch = 0;
            }
        }
        const double n = static_cast<double>(data.size());
        st.loss /= n;
        st.mse /= n;
        st.kl /= n;
        st.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        history.push_back(st);
        if (cfg.on_epoch) cfg.on_epoch(st);
        if (cfg.target_mse > 0.0 && st.mse < cfg.target_mse) break;
    }
    vae.set_latent_scale(1.0);
    vae.set_latent_scale(estimate_latent_scale(vae, data));
    return history;
}

}  // namespace dualdiff
