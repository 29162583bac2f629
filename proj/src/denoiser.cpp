#include "dualdiff/denoiser.h"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dualdiff {

void DenoiserConfig::validate() const {
    if (latent_channels < 1 || latent_size < 1) throw std::invalid_argument("denoiser: latent shape must be positive");
    if (channels.empty()) throw std::invalid_argument("denoiser: channel list is empty");
    for (int c : channels) {
        if (c < 1) throw std::invalid_argument("denoiser: channel counts must be positive");
    }
    if (latent_size % (1 << (scales() - 1)) != 0) {
        throw std::invalid_argument("denoiser: latent size " + std::to_string(latent_size) + " does not halve " +
                                    std::to_string(scales() - 1) + " times");
    }
    if (cond_dim < 1 || time_dim < 2 || embed_dim < 1) throw std::invalid_argument("denoiser: embedding sizes must be positive");
    if ((column_conditioning || cross_attention) && cond_dim % latent_size != 0) {
        throw std::invalid_argument("denoiser: cond_dim " + std::to_string(cond_dim) +
                                    " is not a multiple of the latent width " + std::to_string(latent_size));
    }
    if (cross_attention && attention_dim < 1) throw std::invalid_argument("denoiser: attention_dim must be positive");
}

std::vector<double> time_embed(double t, int dim) {
    if (dim < 1) throw std::invalid_argument("time_embed: dim must be positive");
    if (t < 0.0) throw std::invalid_argument("time_embed: t must be >= 0");
    std::vector<double> e(static_cast<std::size_t>(dim), 0.0);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double f = std::pow(10000.0, -static_cast<double>(i) / half);
        e[static_cast<std::size_t>(2 * i)] = std::sin(t * f);
        e[static_cast<std::size_t>(2 * i + 1)] = std::cos(t * f);
    }
    return e;
}

namespace {

void add_conv(ParamStore& ps, const std::string& name, int out, int in, int k, Rng& rng, double gain = 1.0) {
    ps.add(name + ".w", he_normal({out, in, k, k}, in * k * k, rng, gain));
    ps.add(name + ".b", Tensor({out}));
}

void add_linear(ParamStore& ps, const std::string& name, int out, int in, Rng& rng, double gain = 1.0) {
    ps.add(name + ".w", he_normal({out, in}, in, rng, gain));
    ps.add(name + ".b", Tensor({out}));
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, ParamStore& store, Rng& rng) : cfg_(cfg), store_(&store) {
    cfg_.validate();
    create(rng, store);
}

Denoiser::Denoiser(const DenoiserConfig& cfg, const ParamStore& store) : cfg_(cfg), store_(&store) {
    cfg_.validate();
    // Probe the first and last parameters so a mismatched store fails early.
    const auto& w = p("in.w")->value;
    const int in = cfg_.latent_channels + (cfg_.column_conditioning ? cfg_.cond_columns() : 0);
    if (w.dim(0) != cfg_.channels[0] || w.dim(1) != in || p("out.w")->value.dim(0) != cfg_.latent_channels ||
        p("emb1.w")->value.dim(1) != cfg_.time_dim + cfg_.cond_dim) {
        throw std::invalid_argument("denoiser parameters do not match the configuration");
    }
}

void Denoiser::create(Rng& rng, ParamStore& ps) {
    const auto& ch = cfg_.channels;
    const int levels = cfg_.scales();
    const std::string pre = "denoiser.";
    const int in = cfg_.latent_channels + (cfg_.column_conditioning ? cfg_.cond_columns() : 0);
    add_linear(ps, pre + "emb1", cfg_.embed_dim, cfg_.time_dim + cfg_.cond_dim, rng);
    add_linear(ps, pre + "emb2", cfg_.embed_dim, cfg_.embed_dim, rng);
    add_conv(ps, pre + "in", ch[0], in, 3, rng);

    auto block = [&](const std::string& name, int cin, int cout) {
        add_conv(ps, pre + name + ".c1", cout, cin, 3, rng);
        add_linear(ps, pre + name + ".film", 2 * cout, cfg_.embed_dim, rng, 0.1);
        add_conv(ps, pre + name + ".c2", cout, cout, 3, rng, 0.5);
        if (cin != cout) add_conv(ps, pre + name + ".skip", cout, cin, 1, rng);
    };
    auto attention = [&](const std::string& name, int c, int width) {
        if (!cfg_.cross_attention) return;
        const int a = cfg_.attention_dim, d = cfg_.cond_columns(), s = cfg_.latent_size;
        ps.add(pre + name + ".attn.wq", he_normal({a, c}, c, rng));
        ps.add(pre + name + ".attn.wk", he_normal({a, d}, d, rng));
        ps.add(pre + name + ".attn.wv", he_normal({a, d}, d, rng));
        ps.add(pre + name + ".attn.wo", he_normal({c, a}, a, rng, 0.1));
        ps.add(pre + name + ".attn.pq", he_normal({a, width}, 1, rng, 0.1));
        ps.add(pre + name + ".attn.pk", he_normal({a, s}, 1, rng, 0.1));
    };

    for (int i = 0; i < levels; ++i) {
        const int width = cfg_.latent_size >> i;
        block("enc" + std::to_string(i), i == 0 ? ch[0] : ch[static_cast<std::size_t>(i - 1)], ch[static_cast<std::size_t>(i)]);
        attention("enc" + std::to_string(i), ch[static_cast<std::size_t>(i)], width);
        if (i + 1 < levels) add_conv(ps, pre + "down" + std::to_string(i), ch[static_cast<std::size_t>(i)], ch[static_cast<std::size_t>(i)], 3, rng);
    }
    block("mid", ch.back(), ch.back());
    for (int i = levels - 1; i >= 0; --i) {
        const int width = cfg_.latent_size >> i;
        const int c = ch[static_cast<std::size_t>(i)];
        block("dec" + std::to_string(i), 2 * c, c);
        attention("dec" + std::to_string(i), c, width);
        if (i > 0) add_conv(ps, pre + "up" + std::to_string(i - 1), ch[static_cast<std::size_t>(i - 1)], c, 3, rng);
    }
    add_conv(ps, pre + "out", cfg_.latent_channels, ch[0], 3, rng, 0.1);
}

ag::Var Denoiser::res_block(ag::Tape& tape, const std::string& name, const ag::Var& x, const ag::Var& emb) const {
    auto h = ag::conv2d(tape, ag::silu(tape, x), p(name + ".c1.w"), p(name + ".c1.b"), {1, 1, 1});
    h = ag::film(tape, h, ag::linear(tape, emb, p(name + ".film.w"), p(name + ".film.b")));
    h = ag::conv2d(tape, ag::silu(tape, h), p(name + ".c2.w"), p(name + ".c2.b"), {1, 1, 1});
    const std::string skip = "denoiser." + name + ".skip.w";
    const ag::Var shortcut =
        store_->contains(skip) ? ag::conv2d(tape, x, p(name + ".skip.w"), p(name + ".skip.b"), {}) : x;
    return ag::add(tape, shortcut, h);
}

ag::Var Denoiser::attend(ag::Tape& tape, const std::string& name, const ag::Var& h, const ag::Var& tokens) const {
    if (!cfg_.cross_attention) return h;
    const std::string a = name + ".attn.";
    return ag::add(tape, h,
                   ag::cross_attention(tape, h, tokens, p(a + "wq"), p(a + "wk"), p(a + "wv"), p(a + "wo"),
                                       p(a + "pq"), p(a + "pk")));
}

ag::Var Denoiser::forward(ag::Tape& tape, const ag::Var& z, int t, const ag::Var& cond) const {
    const std::vector<int> want{cfg_.latent_channels, cfg_.latent_size, cfg_.latent_size};
    if (z->value.shape() != want) {
        throw std::invalid_argument("denoiser input must be " + shape_to_string(want) + ", got " + z->value.shape_str());
    }
    if (cond->value.ndim() != 1 || cond->value.dim(0) != cfg_.cond_dim) {
        throw std::invalid_argument("conditioning vector has " + std::to_string(cond->value.size()) +
                                    " entries, denoiser expects " + std::to_string(cfg_.cond_dim));
    }
    if (t < 0) throw std::invalid_argument("denoiser: negative timestep");
    const int levels = cfg_.scales();
    const int w = cfg_.latent_size;

    // c arrives as two unit-norm halves, so its entries are ~1/sqrt(cells);
    // bring them to O(1) like the latent and the time embedding.
    const ag::Var c = ag::scale(tape, cond, std::sqrt(static_cast<double>(w)));
    auto temb = ag::leaf(Tensor({cfg_.time_dim}, time_embed(t, cfg_.time_dim)));
    auto emb = ag::linear(tape, ag::concat_vec(tape, {temb, c}), p("emb1.w"), p("emb1.b"));
    emb = ag::silu(tape, emb);
    emb = ag::silu(tape, ag::linear(tape, emb, p("emb2.w"), p("emb2.b")));

    ag::Var tokens;
    if (cfg_.column_conditioning || cfg_.cross_attention) {
        tokens = ag::reshape(tape, c, {cfg_.cond_columns(), w});
    }
    ag::Var x = z;
    if (cfg_.column_conditioning) {
        auto cols = ag::broadcast_rows(tape, ag::reshape(tape, c, {cfg_.cond_columns(), 1, w}), w);
        x = ag::concat_channels(tape, z, cols);
    }
    auto h = ag::conv2d(tape, x, p("in.w"), p("in.b"), {1, 1, 1});
    std::vector<ag::Var> skips;
    for (int i = 0; i < levels; ++i) {
        const std::string name = "enc" + std::to_string(i);
        h = attend(tape, name, res_block(tape, name, h, emb), tokens);
        skips.push_back(h);
        if (i + 1 < levels) {
            const std::string d = "down" + std::to_string(i);
            h = ag::conv2d(tape, h, p(d + ".w"), p(d + ".b"), {2, 1, 1});
        }
    }
    h = res_block(tape, "mid", h, emb);
    for (int i = levels - 1; i >= 0; --i) {
        const std::string name = "dec" + std::to_string(i);
        h = ag::concat_channels(tape, h, skips[static_cast<std::size_t>(i)]);
        h = attend(tape, name, res_block(tape, name, h, emb), tokens);
        if (i > 0) {
            const std::string u = "up" + std::to_string(i - 1);
            h = ag::conv2d(tape, ag::upsample2x(tape, h), p(u + ".w"), p(u + ".b"), {1, 1, 1});
        }
    }
    return ag::conv2d(tape, ag::silu(tape, h), p("out.w"), p("out.b"), {1, 1, 1});
}

Tensor Denoiser::predict(const Tensor& z, int t, std::span<const double> cond) const {
    ag::Tape tape;
    auto c = ag::leaf(Tensor({static_cast<int>(cond.size())}, std::vector<double>(cond.begin(), cond.end())));
    return forward(tape, ag::leaf(z), t, c)->value;
}

NoisePredictor Denoiser::predictor() const {
    NoisePredictor np;
    np.cond_dim = cfg_.cond_dim;
    np.fn = [this](const Tensor& z, int t, std::span<const double> cond) { return predict(z, t, cond); };
    return np;
}

}  // namespace dualdiff
