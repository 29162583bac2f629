#include "doctest.h"
#include "support.h"

#include "dualdiff/autograd.h"

#include <cmath>

using namespace dualdiff;
using dualdiff::testing::grad_check;
using dualdiff::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;  // element-wise ops are smooth; FD error is ~h^2

// Reduces any output to a scalar with fixed random weights so every output
// element contributes a distinct gradient.
ag::Var probe(ag::Tape& tape, const ag::Var& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    Tensor target = random_tensor(y->value.shape(), rng);
    return ag::mse(tape, y, target);
}

// Direct convolution oracle.
Tensor direct_conv(const Tensor& x, const Tensor& w, const Tensor& b, ag::ConvSpec s) {
    const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int ho = (h + 2 * s.pad_h - kh) / s.stride + 1, wo = (wd + 2 * s.pad_w - kw) / s.stride + 1;
    Tensor y({o, ho, wo});
    for (int oc = 0; oc < o; ++oc)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double acc = b.empty() ? 0.0 : b[static_cast<std::size_t>(oc)];
                for (int ic = 0; ic < c; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * s.stride + ky - s.pad_h, ix = ox * s.stride + kx - s.pad_w;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            acc += w[((static_cast<std::size_t>(oc) * c + ic) * kh + ky) * kw + kx] * x.at(ic, iy, ix);
                        }
                y.at(oc, oy, ox) = acc;
            }
    return y;
}

}  // namespace

TEST_CASE("conv2d forward matches a direct convolution, including banded inputs") {
    Rng rng(3);
    struct Case {
        int c, o, h, w, k;
        ag::ConvSpec s;
    };
    // the last case is tall enough to be split into several im2col bands
    for (const Case& cs : {Case{1, 1, 5, 5, 3, {1, 1, 1}}, Case{3, 4, 7, 6, 3, {2, 1, 1}},
                           Case{2, 3, 8, 8, 1, {1, 0, 0}}, Case{16, 4, 70, 64, 3, {1, 1, 1}}}) {
        const Tensor x = random_tensor({cs.c, cs.h, cs.w}, rng);
        const Tensor w = random_tensor({cs.o, cs.c, cs.k, cs.k}, rng);
        const Tensor b = random_tensor({cs.o}, rng);
        ag::Tape tape;
        const auto y = ag::conv2d(tape, ag::leaf(x), ag::leaf(w), ag::leaf(b), cs.s);
        const Tensor ref = direct_conv(x, w, b, cs.s);
        REQUIRE(y->value.shape() == ref.shape());
        double worst = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y->value[i] - ref[i]));
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("conv2d gradients") {
    Rng rng(4);
    SUBCASE("stride 1, padded") {
        auto x = ag::leaf(random_tensor({2, 6, 5}, rng)), w = ag::leaf(random_tensor({3, 2, 3, 3}, rng)),
             b = ag::leaf(random_tensor({3}, rng));
        auto rep = grad_check({{"x", x}, {"w", w}, {"b", b}},
                              [&](ag::Tape& t) { return probe(t, ag::conv2d(t, x, w, b, {1, 1, 1})); });
        CHECK(rep.max_rel < kGradTol);
    }
    SUBCASE("stride 2, no bias") {
        auto x = ag::leaf(random_tensor({2, 7, 8}, rng)), w = ag::leaf(random_tensor({2, 2, 3, 3}, rng));
        auto rep = grad_check({{"x", x}, {"w", w}},
                              [&](ag::Tape& t) { return probe(t, ag::conv2d(t, x, w, nullptr, {2, 1, 1})); });
        CHECK(rep.max_rel < kGradTol);
    }
    SUBCASE("banded") {
        auto x = ag::leaf(random_tensor({16, 40, 64}, rng)), w = ag::leaf(random_tensor({2, 16, 3, 3}, rng, 0.1)),
             b = ag::leaf(random_tensor({2}, rng));
        auto rep = grad_check({{"x", x}, {"w", w}, {"b", b}},
                              [&](ag::Tape& t) { return probe(t, ag::conv2d(t, x, w, b, {1, 1, 1})); }, 24);
        CHECK(rep.max_rel < kGradTol);
    }
}

TEST_CASE("shape and elementwise op gradients") {
    Rng rng(5);
    auto a = ag::leaf(random_tensor({2, 3, 4}, rng)), b = ag::leaf(random_tensor({2, 3, 4}, rng));
    auto c = ag::leaf(random_tensor({3, 3, 4}, rng));
    const std::vector<std::pair<const char*, std::function<ag::Var(ag::Tape&)>>> ops = {
        {"add", [&](ag::Tape& t) { return probe(t, ag::add(t, a, b)); }},
        {"mul", [&](ag::Tape& t) { return probe(t, ag::mul(t, a, b)); }},
        {"scale", [&](ag::Tape& t) { return probe(t, ag::scale(t, a, -1.7)); }},
        {"silu", [&](ag::Tape& t) { return probe(t, ag::silu(t, a)); }},
        {"sigmoid", [&](ag::Tape& t) { return probe(t, ag::sigmoid(t, a)); }},
        {"upsample", [&](ag::Tape& t) { return probe(t, ag::upsample2x(t, a)); }},
        {"concat", [&](ag::Tape& t) { return probe(t, ag::concat_channels(t, a, c)); }},
        {"slice", [&](ag::Tape& t) { return probe(t, ag::slice_channels(t, c, 1, 2)); }},
        {"reshape", [&](ag::Tape& t) { return probe(t, ag::reshape(t, a, {6, 4})); }},
        {"mean_rows", [&](ag::Tape& t) { return probe(t, ag::mean_rows(t, c)); }},
    };
    for (const auto& [name, fn] : ops) {
        CAPTURE(name);
        auto rep = grad_check({{"a", a}, {"b", b}, {"c", c}}, fn);
        CHECK(rep.max_rel < kGradTol);
    }
}

TEST_CASE("vector, modulation and pooling gradients") {
    Rng rng(6);
    auto x = ag::leaf(random_tensor({5}, rng)), w = ag::leaf(random_tensor({4, 5}, rng)), bias = ag::leaf(random_tensor({4}, rng));
    auto v2 = ag::leaf(random_tensor({3}, rng));
    auto h = ag::leaf(random_tensor({3, 4, 5}, rng)), ss = ag::leaf(random_tensor({6}, rng, 0.3));
    auto row = ag::leaf(random_tensor({5}, rng)), rows3 = ag::leaf(random_tensor({2, 1, 5}, rng));
    auto seq = ag::leaf(random_tensor({2, 1, 12}, rng));
    Tensor mix = random_tensor({4, 4}, rng);
    auto s1 = ag::leaf(random_tensor({1}, rng)), s2 = ag::leaf(random_tensor({1}, rng));
    const std::vector<std::pair<const char*, std::function<ag::Var(ag::Tape&)>>> ops = {
        {"linear", [&](ag::Tape& t) { return probe(t, ag::linear(t, x, w, bias)); }},
        {"concat_vec", [&](ag::Tape& t) { return probe(t, ag::concat_vec(t, {x, v2, x})); }},
        {"l2_normalize", [&](ag::Tape& t) { return probe(t, ag::l2_normalize(t, x)); }},
        {"film", [&](ag::Tape& t) { return probe(t, ag::film(t, h, ss)); }},
        {"broadcast_vec", [&](ag::Tape& t) { return probe(t, ag::broadcast_rows(t, row, 3)); }},
        {"broadcast_cols", [&](ag::Tape& t) { return probe(t, ag::broadcast_rows(t, rows3, 4)); }},
        {"mix_rows", [&](ag::Tape& t) { return probe(t, ag::mix_rows(t, h, mix)); }},
        {"segment_pool", [&](ag::Tape& t) { return probe(t, ag::segment_pool(t, seq, 4)); }},
        {"segment_bounds",
         [&](ag::Tape& t) { return probe(t, ag::segment_pool(t, seq, {{0, 5}, {5, 5}, {3, 12}, {11, 12}})); }},
        {"weighted_sum", [&](ag::Tape& t) { return ag::weighted_sum(t, ag::mul(t, s1, s1), 0.3, ag::mul(t, s1, s2), 0.7); }},
    };
    for (const auto& [name, fn] : ops) {
        CAPTURE(name);
        auto rep = grad_check({{"x", x}, {"w", w}, {"b", bias}, {"v2", v2}, {"h", h}, {"ss", ss}, {"row", row},
                               {"rows3", rows3}, {"seq", seq}, {"s1", s1}, {"s2", s2}},
                              fn);
        CHECK(rep.max_rel < kGradTol);
    }
}

TEST_CASE("cross-attention gradients") {
    Rng rng(7);
    const int c = 3, hh = 2, ww = 4, d = 5, s = 4, a = 3;
    auto h = ag::leaf(random_tensor({c, hh, ww}, rng)), tok = ag::leaf(random_tensor({d, s}, rng));
    auto wq = ag::leaf(random_tensor({a, c}, rng)), wk = ag::leaf(random_tensor({a, d}, rng));
    auto wv = ag::leaf(random_tensor({a, d}, rng)), wo = ag::leaf(random_tensor({c, a}, rng));
    auto pq = ag::leaf(random_tensor({a, ww}, rng)), pk = ag::leaf(random_tensor({a, s}, rng));
    auto rep = grad_check({{"h", h}, {"tok", tok}, {"wq", wq}, {"wk", wk}, {"wv", wv}, {"wo", wo}, {"pq", pq}, {"pk", pk}},
                          [&](ag::Tape& t) { return probe(t, ag::cross_attention(t, h, tok, wq, wk, wv, wo, pq, pk)); });
    CHECK(rep.max_rel < kGradTol);
}

TEST_CASE("gaussian sampling and KL") {
    Rng rng(8);
    auto ml = ag::leaf(random_tensor({2, 3, 3}, rng, 0.5));
    const Tensor eps = random_tensor({1, 3, 3}, rng);
    auto rep = grad_check({{"ml", ml}}, [&](ag::Tape& t) { return probe(t, ag::gaussian_sample(t, ml, eps)); });
    CHECK(rep.max_rel < kGradTol);
    rep = grad_check({{"ml", ml}}, [&](ag::Tape& t) { return ag::kl_standard_normal(t, ml); });
    CHECK(rep.max_rel < kGradTol);

    // KL of N(0,1) against itself is zero
    ag::Tape tape;
    auto zero = ag::kl_standard_normal(tape, ag::leaf(Tensor({2, 2, 2})));
    CHECK(zero->value[0] == 0.0);
}

TEST_CASE("mse and l2 normalisation values") {
    ag::Tape tape;
    auto y = ag::leaf(Tensor({2}, {1.0, 3.0}));
    CHECK(ag::mse(tape, y, Tensor({2}, {0.0, 1.0}))->value[0] == doctest::Approx(2.5));
    auto n = ag::l2_normalize(tape, ag::leaf(Tensor({2}, {3.0, 4.0})));
    CHECK(n->value[0] == doctest::Approx(0.6));
    CHECK(n->value[1] == doctest::Approx(0.8));
}

TEST_CASE("operands created outside the tape stay alive through backward") {
    ag::Var w = ag::leaf(Tensor({2}, {1.0, 2.0}), true);
    ag::Tape tape;
    ag::Var out;
    {
        auto tmp = ag::leaf(Tensor({2}, {3.0, 4.0}));  // dropped before backward
        out = ag::mse(tape, ag::mul(tape, w, tmp), Tensor({2}));
    }
    tape.backward(out);
    CHECK(w->grad[0] == doctest::Approx(9.0));   // d/dw mean((w*a)^2) = w a^2
    CHECK(w->grad[1] == doctest::Approx(32.0));
}

TEST_CASE("shape errors are reported") {
    ag::Tape tape;
    CHECK_THROWS(ag::add(tape, ag::leaf(Tensor({2})), ag::leaf(Tensor({3}))));
    CHECK_THROWS(ag::conv2d(tape, ag::leaf(Tensor({2, 4, 4})), ag::leaf(Tensor({1, 3, 3, 3})), nullptr, {1, 1, 1}));
    CHECK_THROWS(ag::mse(tape, ag::leaf(Tensor({2})), Tensor({3})));
}
