#pragma once

// Minimal reverse-mode differentiation over Tensor values. Each training or
// evaluation pass records the operations it performs on a Tape; calling
// Tape::backward on a scalar result accumulates gradients into every node
// (including parameter leaves that live outside the tape) that requires them.

#include "dualdiff/tensor.h"

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace dualdiff::ag {

struct Node {
    Tensor value;
    Tensor grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::function<void(Node&)> backward;

    Tensor& grad_buffer();
};

using Var = std::shared_ptr<Node>;

Var leaf(Tensor value, bool requires_grad = false);

class Tape {
public:
    Var make(Tensor value, bool requires_grad, std::function<void(Node&)> backward);

    // Seeds d(root)/d(root) = 1; root must hold a single element.
    void backward(const Var& root);

    std::size_t size() const { return nodes_.size(); }
    // Keeps an operand alive for as long as the tape; returns its node
    // (null for a null Var) for capture in backward closures.
    Node* hold(const Var& v);

private:
    std::vector<Var> nodes_;
    std::vector<Var> held_;
};

struct ConvSpec {
    int stride = 1;
    int pad_h = 0;
    int pad_w = 0;
};

// x [C,H,W], w [O,C,kh,kw], b [O] or nullptr -> [O,Ho,Wo]
Var conv2d(Tape& tape, const Var& x, const Var& w, const Var& b, ConvSpec spec);
// Nearest-neighbour x2 upsampling of [C,H,W].
Var upsample2x(Tape& tape, const Var& x);
Var concat_channels(Tape& tape, const Var& a, const Var& b);
Var slice_channels(Tape& tape, const Var& x, int begin, int count);
Var reshape(Tape& tape, const Var& x, std::vector<int> shape);

Var add(Tape& tape, const Var& a, const Var& b);
Var mul(Tape& tape, const Var& a, const Var& b);
Var scale(Tape& tape, const Var& a, double k);
Var silu(Tape& tape, const Var& a);
Var sigmoid(Tape& tape, const Var& a);

// x [N], w [M,N], b [M] -> [M]
Var linear(Tape& tape, const Var& x, const Var& w, const Var& b);
Var concat_vec(Tape& tape, const std::vector<Var>& parts);
Var l2_normalize(Tape& tape, const Var& v);

// h [C,H,W] modulated per channel by ss = [scale(C), shift(C)]:
// h * (1 + scale) + shift.
Var film(Tape& tape, const Var& h, const Var& ss);
// v [W] -> [1,H,W] or v [C,1,W] -> [C,H,W]; every row a copy of v.
Var broadcast_rows(Tape& tape, const Var& v, int rows);
// [C,H,W] -> [C,1,W], mean over H.
Var mean_rows(Tape& tape, const Var& x);
// out[c,i,w] = sum_j mix[i,j] * x[c,j,w]; mix is a fixed [H,H] matrix.
Var mix_rows(Tape& tape, const Var& x, const Tensor& mix);
// [C,1,L] -> [C*S], average over S contiguous segments of the L axis.
Var segment_pool(Tape& tape, const Var& x, int segments);
// Same with explicit [begin, end) bounds per segment; empty segments give 0.
Var segment_pool(Tape& tape, const Var& x, const std::vector<std::pair<int, int>>& bounds);

// Single-head attention from every pixel of h [C,H,W] to the columns of
// tokens [D,S]. q = wq h + pq[:, x], k = wk tokens + pk, v = wv tokens;
// returns wo * sum_s softmax_s(q.k / sqrt(A)) v_s as [C,H,W]. Shapes:
// wq [A,C], wk [A,D], wv [A,D], wo [C,A], pq [A,W], pk [A,S].
Var cross_attention(Tape& tape, const Var& h, const Var& tokens, const Var& wq, const Var& wk,
                    const Var& wv, const Var& wo, const Var& pq, const Var& pk);
// mean((pred - target)^2) over all elements.
Var mse(Tape& tape, const Var& pred, const Tensor& target);
// wa * a + wb * b for single-element nodes.
Var weighted_sum(Tape& tape, const Var& a, double wa, const Var& b, double wb);

// ml = [mean(C), logvar(C)] x H x W; returns mean + exp(logvar / 2) * eps.
Var gaussian_sample(Tape& tape, const Var& ml, const Tensor& eps);
// Mean over elements of KL(N(mean, exp(logvar)) || N(0, 1)).
Var kl_standard_normal(Tape& tape, const Var& ml);

}  // namespace dualdiff::ag
