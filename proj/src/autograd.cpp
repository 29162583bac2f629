#include "dualdiff/autograd.h"

#include "dualdiff/kernels.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace dualdiff::ag {

Tensor& Node::grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
    return grad;
}

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var Tape::make(Tensor value, bool requires_grad, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    if (requires_grad) n->backward = std::move(backward);
    nodes_.push_back(n);
    return n;
}

Node* Tape::hold(const Var& v) {
    if (!v) return nullptr;
    held_.push_back(v);
    return v.get();
}

void Tape::backward(const Var& root) {
    if (root->value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!root->requires_grad) return;
    root->grad_buffer()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.backward && !n.grad.empty()) n.backward(n);
    }
}

namespace {

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.ndim() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                    ", got " + t.shape_str());
    }
}

bool any_grad(std::initializer_list<const Var*> vs) {
    for (const Var* v : vs) {
        if (*v && (*v)->requires_grad) return true;
    }
    return false;
}

// Column matrix for output rows [oy0, oy1): row (ci, i, j) holds the input
// values under kernel tap (i, j) for every output position in the band.
void im2col(const double* x, int c, int h, int w, int kh, int kw, const ConvSpec& s, int oy0,
            int oy1, int wo, double* cols) {
    const std::size_t band = static_cast<std::size_t>(oy1 - oy0) * wo;
    for (int ci = 0; ci < c; ++ci) {
        const double* xc = x + static_cast<std::size_t>(ci) * h * w;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                double* row = cols + (static_cast<std::size_t>(ci * kh + i) * kw + j) * band;
                for (int oy = oy0; oy < oy1; ++oy) {
                    const int iy = oy * s.stride + i - s.pad_h;
                    double* out = row + static_cast<std::size_t>(oy - oy0) * wo;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wo; ++ox) out[ox] = 0.0;
                        continue;
                    }
                    const double* xr = xc + static_cast<std::size_t>(iy) * w;
                    if (s.stride == 1) {
                        const int lo = std::max(0, s.pad_w - j);
                        const int hi = std::min(wo, w + s.pad_w - j);
                        for (int ox = 0; ox < lo; ++ox) out[ox] = 0.0;
                        for (int ox = lo; ox < hi; ++ox) out[ox] = xr[ox + j - s.pad_w];
                        for (int ox = std::max(hi, lo); ox < wo; ++ox) out[ox] = 0.0;
                        continue;
                    }
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * s.stride + j - s.pad_w;
                        out[ox] = (ix < 0 || ix >= w) ? 0.0 : xr[ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int c, int h, int w, int kh, int kw, const ConvSpec& s,
                int oy0, int oy1, int wo, double* dx) {
    const std::size_t band = static_cast<std::size_t>(oy1 - oy0) * wo;
    for (int ci = 0; ci < c; ++ci) {
        double* xc = dx + static_cast<std::size_t>(ci) * h * w;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const double* row = cols + (static_cast<std::size_t>(ci * kh + i) * kw + j) * band;
                for (int oy = oy0; oy < oy1; ++oy) {
                    const int iy = oy * s.stride + i - s.pad_h;
                    if (iy < 0 || iy >= h) continue;
                    const double* in = row + static_cast<std::size_t>(oy - oy0) * wo;
                    double* xr = xc + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * s.stride + j - s.pad_w;
                        if (ix >= 0 && ix < w) xr[ix] += in[ox];
                    }
                }
            }
        }
    }
}

// Output rows per im2col band, sized so a band's column matrix stays cache-resident.
int band_rows(int ckk, int wo, int ho) {
    constexpr std::size_t kBandDoubles = 1 << 16;
    const std::size_t per_row = static_cast<std::size_t>(ckk) * wo;
    return std::clamp(static_cast<int>(kBandDoubles / std::max<std::size_t>(per_row, 1)), 1, ho);
}

}  // namespace

Var conv2d(Tape& tape, const Var& x, const Var& w, const Var& b, ConvSpec spec) {
    require_rank(x->value, 3, "conv2d input");
    require_rank(w->value, 4, "conv2d weight");
    const int c = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
    const int o = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != c) {
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(w->value.dim(1)) +
                                    " input channels, got " + std::to_string(c));
    }
    if (b && (b->value.ndim() != 1 || b->value.dim(0) != o)) {
        throw std::invalid_argument("conv2d: bias shape " + b->value.shape_str());
    }
    if (spec.stride < 1 || spec.pad_h < 0 || spec.pad_w < 0) throw std::invalid_argument("conv2d: bad stride or padding");
    const int ho = (h + 2 * spec.pad_h - kh) / spec.stride + 1;
    const int wo = (wd + 2 * spec.pad_w - kw) / spec.stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: input smaller than kernel");
    const int ckk = c * kh * kw;
    const int plane = ho * wo;
    const bool direct = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad_h == 0 && spec.pad_w == 0;
    const int rows = band_rows(ckk, wo, ho);

    Tensor out({o, ho, wo});
    if (direct) {
        kernels::gemm(o, plane, ckk, w->value.ptr(), ckk, x->value.ptr(), plane, 0.0, out.ptr(), plane);
    } else {
        std::vector<double> cols(static_cast<std::size_t>(ckk) * rows * wo);
        for (int oy0 = 0; oy0 < ho; oy0 += rows) {
            const int oy1 = std::min(ho, oy0 + rows);
            const int n = (oy1 - oy0) * wo;
            im2col(x->value.ptr(), c, h, wd, kh, kw, spec, oy0, oy1, wo, cols.data());
            kernels::gemm(o, n, ckk, w->value.ptr(), ckk, cols.data(), n, 0.0,
                          out.ptr() + static_cast<std::size_t>(oy0) * wo, plane);
        }
    }
    if (b) {
        for (int oc = 0; oc < o; ++oc) {
            double* row = out.ptr() + static_cast<std::size_t>(oc) * plane;
            const double bv = b->value[static_cast<std::size_t>(oc)];
            for (int p = 0; p < plane; ++p) row[p] += bv;
        }
    }

    Node* xn = tape.hold(x);
    Node* wn = tape.hold(w);
    Node* bn = tape.hold(b);
    return tape.make(std::move(out), any_grad({&x, &w, &b}), [=](Node& self) {
        const double* g = self.grad.ptr();
        const auto& kt = kernels::active();
        if (bn && bn->requires_grad) {
            Tensor& db = bn->grad_buffer();
            for (int oc = 0; oc < o; ++oc) {
                const double* row = g + static_cast<std::size_t>(oc) * plane;
                double s = 0.0;
                for (int p = 0; p < plane; ++p) s += row[p];
                db[static_cast<std::size_t>(oc)] += s;
            }
        }
        const bool need_w = wn->requires_grad, need_x = xn->requires_grad;
        if (!need_w && !need_x) return;

        std::vector<double> wt;  // W^T, [ckk x o]
        if (need_x) {
            wt.resize(static_cast<std::size_t>(ckk) * o);
            for (int oc = 0; oc < o; ++oc) {
                for (int q = 0; q < ckk; ++q) {
                    wt[static_cast<std::size_t>(q) * o + oc] = wn->value[static_cast<std::size_t>(oc) * ckk + q];
                }
            }
        }
        std::vector<double> dwt;  // dW^T accumulated band by band: cols * G^T
        if (need_w) dwt.assign(static_cast<std::size_t>(ckk) * o, 0.0);
        std::vector<double> cols, gt;
        if (need_w) {
            gt.resize(static_cast<std::size_t>(rows) * wo * o);
            if (!direct) cols.resize(static_cast<std::size_t>(ckk) * rows * wo);
        }
        std::vector<double> dcols;
        if (need_x && !direct) dcols.resize(static_cast<std::size_t>(ckk) * rows * wo);
        Tensor* dx = need_x ? &xn->grad_buffer() : nullptr;

        for (int oy0 = 0; oy0 < ho; oy0 += rows) {
            const int oy1 = std::min(ho, oy0 + rows);
            const int n = (oy1 - oy0) * wo;
            const std::size_t off = static_cast<std::size_t>(oy0) * wo;
            if (need_w) {
                for (int oc = 0; oc < o; ++oc) {
                    const double* grow = g + static_cast<std::size_t>(oc) * plane + off;
                    for (int p = 0; p < n; ++p) gt[static_cast<std::size_t>(p) * o + oc] = grow[p];
                }
                const double* cp;
                int ldc;
                if (direct) {
                    cp = xn->value.ptr() + off;
                    ldc = plane;
                } else {
                    im2col(xn->value.ptr(), c, h, wd, kh, kw, spec, oy0, oy1, wo, cols.data());
                    cp = cols.data();
                    ldc = n;
                }
                kt.gemm(ckk, o, n, cp, ldc, gt.data(), o, 1.0, dwt.data(), o);
            }
            if (need_x) {
                if (direct) {
                    kt.gemm(ckk, n, o, wt.data(), o, g + off, plane, 1.0, dx->ptr() + off, plane);
                } else {
                    kt.gemm(ckk, n, o, wt.data(), o, g + off, plane, 0.0, dcols.data(), n);
                    col2im_add(dcols.data(), c, h, wd, kh, kw, spec, oy0, oy1, wo, dx->ptr());
                }
            }
        }
        if (need_w) {
            Tensor& dw = wn->grad_buffer();
            for (int oc = 0; oc < o; ++oc) {
                for (int q = 0; q < ckk; ++q) {
                    dw[static_cast<std::size_t>(oc) * ckk + q] += dwt[static_cast<std::size_t>(q) * o + oc];
                }
            }
        }
    });
}

Var upsample2x(Tape& tape, const Var& x) {
    require_rank(x->value, 3, "upsample2x");
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < 2 * h; ++y) {
            for (int xx = 0; xx < 2 * w; ++xx) out.at(ci, y, xx) = x->value.at(ci, y / 2, xx / 2);
        }
    }
    Node* xn = tape.hold(x);
    return tape.make(std::move(out), x->requires_grad, [=](Node& self) {
        Tensor& dx = xn->grad_buffer();
        for (int ci = 0; ci < c; ++ci) {
            for (int y = 0; y < 2 * h; ++y) {
                for (int xx = 0; xx < 2 * w; ++xx) dx.at(ci, y / 2, xx / 2) += self.grad.at(ci, y, xx);
            }
        }
    });
}

Var concat_channels(Tape& tape, const Var& a, const Var& b) {
    require_rank(a->value, 3, "concat_channels");
    require_rank(b->value, 3, "concat_channels");
    if (a->value.dim(1) != b->value.dim(1) || a->value.dim(2) != b->value.dim(2)) {
        throw std::invalid_argument("concat_channels: spatial mismatch " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
    }
    const std::size_t na = a->value.size();
    Tensor out({a->value.dim(0) + b->value.dim(0), a->value.dim(1), a->value.dim(2)});
    std::copy(a->value.values().begin(), a->value.values().end(), out.values().begin());
    std::copy(b->value.values().begin(), b->value.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(na));
    Node* an = tape.hold(a);
    Node* bn = tape.hold(b);
    return tape.make(std::move(out), any_grad({&a, &b}), [=](Node& self) {
        if (an->requires_grad) {
            Tensor& da = an->grad_buffer();
            for (std::size_t i = 0; i < na; ++i) da[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            Tensor& db = bn->grad_buffer();
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[na + i];
        }
    });
}

Var slice_channels(Tape& tape, const Var& x, int begin, int count) {
    require_rank(x->value, 3, "slice_channels");
    if (begin < 0 || count <= 0 || begin + count > x->value.dim(0)) {
        throw std::invalid_argument("slice_channels: range out of bounds");
    }
    const std::size_t plane = static_cast<std::size_t>(x->value.dim(1)) * x->value.dim(2);
    const std::size_t off = static_cast<std::size_t>(begin) * plane;
    Tensor out({count, x->value.dim(1), x->value.dim(2)});
    std::copy_n(x->value.values().begin() + static_cast<std::ptrdiff_t>(off), out.size(),
                out.values().begin());
    Node* xn = tape.hold(x);
    return tape.make(std::move(out), x->requires_grad, [=](Node& self) {
        Tensor& dx = xn->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) dx[off + i] += self.grad[i];
    });
}

Var reshape(Tape& tape, const Var& x, std::vector<int> shape) {
    Tensor out = x->value.reshaped(std::move(shape));
    Node* xn = tape.hold(x);
    return tape.make(std::move(out), x->requires_grad, [=](Node& self) {
        Tensor& dx = xn->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i];
    });
}

Var add(Tape& tape, const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    Node* an = tape.hold(a);
    Node* bn = tape.hold(b);
    return tape.make(std::move(out), any_grad({&a, &b}), [=](Node& self) {
        for (Node* n : {an, bn}) {
            if (!n->requires_grad) continue;
            Tensor& d = n->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
        }
    });
}

Var mul(Tape& tape, const Var& a, const Var& b) {
    require_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    Node* an = tape.hold(a);
    Node* bn = tape.hold(b);
    return tape.make(std::move(out), any_grad({&a, &b}), [=](Node& self) {
        if (an->requires_grad) {
            Tensor& d = an->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            Tensor& d = bn->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * an->value[i];
        }
    });
}

Var scale(Tape& tape, const Var& a, double k) {
    Tensor out = a->value;
    for (double& v : out.values()) v *= k;
    Node* an = tape.hold(a);
    return tape.make(std::move(out), a->requires_grad, [=](Node& self) {
        Tensor& d = an->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += k * self.grad[i];
    });
}

namespace {
inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace

Var silu(Tape& tape, const Var& a) {
    Tensor out = a->value;
    for (double& v : out.values()) v = v * logistic(v);
    Node* an = tape.hold(a);
    return tape.make(std::move(out), a->requires_grad, [=](Node& self) {
        Tensor& d = an->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double x = an->value[i];
            const double s = logistic(x);
            d[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

Var sigmoid(Tape& tape, const Var& a) {
    Tensor out = a->value;
    for (double& v : out.values()) v = logistic(v);
    Node* an = tape.hold(a);
    return tape.make(std::move(out), a->requires_grad, [=](Node& self) {
        Tensor& d = an->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double y = self.value[i];
            d[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Var linear(Tape& tape, const Var& x, const Var& w, const Var& b) {
    require_rank(x->value, 1, "linear input");
    require_rank(w->value, 2, "linear weight");
    const int m = w->value.dim(0), n = w->value.dim(1);
    if (x->value.dim(0) != n) {
        throw std::invalid_argument("linear: weight expects " + std::to_string(n) +
                                    " inputs, got " + std::to_string(x->value.dim(0)));
    }
    const auto& kt = kernels::active();
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        out[static_cast<std::size_t>(i)] =
            kt.dot(w->value.ptr() + static_cast<std::size_t>(i) * n, x->value.ptr(),
                   static_cast<std::size_t>(n)) +
            (b ? b->value[static_cast<std::size_t>(i)] : 0.0);
    }
    Node* xn = tape.hold(x);
    Node* wn = tape.hold(w);
    Node* bn = tape.hold(b);
    return tape.make(std::move(out), any_grad({&x, &w, &b}), [=](Node& self) {
        const auto& k = kernels::active();
        for (int i = 0; i < m; ++i) {
            const double g = self.grad[static_cast<std::size_t>(i)];
            if (g == 0.0) continue;
            if (wn->requires_grad) {
                k.axpy(g, xn->value.ptr(), wn->grad_buffer().ptr() + static_cast<std::size_t>(i) * n,
                       static_cast<std::size_t>(n));
            }
            if (xn->requires_grad) {
                k.axpy(g, wn->value.ptr() + static_cast<std::size_t>(i) * n,
                       xn->grad_buffer().ptr(), static_cast<std::size_t>(n));
            }
            if (bn && bn->requires_grad) bn->grad_buffer()[static_cast<std::size_t>(i)] += g;
        }
    });
}

Var concat_vec(Tape& tape, const std::vector<Var>& parts) {
    std::size_t total = 0;
    bool rg = false;
    for (const Var& p : parts) {
        total += p->value.size();
        rg = rg || p->requires_grad;
    }
    Tensor out({static_cast<int>(total)});
    std::size_t off = 0;
    std::vector<Node*> nodes;
    for (const Var& p : parts) {
        std::copy(p->value.values().begin(), p->value.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(off));
        off += p->value.size();
        nodes.push_back(tape.hold(p));
    }
    return tape.make(std::move(out), rg, [nodes](Node& self) {
        std::size_t o = 0;
        for (Node* n : nodes) {
            const std::size_t sz = n->value.size();
            if (n->requires_grad) {
                Tensor& d = n->grad_buffer();
                for (std::size_t i = 0; i < sz; ++i) d[i] += self.grad[o + i];
            }
            o += sz;
        }
    });
}

Var l2_normalize(Tape& tape, const Var& v) {
    constexpr double eps = 1e-12;
    const double norm = std::sqrt(v->value.squared_norm() + eps);
    Tensor out = v->value;
    for (double& x : out.values()) x /= norm;
    Node* vn = tape.hold(v);
    return tape.make(std::move(out), v->requires_grad, [=](Node& self) {
        double gy = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gy += self.grad[i] * self.value[i];
        Tensor& d = vn->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += (self.grad[i] - self.value[i] * gy) / norm;
    });
}

Var film(Tape& tape, const Var& h, const Var& ss) {
    require_rank(h->value, 3, "film");
    const int c = h->value.dim(0);
    const std::size_t plane = static_cast<std::size_t>(h->value.dim(1)) * h->value.dim(2);
    if (ss->value.size() != static_cast<std::size_t>(2 * c)) {
        throw std::invalid_argument("film: modulation size " + ss->value.shape_str() +
                                    " does not match " + std::to_string(c) + " channels");
    }
    Tensor out = h->value;
    for (int ci = 0; ci < c; ++ci) {
        const double sc = 1.0 + ss->value[static_cast<std::size_t>(ci)];
        const double sh = ss->value[static_cast<std::size_t>(c + ci)];
        double* p = out.ptr() + ci * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * sc + sh;
    }
    Node* hn = tape.hold(h);
    Node* sn = tape.hold(ss);
    return tape.make(std::move(out), any_grad({&h, &ss}), [=](Node& self) {
        for (int ci = 0; ci < c; ++ci) {
            const double* g = self.grad.ptr() + ci * plane;
            const double* hv = hn->value.ptr() + ci * plane;
            if (hn->requires_grad) {
                const double sc = 1.0 + sn->value[static_cast<std::size_t>(ci)];
                double* dh = hn->grad_buffer().ptr() + ci * plane;
                for (std::size_t i = 0; i < plane; ++i) dh[i] += g[i] * sc;
            }
            if (sn->requires_grad) {
                double gs = 0.0, gb = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    gs += g[i] * hv[i];
                    gb += g[i];
                }
                Tensor& ds = sn->grad_buffer();
                ds[static_cast<std::size_t>(ci)] += gs;
                ds[static_cast<std::size_t>(c + ci)] += gb;
            }
        }
    });
}

Var broadcast_rows(Tape& tape, const Var& v, int rows) {
    int c = 1, w = 0;
    if (v->value.ndim() == 1) {
        w = v->value.dim(0);
    } else if (v->value.ndim() == 3 && v->value.dim(1) == 1) {
        c = v->value.dim(0);
        w = v->value.dim(2);
    } else {
        throw std::invalid_argument("broadcast_rows: expected [W] or [C,1,W], got " + v->value.shape_str());
    }
    if (rows <= 0) throw std::invalid_argument("broadcast_rows: rows must be positive");
    Tensor out({c, rows, w});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < rows; ++y) {
            for (int x = 0; x < w; ++x) out.at(ci, y, x) = v->value[static_cast<std::size_t>(ci * w + x)];
        }
    }
    Node* vn = tape.hold(v);
    return tape.make(std::move(out), v->requires_grad, [=](Node& self) {
        Tensor& d = vn->grad_buffer();
        for (int ci = 0; ci < c; ++ci) {
            for (int y = 0; y < rows; ++y) {
                for (int x = 0; x < w; ++x) d[static_cast<std::size_t>(ci * w + x)] += self.grad.at(ci, y, x);
            }
        }
    });
}

Var mean_rows(Tape& tape, const Var& x) {
    require_rank(x->value, 3, "mean_rows");
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    Tensor out({c, 1, w});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) out.at(ci, 0, xx) += x->value.at(ci, y, xx) / h;
        }
    }
    Node* xn = tape.hold(x);
    return tape.make(std::move(out), x->requires_grad, [=](Node& self) {
        Tensor& d = xn->grad_buffer();
        for (int ci = 0; ci < c; ++ci) {
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < w; ++xx) d.at(ci, y, xx) += self.grad.at(ci, 0, xx) / h;
            }
        }
    });
}

Var mix_rows(Tape& tape, const Var& x, const Tensor& mix) {
    require_rank(x->value, 3, "mix_rows");
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    if (mix.ndim() != 2 || mix.dim(0) != h || mix.dim(1) != h) {
        throw std::invalid_argument("mix_rows: mixing matrix " + mix.shape_str() +
                                    " does not match " + std::to_string(h) + " rows");
    }
    Tensor out({c, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ci = 0; ci < c; ++ci) {
        kernels::gemm(h, w, h, mix.ptr(), h, x->value.ptr() + ci * plane, w, 0.0,
                      out.ptr() + ci * plane, w);
    }
    Node* xn = tape.hold(x);
    Tensor mix_t({h, h});
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < h; ++j) mix_t[static_cast<std::size_t>(j) * h + i] = mix[static_cast<std::size_t>(i) * h + j];
    }
    return tape.make(std::move(out), x->requires_grad, [=](Node& self) {
        Tensor& d = xn->grad_buffer();
        for (int ci = 0; ci < c; ++ci) {
            kernels::gemm(h, w, h, mix_t.ptr(), h, self.grad.ptr() + ci * plane, w, 1.0,
                          d.ptr() + ci * plane, w);
        }
    });
}

Var segment_pool(Tape& tape, const Var& x, int segments) {
    require_rank(x->value, 3, "segment_pool");
    const int len = x->value.dim(2);
    if (segments <= 0 || len < segments) {
        throw std::invalid_argument("segment_pool: sequence of length " + std::to_string(len) +
                                    " cannot be split into " + std::to_string(segments) +
                                    " segments");
    }
    std::vector<std::pair<int, int>> bounds;
    for (int s = 0; s < segments; ++s) {
        bounds.emplace_back(static_cast<int>(static_cast<long long>(s) * len / segments),
                            static_cast<int>(static_cast<long long>(s + 1) * len / segments));
    }
    return segment_pool(tape, x, bounds);
}

Var segment_pool(Tape& tape, const Var& x, const std::vector<std::pair<int, int>>& bounds) {
    require_rank(x->value, 3, "segment_pool");
    const int c = x->value.dim(0), len = x->value.dim(2);
    if (x->value.dim(1) != 1) throw std::invalid_argument("segment_pool: expected [C,1,L]");
    const int segments = static_cast<int>(bounds.size());
    if (segments == 0) throw std::invalid_argument("segment_pool: no segments");
    for (const auto& [lo, hi] : bounds) {
        if (lo < 0 || hi > len || hi < lo) throw std::invalid_argument("segment_pool: segment out of range");
    }
    Tensor out({c * segments});
    for (int ci = 0; ci < c; ++ci) {
        for (int s = 0; s < segments; ++s) {
            const auto [lo, hi] = bounds[static_cast<std::size_t>(s)];
            if (hi == lo) continue;
            double acc = 0.0;
            for (int i = lo; i < hi; ++i) acc += x->value.at(ci, 0, i);
            out[static_cast<std::size_t>(ci * segments + s)] = acc / (hi - lo);
        }
    }
    Node* xn = tape.hold(x);
    return tape.make(std::move(out), x->requires_grad, [=](Node& self) {
        Tensor& d = xn->grad_buffer();
        for (int ci = 0; ci < c; ++ci) {
            for (int s = 0; s < segments; ++s) {
                const auto [lo, hi] = bounds[static_cast<std::size_t>(s)];
                if (hi == lo) continue;
                const double g = self.grad[static_cast<std::size_t>(ci * segments + s)] / (hi - lo);
                for (int i = lo; i < hi; ++i) d.at(ci, 0, i) += g;
            }
        }
    });
}

Var cross_attention(Tape& tape, const Var& h, const Var& tokens, const Var& wq, const Var& wk,
                    const Var& wv, const Var& wo, const Var& pq, const Var& pk) {
    require_rank(h->value, 3, "cross_attention");
    require_rank(tokens->value, 2, "cross_attention tokens");
    const int c = h->value.dim(0), hh = h->value.dim(1), ww = h->value.dim(2);
    const int n = hh * ww;
    const int d = tokens->value.dim(0), s = tokens->value.dim(1);
    const int a = wq->value.dim(0);
    auto expect = [](const Var& v, std::vector<int> shape, const char* what) {
        if (v->value.shape() != shape) {
            throw std::invalid_argument(std::string("cross_attention: ") + what + " must be " +
                                        shape_to_string(shape) + ", got " + v->value.shape_str());
        }
    };
    expect(wq, {a, c}, "wq");
    expect(wk, {a, d}, "wk");
    expect(wv, {a, d}, "wv");
    expect(wo, {c, a}, "wo");
    expect(pq, {a, ww}, "pq");
    expect(pk, {a, s}, "pk");
    const double inv = 1.0 / std::sqrt(static_cast<double>(a));
    const double* x = h->value.ptr();
    const double* tk = tokens->value.ptr();

    // q [A,N], k [A,S], v [A,S]
    auto q = std::make_shared<std::vector<double>>(static_cast<std::size_t>(a) * n);
    kernels::gemm(a, n, c, wq->value.ptr(), c, x, n, 0.0, q->data(), n);
    for (int ai = 0; ai < a; ++ai) {
        for (int pix = 0; pix < n; ++pix) (*q)[static_cast<std::size_t>(ai) * n + pix] += pq->value[static_cast<std::size_t>(ai) * ww + pix % ww];
    }
    auto k = std::make_shared<std::vector<double>>(static_cast<std::size_t>(a) * s);
    auto v = std::make_shared<std::vector<double>>(static_cast<std::size_t>(a) * s);
    kernels::gemm(a, s, d, wk->value.ptr(), d, tk, s, 0.0, k->data(), s);
    for (std::size_t i = 0; i < k->size(); ++i) (*k)[i] += pk->value[i];
    kernels::gemm(a, s, d, wv->value.ptr(), d, tk, s, 0.0, v->data(), s);

    // p [N,S] row softmax of q^T k / sqrt(A)
    auto pm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * s);
    for (int pix = 0; pix < n; ++pix) {
        double* row = pm->data() + static_cast<std::size_t>(pix) * s;
        double mx = -std::numeric_limits<double>::infinity();
        for (int si = 0; si < s; ++si) {
            double acc = 0.0;
            for (int ai = 0; ai < a; ++ai) acc += (*q)[static_cast<std::size_t>(ai) * n + pix] * (*k)[static_cast<std::size_t>(ai) * s + si];
            row[si] = acc * inv;
            mx = std::max(mx, row[si]);
        }
        double z = 0.0;
        for (int si = 0; si < s; ++si) {
            row[si] = std::exp(row[si] - mx);
            z += row[si];
        }
        for (int si = 0; si < s; ++si) row[si] /= z;
    }
    // o [A,N] = v p^T
    auto o = std::make_shared<std::vector<double>>(static_cast<std::size_t>(a) * n, 0.0);
    for (int ai = 0; ai < a; ++ai) {
        for (int pix = 0; pix < n; ++pix) {
            double acc = 0.0;
            const double* row = pm->data() + static_cast<std::size_t>(pix) * s;
            for (int si = 0; si < s; ++si) acc += (*v)[static_cast<std::size_t>(ai) * s + si] * row[si];
            (*o)[static_cast<std::size_t>(ai) * n + pix] = acc;
        }
    }
    Tensor out({c, hh, ww});
    kernels::gemm(c, n, a, wo->value.ptr(), a, o->data(), n, 0.0, out.ptr(), n);

    Node* hn = tape.hold(h);
    Node* tn = tape.hold(tokens);
    Node* qn = tape.hold(wq);
    Node* kn = tape.hold(wk);
    Node* vn = tape.hold(wv);
    Node* on = tape.hold(wo);
    Node* pqn = tape.hold(pq);
    Node* pkn = tape.hold(pk);
    const bool rg = any_grad({&h, &tokens, &wq, &wk, &wv, &wo, &pq, &pk});
    return tape.make(std::move(out), rg, [=](Node& self) {
        const double* dy = self.grad.ptr();
        const std::size_t an = static_cast<std::size_t>(a) * n, as = static_cast<std::size_t>(a) * s;
        if (on->requires_grad) {
            Tensor& g = on->grad_buffer();
            for (int ci = 0; ci < c; ++ci) {
                for (int ai = 0; ai < a; ++ai) {
                    double acc = 0.0;
                    for (int pix = 0; pix < n; ++pix) acc += dy[static_cast<std::size_t>(ci) * n + pix] * (*o)[static_cast<std::size_t>(ai) * n + pix];
                    g[static_cast<std::size_t>(ci) * a + ai] += acc;
                }
            }
        }
        // dO = wo^T dY
        std::vector<double> dout(an, 0.0);
        for (int ci = 0; ci < c; ++ci) {
            for (int ai = 0; ai < a; ++ai) {
                const double w = on->value[static_cast<std::size_t>(ci) * a + ai];
                for (int pix = 0; pix < n; ++pix) dout[static_cast<std::size_t>(ai) * n + pix] += w * dy[static_cast<std::size_t>(ci) * n + pix];
            }
        }
        // dV = dO p ; dP = dO^T v ; dL = p (dP - sum(dP p))
        std::vector<double> dv(as, 0.0), dl(static_cast<std::size_t>(n) * s);
        for (int pix = 0; pix < n; ++pix) {
            const double* prow = pm->data() + static_cast<std::size_t>(pix) * s;
            double* lrow = dl.data() + static_cast<std::size_t>(pix) * s;
            double dot = 0.0;
            for (int si = 0; si < s; ++si) {
                double acc = 0.0;
                for (int ai = 0; ai < a; ++ai) {
                    const double g = dout[static_cast<std::size_t>(ai) * n + pix];
                    acc += g * (*v)[static_cast<std::size_t>(ai) * s + si];
                    dv[static_cast<std::size_t>(ai) * s + si] += g * prow[si];
                }
                lrow[si] = acc;
                dot += acc * prow[si];
            }
            for (int si = 0; si < s; ++si) lrow[si] = prow[si] * (lrow[si] - dot) * inv;
        }
        // dQ = k dL^T ; dK = q dL
        std::vector<double> dq(an, 0.0), dk(as, 0.0);
        for (int ai = 0; ai < a; ++ai) {
            for (int pix = 0; pix < n; ++pix) {
                const double* lrow = dl.data() + static_cast<std::size_t>(pix) * s;
                const double qv = (*q)[static_cast<std::size_t>(ai) * n + pix];
                double acc = 0.0;
                for (int si = 0; si < s; ++si) {
                    acc += (*k)[static_cast<std::size_t>(ai) * s + si] * lrow[si];
                    dk[static_cast<std::size_t>(ai) * s + si] += qv * lrow[si];
                }
                dq[static_cast<std::size_t>(ai) * n + pix] = acc;
            }
        }
        if (pqn->requires_grad) {
            Tensor& g = pqn->grad_buffer();
            for (int ai = 0; ai < a; ++ai) {
                for (int pix = 0; pix < n; ++pix) g[static_cast<std::size_t>(ai) * ww + pix % ww] += dq[static_cast<std::size_t>(ai) * n + pix];
            }
        }
        if (pkn->requires_grad) {
            Tensor& g = pkn->grad_buffer();
            for (std::size_t i = 0; i < as; ++i) g[i] += dk[i];
        }
        if (qn->requires_grad) {
            Tensor& g = qn->grad_buffer();
            for (int ai = 0; ai < a; ++ai) {
                for (int ci = 0; ci < c; ++ci) {
                    double acc = 0.0;
                    for (int pix = 0; pix < n; ++pix) acc += dq[static_cast<std::size_t>(ai) * n + pix] * hn->value[static_cast<std::size_t>(ci) * n + pix];
                    g[static_cast<std::size_t>(ai) * c + ci] += acc;
                }
            }
        }
        if (hn->requires_grad) {
            Tensor& g = hn->grad_buffer();
            for (int ai = 0; ai < a; ++ai) {
                for (int ci = 0; ci < c; ++ci) {
                    const double w = qn->value[static_cast<std::size_t>(ai) * c + ci];
                    for (int pix = 0; pix < n; ++pix) g[static_cast<std::size_t>(ci) * n + pix] += w * dq[static_cast<std::size_t>(ai) * n + pix];
                }
            }
        }
        auto token_side = [&](Node* wnode, const std::vector<double>& dproj) {
            if (wnode->requires_grad) {
                Tensor& g = wnode->grad_buffer();
                for (int ai = 0; ai < a; ++ai) {
                    for (int di = 0; di < d; ++di) {
                        double acc = 0.0;
                        for (int si = 0; si < s; ++si) acc += dproj[static_cast<std::size_t>(ai) * s + si] * tn->value[static_cast<std::size_t>(di) * s + si];
                        g[static_cast<std::size_t>(ai) * d + di] += acc;
                    }
                }
            }
            if (tn->requires_grad) {
                Tensor& g = tn->grad_buffer();
                for (int ai = 0; ai < a; ++ai) {
                    for (int di = 0; di < d; ++di) {
                        const double w = wnode->value[static_cast<std::size_t>(ai) * d + di];
                        for (int si = 0; si < s; ++si) g[static_cast<std::size_t>(di) * s + si] += w * dproj[static_cast<std::size_t>(ai) * s + si];
                    }
                }
            }
        };
        token_side(kn, dk);
        token_side(vn, dv);
    });
}

Var mse(Tape& tape, const Var& pred, const Tensor& target) {
    require_same_shape(pred->value, target, "mse");
    const std::size_t n = target.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred->value[i] - target[i];
        acc += d * d;
    }
    Node* pn = tape.hold(pred);
    return tape.make(Tensor({1}, {acc / static_cast<double>(n)}), pred->requires_grad,
                     [pn, target, n](Node& self) {
                         const double g = self.grad[0] * 2.0 / static_cast<double>(n);
                         Tensor& d = pn->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) d[i] += g * (pn->value[i] - target[i]);
                     });
}

Var weighted_sum(Tape& tape, const Var& a, double wa, const Var& b, double wb) {
    if (a->value.size() != 1 || b->value.size() != 1) {
        throw std::invalid_argument("weighted_sum: scalar inputs required");
    }
    Node* an = tape.hold(a);
    Node* bn = tape.hold(b);
    return tape.make(Tensor({1}, {wa * a->value[0] + wb * b->value[0]}), any_grad({&a, &b}),
                     [=](Node& self) {
                         if (an->requires_grad) an->grad_buffer()[0] += wa * self.grad[0];
                         if (bn->requires_grad) bn->grad_buffer()[0] += wb * self.grad[0];
                     });
}

Var gaussian_sample(Tape& tape, const Var& ml, const Tensor& eps) {
    require_rank(ml->value, 3, "gaussian_sample");
    const int c2 = ml->value.dim(0);
    if (c2 % 2 != 0) throw std::invalid_argument("gaussian_sample: odd channel count");
    const int c = c2 / 2;
    const std::vector<int> shape{c, ml->value.dim(1), ml->value.dim(2)};
    if (eps.shape() != shape) throw std::invalid_argument("gaussian_sample: noise shape mismatch");
    const std::size_t n = eps.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = ml->value[i] + std::exp(0.5 * ml->value[n + i]) * eps[i];
    }
    Node* mn = tape.hold(ml);
    return tape.make(std::move(out), ml->requires_grad, [mn, eps, n](Node& self) {
        Tensor& d = mn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
            d[i] += self.grad[i];
            d[n + i] += self.grad[i] * 0.5 * std::exp(0.5 * mn->value[n + i]) * eps[i];
        }
    });
}

Var kl_standard_normal(Tape& tape, const Var& ml) {
    require_rank(ml->value, 3, "kl_standard_normal");
    const std::size_t n = ml->value.size() / 2;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double mu = ml->value[i];
        const double lv = ml->value[n + i];
        acc += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    Node* mn = tape.hold(ml);
    return tape.make(Tensor({1}, {acc / static_cast<double>(n)}), ml->requires_grad,
                     [mn, n](Node& self) {
                         const double g = self.grad[0] / static_cast<double>(n);
                         Tensor& d = mn->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                             d[i] += g * mn->value[i];
                             d[n + i] += g * 0.5 * (std::exp(mn->value[n + i]) - 1.0);
                         }
                     });
}

}  // namespace dualdiff::ag
