#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ect/common.hpp"
#include "ect/rng.hpp"
#include "ect/threading.hpp"

namespace ect {

// Dense 4-D tensor (batch, channels, height, width); lower-rank data uses
// trailing singleton dims. Scalar type is float for training and double for
// gradient verification.
template <typename T>
struct Tensor {
    std::array<int, 4> dims{1, 1, 1, 1};
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::array<int, 4> d, T fill = T(0))
        : dims(d), v(static_cast<std::size_t>(d[0]) * d[1] * d[2] * d[3], fill) {
        for (int x : d)
            if (x <= 0) throw ShapeError("tensor dims must be positive");
    }

    static Tensor scalar(T x) {
        Tensor t({1, 1, 1, 1});
        t.v[0] = x;
        return t;
    }

    std::size_t numel() const { return v.size(); }
    int batch() const { return dims[0]; }
    int channels() const { return dims[1]; }
    int height() const { return dims[2]; }
    int width() const { return dims[3]; }

    T& at(int n, int c, int h, int w) {
        return v[((static_cast<std::size_t>(n) * dims[1] + c) * dims[2] + h) * dims[3] + w];
    }
    T at(int n, int c, int h, int w) const {
        return v[((static_cast<std::size_t>(n) * dims[1] + c) * dims[2] + h) * dims[3] + w];
    }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    std::string shape_str() const {
        return "(" + std::to_string(dims[0]) + "," + std::to_string(dims[1]) + "," +
               std::to_string(dims[2]) + "," + std::to_string(dims[3]) + ")";
    }

    void fill_randn(Rng& rng, T std_dev) {
        for (T& x : v) x = static_cast<T>(rng.normal(0.0, std_dev));
    }
    void fill_uniform(Rng& rng, T lo, T hi) {
        for (T& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    }
};

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

template <typename T>
T safe_pow(T base, T expo) {
    if (expo == T(0)) return T(1);
    return std::pow(base, expo);
}

}  // namespace detail

// Reverse-mode tape. Operations append nodes in topological order; backward
// replays them in reverse, accumulating into pre-zeroed gradient buffers so
// accumulation order is fixed and disconnected parameters simply keep zero
// gradients.
template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backprop;
    };

    int leaf(Tensor<T> value, bool requires_grad) {
        Node node;
        node.grad = Tensor<T>(value.dims, T(0));
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor<T>& value(int id) const { return nodes_[id].value; }
    const Tensor<T>& grad(int id) const { return nodes_[id].grad; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }

    // Smallest distance of any recorded input to a non-smooth point of its
    // op (relu corner, smooth-l1 elbow, focal clamp). Finite-difference
    // checks redraw inputs that sit closer than ~10x the probe step.
    double kink_margin() const { return kink_margin_; }

    void backward(int loss_id) {
        if (nodes_[loss_id].value.numel() != 1)
            throw ShapeError("backward requires a scalar loss, got " +
                             nodes_[loss_id].value.shape_str());
        for (auto& n : nodes_) std::fill(n.grad.v.begin(), n.grad.v.end(), T(0));
        nodes_[loss_id].grad.v[0] = T(1);
        for (int id = loss_id; id >= 0; --id) {
            if (nodes_[id].backprop && nodes_[id].requires_grad) nodes_[id].backprop(*this);
        }
    }

    // ---- operations ----

    int conv_transpose2d(int x, int w, int b, int sh, int sw, int ph, int pw, int oph, int opw);
    int conv2d_1x1(int x, int w, int b);
    int batch_norm2d(int x, int gamma, int beta, Tensor<T>* run_mean, Tensor<T>* run_var,
                     bool train_mode, T momentum = T(0.1), T eps = T(1e-5));
    int relu(int x);
    int sigmoid(int x);
    int softplus(int x);
    int nearest_upsample(int x, int out_h, int out_w);
    int add(int x, int y);
    int mul(int x, int y);
    int scale(int x, T k);
    int sum(int x);

    int loss_smooth_l1(int pred, const Tensor<T>& target, T beta = T(0.1));
    int loss_focal(int pred, const Tensor<T>& target, T gamma = T(2), T alpha = T(0.75),
                   T clamp = T(1e-7));
    int loss_dice(int pred, const Tensor<T>& target, T smooth = T(1));

private:
    int push(Tensor<T> value, bool requires_grad, std::function<void(Tape&)> backprop) {
        Node node;
        node.grad = Tensor<T>(value.dims, T(0));
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        node.backprop = std::move(backprop);
        nodes_.push_back(std::move(node));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void note_kink(double margin) { kink_margin_ = std::min(kink_margin_, margin); }

    std::vector<Node> nodes_;
    double kink_margin_ = std::numeric_limits<double>::infinity();
};

// ---- convolution kernels ----

namespace detail {

// x (N,C,H,W) -> (N,H,W,C) copy for channel-contiguous inner loops.
template <typename T>
std::vector<T> to_nhwc(const Tensor<T>& x) {
    const int N = x.dims[0], C = x.dims[1], H = x.dims[2], W = x.dims[3];
    std::vector<T> out(x.numel());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = &x.v[(static_cast<std::size_t>(n) * C + c) * H * W];
            T* dst = &out[static_cast<std::size_t>(n) * H * W * C + c];
            for (int p = 0; p < H * W; ++p) dst[static_cast<std::size_t>(p) * C] = src[p];
        }
    return out;
}

}  // namespace detail

template <typename T>
int Tape<T>::conv_transpose2d(int x, int w, int b, int sh, int sw, int ph, int pw, int oph,
                              int opw) {
    const Tensor<T>& xv = nodes_[x].value;
    const Tensor<T>& wv = nodes_[w].value;
    const Tensor<T>& bv = nodes_[b].value;
    const int N = xv.dims[0], Ci = xv.dims[1], Hi = xv.dims[2], Wi = xv.dims[3];
    const int Kh = wv.dims[2], Kw = wv.dims[3], Co = wv.dims[1];
    if (wv.dims[0] != Ci)
        throw ShapeError("conv_transpose2d: weight expects " + std::to_string(wv.dims[0]) +
                         " input channels, input has " + std::to_string(Ci));
    if (bv.dims != std::array<int, 4>{1, Co, 1, 1})
        throw ShapeError("conv_transpose2d: bias shape " + bv.shape_str() + " != (1," +
                         std::to_string(Co) + ",1,1)");
    if (sh < 1 || sw < 1 || oph < 0 || opw < 0 || oph >= sh || opw >= sw)
        throw ShapeError("conv_transpose2d: output_padding must satisfy 0 <= op < stride");
    const int Ho = (Hi - 1) * sh + Kh - 2 * ph + oph;
    const int Wo = (Wi - 1) * sw + Kw - 2 * pw + opw;
    if (Ho <= 0 || Wo <= 0)
        throw ShapeError("conv_transpose2d: non-positive output " + std::to_string(Ho) + "x" +
                         std::to_string(Wo));

    // Weight rearranged to (Kh,Kw,Ci,Co) so the co loop is contiguous.
    std::vector<T> wt(static_cast<std::size_t>(Kh) * Kw * Ci * Co);
    for (int ci = 0; ci < Ci; ++ci)
        for (int co = 0; co < Co; ++co)
            for (int kh = 0; kh < Kh; ++kh)
                for (int kw = 0; kw < Kw; ++kw)
                    wt[((static_cast<std::size_t>(kh) * Kw + kw) * Ci + ci) * Co + co] =
                        wv.at(ci, co, kh, kw);
    const std::vector<T> xt = detail::to_nhwc(xv);

    Tensor<T> out({N, Co, Ho, Wo});
    parallel_chunks(N, kReductionChunks, [&](int, std::int64_t n_lo, std::int64_t n_hi) {
        std::vector<T> acc(Co);
        for (std::int64_t n = n_lo; n < n_hi; ++n) {
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    for (int co = 0; co < Co; ++co) acc[co] = bv.v[co];
                    for (int kh = 0; kh < Kh; ++kh) {
                        const int th = oh + ph - kh;
                        if (th < 0 || th % sh != 0) continue;
                        const int ih = th / sh;
                        if (ih >= Hi) continue;
                        for (int kw = 0; kw < Kw; ++kw) {
                            const int tw = ow + pw - kw;
                            if (tw < 0 || tw % sw != 0) continue;
                            const int iw = tw / sw;
                            if (iw >= Wi) continue;
                            const T* xa =
                                &xt[((static_cast<std::size_t>(n) * Hi + ih) * Wi + iw) * Ci];
                            const T* wr =
                                &wt[(static_cast<std::size_t>(kh) * Kw + kw) * Ci * Co];
                            for (int ci = 0; ci < Ci; ++ci) {
                                const T av = xa[ci];
                                const T* ws = wr + static_cast<std::size_t>(ci) * Co;
                                for (int co = 0; co < Co; ++co) acc[co] += av * ws[co];
                            }
                        }
                    }
                    for (int co = 0; co < Co; ++co) out.at(static_cast<int>(n), co, oh, ow) = acc[co];
                }
            }
        }
    });

    const bool rg = nodes_[x].requires_grad || nodes_[w].requires_grad || nodes_[b].requires_grad;
    const int out_id = push(std::move(out), rg, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        const Tensor<T>& xval = tape.nodes_[x].value;
        const Tensor<T>& wval = tape.nodes_[w].value;
        const std::vector<T> got = detail::to_nhwc(go);

        if (tape.nodes_[b].requires_grad) {
            Tensor<T>& gb = tape.nodes_[b].grad;
            for (int n = 0; n < N; ++n)
                for (int co = 0; co < Co; ++co) {
                    T s = T(0);
                    const T* p = &go.v[(static_cast<std::size_t>(n) * Co + co) * Ho * Wo];
                    for (int q = 0; q < Ho * Wo; ++q) s += p[q];
                    gb.v[co] += s;
                }
        }

        if (tape.nodes_[x].requires_grad) {
            // dX is a strided correlation of dOut with w: (Kh,Kw,Co,Ci) view.
            std::vector<T> w2(static_cast<std::size_t>(Kh) * Kw * Co * Ci);
            for (int ci = 0; ci < Ci; ++ci)
                for (int co = 0; co < Co; ++co)
                    for (int kh = 0; kh < Kh; ++kh)
                        for (int kw = 0; kw < Kw; ++kw)
                            w2[((static_cast<std::size_t>(kh) * Kw + kw) * Co + co) * Ci + ci] =
                                wval.at(ci, co, kh, kw);
            Tensor<T>& gx = tape.nodes_[x].grad;
            parallel_chunks(N, kReductionChunks, [&](int, std::int64_t n_lo, std::int64_t n_hi) {
                std::vector<T> acc(Ci);
                for (std::int64_t n = n_lo; n < n_hi; ++n) {
                    for (int ih = 0; ih < Hi; ++ih) {
                        for (int iw = 0; iw < Wi; ++iw) {
                            std::fill(acc.begin(), acc.end(), T(0));
                            for (int kh = 0; kh < Kh; ++kh) {
                                const int oh = ih * sh - ph + kh;
                                if (oh < 0 || oh >= Ho) continue;
                                for (int kw = 0; kw < Kw; ++kw) {
                                    const int ow = iw * sw - pw + kw;
                                    if (ow < 0 || ow >= Wo) continue;
                                    const T* da =
                                        &got[((static_cast<std::size_t>(n) * Ho + oh) * Wo + ow) *
                                             Co];
                                    const T* wr =
                                        &w2[(static_cast<std::size_t>(kh) * Kw + kw) * Co * Ci];
                                    for (int co = 0; co < Co; ++co) {
                                        const T dv = da[co];
                                        const T* ws = wr + static_cast<std::size_t>(co) * Ci;
                                        for (int ci = 0; ci < Ci; ++ci) acc[ci] += dv * ws[ci];
                                    }
                                }
                            }
                            for (int ci = 0; ci < Ci; ++ci)
                                gx.at(static_cast<int>(n), ci, ih, iw) += acc[ci];
                        }
                    }
                }
            });
        }

        if (tape.nodes_[w].requires_grad) {
            const std::vector<T> xt2 = detail::to_nhwc(xval);
            Tensor<T>& gw = tape.nodes_[w].grad;
            // Parallel over kernel taps: each (kh,kw) owns a disjoint slice.
            std::vector<T> gwt(static_cast<std::size_t>(Kh) * Kw * Ci * Co, T(0));
            parallel_chunks(Kh * Kw, Kh * Kw, [&](int, std::int64_t t_lo, std::int64_t t_hi) {
                for (std::int64_t t = t_lo; t < t_hi; ++t) {
                    const int kh = static_cast<int>(t) / Kw, kw = static_cast<int>(t) % Kw;
                    T* slice = &gwt[static_cast<std::size_t>(t) * Ci * Co];
                    for (int n = 0; n < N; ++n) {
                        for (int ih = 0; ih < Hi; ++ih) {
                            const int oh = ih * sh - ph + kh;
                            if (oh < 0 || oh >= Ho) continue;
                            for (int iw = 0; iw < Wi; ++iw) {
                                const int ow = iw * sw - pw + kw;
                                if (ow < 0 || ow >= Wo) continue;
                                const T* xa =
                                    &xt2[((static_cast<std::size_t>(n) * Hi + ih) * Wi + iw) * Ci];
                                const T* da =
                                    &got[((static_cast<std::size_t>(n) * Ho + oh) * Wo + ow) * Co];
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const T av = xa[ci];
                                    T* gs = slice + static_cast<std::size_t>(ci) * Co;
                                    for (int co = 0; co < Co; ++co) gs[co] += av * da[co];
                                }
                            }
                        }
                    }
                }
            });
            for (int ci = 0; ci < Ci; ++ci)
                for (int co = 0; co < Co; ++co)
                    for (int kh = 0; kh < Kh; ++kh)
                        for (int kw = 0; kw < Kw; ++kw)
                            gw.at(ci, co, kh, kw) +=
                                gwt[((static_cast<std::size_t>(kh) * Kw + kw) * Ci + ci) * Co +
                                    co];
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::conv2d_1x1(int x, int w, int b) {
    const Tensor<T>& xv = nodes_[x].value;
    const Tensor<T>& wv = nodes_[w].value;
    const Tensor<T>& bv = nodes_[b].value;
    const int N = xv.dims[0], Ci = xv.dims[1], H = xv.dims[2], W = xv.dims[3];
    const int Co = wv.dims[0];
    if (wv.dims[1] != Ci)
        throw ShapeError("conv2d_1x1: weight expects " + std::to_string(wv.dims[1]) +
                         " input channels, input has " + std::to_string(Ci));
    if (bv.dims != std::array<int, 4>{1, Co, 1, 1})
        throw ShapeError("conv2d_1x1: bias shape mismatch");

    const int P = H * W;
    Tensor<T> out({N, Co, H, W});
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            T* op = &out.v[(static_cast<std::size_t>(n) * Co + co) * P];
            std::fill(op, op + P, bv.v[co]);
            for (int ci = 0; ci < Ci; ++ci) {
                const T wk = wv.at(co, ci, 0, 0);
                const T* xp = &xv.v[(static_cast<std::size_t>(n) * Ci + ci) * P];
                for (int p = 0; p < P; ++p) op[p] += wk * xp[p];
            }
        }
    }

    const bool rg = nodes_[x].requires_grad || nodes_[w].requires_grad || nodes_[b].requires_grad;
    const int out_id = push(std::move(out), rg, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        const Tensor<T>& xval = tape.nodes_[x].value;
        const Tensor<T>& wval = tape.nodes_[w].value;
        if (tape.nodes_[b].requires_grad) {
            Tensor<T>& gb = tape.nodes_[b].grad;
            for (int n = 0; n < N; ++n)
                for (int co = 0; co < Co; ++co) {
                    const T* gp = &go.v[(static_cast<std::size_t>(n) * Co + co) * P];
                    T s = T(0);
                    for (int p = 0; p < P; ++p) s += gp[p];
                    gb.v[co] += s;
                }
        }
        if (tape.nodes_[w].requires_grad) {
            Tensor<T>& gw = tape.nodes_[w].grad;
            for (int n = 0; n < N; ++n)
                for (int co = 0; co < Co; ++co) {
                    const T* gp = &go.v[(static_cast<std::size_t>(n) * Co + co) * P];
                    for (int ci = 0; ci < Ci; ++ci) {
                        const T* xp = &xval.v[(static_cast<std::size_t>(n) * Ci + ci) * P];
                        T s = T(0);
                        for (int p = 0; p < P; ++p) s += gp[p] * xp[p];
                        gw.at(co, ci, 0, 0) += s;
                    }
                }
        }
        if (tape.nodes_[x].requires_grad) {
            Tensor<T>& gx = tape.nodes_[x].grad;
            for (int n = 0; n < N; ++n)
                for (int ci = 0; ci < Ci; ++ci) {
                    T* gp = &gx.v[(static_cast<std::size_t>(n) * Ci + ci) * P];
                    for (int co = 0; co < Co; ++co) {
                        const T wk = wval.at(co, ci, 0, 0);
                        const T* op = &go.v[(static_cast<std::size_t>(n) * Co + co) * P];
                        for (int p = 0; p < P; ++p) gp[p] += wk * op[p];
                    }
                }
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::batch_norm2d(int x, int gamma, int beta, Tensor<T>* run_mean, Tensor<T>* run_var,
                          bool train_mode, T momentum, T eps) {
    const Tensor<T>& xv = nodes_[x].value;
    const int N = xv.dims[0], C = xv.dims[1], H = xv.dims[2], W = xv.dims[3];
    const Tensor<T>& gv = nodes_[gamma].value;
    const Tensor<T>& bv = nodes_[beta].value;
    if (gv.dims != std::array<int, 4>{1, C, 1, 1} || bv.dims != std::array<int, 4>{1, C, 1, 1})
        throw ShapeError("batch_norm2d: gamma/beta must have shape (1," + std::to_string(C) +
                         ",1,1)");
    const std::int64_t M = static_cast<std::int64_t>(N) * H * W;
    if (train_mode && M <= 1)
        throw InvalidInputError("batch_norm2d: degenerate batch (batch*h*w must exceed 1)");

    std::vector<T> mean(C), inv_std(C);
    const int P = H * W;
    if (train_mode) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* xp = &xv.v[(static_cast<std::size_t>(n) * C + c) * P];
                for (int p = 0; p < P; ++p) s += xp[p];
            }
            const double mu = s / static_cast<double>(M);
            double sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* xp = &xv.v[(static_cast<std::size_t>(n) * C + c) * P];
                for (int p = 0; p < P; ++p) {
                    const double d = xp[p] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(M);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            if (run_mean && run_var) {
                run_mean->v[c] = (T(1) - momentum) * run_mean->v[c] + momentum * static_cast<T>(mu);
                run_var->v[c] = (T(1) - momentum) * run_var->v[c] + momentum * static_cast<T>(var);
            }
        }
    } else {
        if (!run_mean || !run_var)
            throw InvalidInputError("batch_norm2d: eval mode requires running statistics");
        for (int c = 0; c < C; ++c) {
            mean[c] = run_mean->v[c];
            inv_std[c] = T(1) / std::sqrt(run_var->v[c] + eps);
        }
    }

    Tensor<T> out(xv.dims);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xp = &xv.v[(static_cast<std::size_t>(n) * C + c) * P];
            T* op = &out.v[(static_cast<std::size_t>(n) * C + c) * P];
            const T mu = mean[c], is = inv_std[c], g = gv.v[c], bb = bv.v[c];
            for (int p = 0; p < P; ++p) op[p] = g * (xp[p] - mu) * is + bb;
        }

    const bool rg = nodes_[x].requires_grad || nodes_[gamma].requires_grad ||
                    nodes_[beta].requires_grad;
    const int out_id = push(std::move(out), rg, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        const Tensor<T>& xval = tape.nodes_[x].value;
        const Tensor<T>& gval = tape.nodes_[gamma].value;
        for (int c = 0; c < C; ++c) {
            const T mu = mean[c], is = inv_std[c];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* gp = &go.v[(static_cast<std::size_t>(n) * C + c) * P];
                const T* xp = &xval.v[(static_cast<std::size_t>(n) * C + c) * P];
                for (int p = 0; p < P; ++p) {
                    sum_dy += gp[p];
                    sum_dy_xhat += gp[p] * (xp[p] - mu) * is;
                }
            }
            if (tape.nodes_[gamma].requires_grad)
                tape.nodes_[gamma].grad.v[c] += static_cast<T>(sum_dy_xhat);
            if (tape.nodes_[beta].requires_grad)
                tape.nodes_[beta].grad.v[c] += static_cast<T>(sum_dy);
            if (tape.nodes_[x].requires_grad) {
                Tensor<T>& gx = tape.nodes_[x].grad;
                const T g = gval.v[c];
                if (train_mode) {
                    const T inv_m = T(1) / static_cast<T>(M);
                    for (int n = 0; n < N; ++n) {
                        const T* gp = &go.v[(static_cast<std::size_t>(n) * C + c) * P];
                        const T* xp = &xval.v[(static_cast<std::size_t>(n) * C + c) * P];
                        T* dp = &gx.v[(static_cast<std::size_t>(n) * C + c) * P];
                        for (int p = 0; p < P; ++p) {
                            const T xhat = (xp[p] - mu) * is;
                            dp[p] += g * is * inv_m *
                                     (static_cast<T>(M) * gp[p] - static_cast<T>(sum_dy) -
                                      xhat * static_cast<T>(sum_dy_xhat));
                        }
                    }
                } else {
                    for (int n = 0; n < N; ++n) {
                        const T* gp = &go.v[(static_cast<std::size_t>(n) * C + c) * P];
                        T* dp = &gx.v[(static_cast<std::size_t>(n) * C + c) * P];
                        for (int p = 0; p < P; ++p) dp[p] += g * is * gp[p];
                    }
                }
            }
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::relu(int x) {
    const Tensor<T>& xv = nodes_[x].value;
    double margin = std::numeric_limits<double>::infinity();
    Tensor<T> out(xv.dims);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        margin = std::min(margin, std::abs(static_cast<double>(xv.v[i])));
        out.v[i] = xv.v[i] > T(0) ? xv.v[i] : T(0);
    }
    note_kink(margin);
    const int out_id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        if (!tape.nodes_[x].requires_grad) return;
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        const Tensor<T>& xval = tape.nodes_[x].value;
        Tensor<T>& gx = tape.nodes_[x].grad;
        for (std::size_t i = 0; i < go.numel(); ++i)
            if (xval.v[i] > T(0)) gx.v[i] += go.v[i];  // subgradient at 0 is 0
    };
    return out_id;
}

template <typename T>
int Tape<T>::sigmoid(int x) {
    const Tensor<T>& xv = nodes_[x].value;
    Tensor<T> out(xv.dims);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        const T v = xv.v[i];
        if (v >= T(0)) {
            out.v[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out.v[i] = e / (T(1) + e);
        }
    }
    const int out_id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        if (!tape.nodes_[x].requires_grad) return;
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        const Tensor<T>& yv = tape.nodes_[out_id].value;
        Tensor<T>& gx = tape.nodes_[x].grad;
        for (std::size_t i = 0; i < go.numel(); ++i)
            gx.v[i] += go.v[i] * yv.v[i] * (T(1) - yv.v[i]);
    };
    return out_id;
}

template <typename T>
int Tape<T>::softplus(int x) {
    const Tensor<T>& xv = nodes_[x].value;
    Tensor<T> out(xv.dims);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        const T v = xv.v[i];
        out.v[i] = v > T(30) ? v : std::log1p(std::exp(v));
    }
    const int out_id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        if (!tape.nodes_[x].requires_grad) return;
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        const Tensor<T>& xval = tape.nodes_[x].value;
        Tensor<T>& gx = tape.nodes_[x].grad;
        for (std::size_t i = 0; i < go.numel(); ++i) {
            const T v = xval.v[i];
            const T sig = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                    : std::exp(v) / (T(1) + std::exp(v));
            gx.v[i] += go.v[i] * sig;
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::nearest_upsample(int x, int out_h, int out_w) {
    const Tensor<T>& xv = nodes_[x].value;
    const int N = xv.dims[0], C = xv.dims[1], Hi = xv.dims[2], Wi = xv.dims[3];
    if (out_h <= 0 || out_w <= 0) throw ShapeError("nearest_upsample: non-positive output size");
    Tensor<T> out({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int r = 0; r < out_h; ++r) {
                const int ir = r * Hi / out_h;
                for (int cw = 0; cw < out_w; ++cw)
                    out.at(n, c, r, cw) = xv.at(n, c, ir, cw * Wi / out_w);
            }
    const int out_id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        if (!tape.nodes_[x].requires_grad) return;
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        Tensor<T>& gx = tape.nodes_[x].grad;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int r = 0; r < out_h; ++r) {
                    const int ir = r * Hi / out_h;
                    for (int cw = 0; cw < out_w; ++cw)
                        gx.at(n, c, ir, cw * Wi / out_w) += go.at(n, c, r, cw);
                }
    };
    return out_id;
}

template <typename T>
int Tape<T>::add(int x, int y) {
    const Tensor<T>& xv = nodes_[x].value;
    const Tensor<T>& yv = nodes_[y].value;
    detail::check_same_shape(xv, yv, "add");
    Tensor<T> out(xv.dims);
    for (std::size_t i = 0; i < xv.numel(); ++i) out.v[i] = xv.v[i] + yv.v[i];
    const int out_id =
        push(std::move(out), nodes_[x].requires_grad || nodes_[y].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        if (tape.nodes_[x].requires_grad) {
            Tensor<T>& gx = tape.nodes_[x].grad;
            for (std::size_t i = 0; i < go.numel(); ++i) gx.v[i] += go.v[i];
        }
        if (tape.nodes_[y].requires_grad) {
            Tensor<T>& gy = tape.nodes_[y].grad;
            for (std::size_t i = 0; i < go.numel(); ++i) gy.v[i] += go.v[i];
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::mul(int x, int y) {
    const Tensor<T>& xv = nodes_[x].value;
    const Tensor<T>& yv = nodes_[y].value;
    detail::check_same_shape(xv, yv, "mul");
    Tensor<T> out(xv.dims);
    for (std::size_t i = 0; i < xv.numel(); ++i) out.v[i] = xv.v[i] * yv.v[i];
    const int out_id =
        push(std::move(out), nodes_[x].requires_grad || nodes_[y].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        const Tensor<T>& xval = tape.nodes_[x].value;
        const Tensor<T>& yval = tape.nodes_[y].value;
        if (tape.nodes_[x].requires_grad) {
            Tensor<T>& gx = tape.nodes_[x].grad;
            for (std::size_t i = 0; i < go.numel(); ++i) gx.v[i] += go.v[i] * yval.v[i];
        }
        if (tape.nodes_[y].requires_grad) {
            Tensor<T>& gy = tape.nodes_[y].grad;
            for (std::size_t i = 0; i < go.numel(); ++i) gy.v[i] += go.v[i] * xval.v[i];
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::scale(int x, T k) {
    const Tensor<T>& xv = nodes_[x].value;
    Tensor<T> out(xv.dims);
    for (std::size_t i = 0; i < xv.numel(); ++i) out.v[i] = k * xv.v[i];
    const int out_id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        if (!tape.nodes_[x].requires_grad) return;
        const Tensor<T>& go = tape.nodes_[out_id].grad;
        Tensor<T>& gx = tape.nodes_[x].grad;
        for (std::size_t i = 0; i < go.numel(); ++i) gx.v[i] += k * go.v[i];
    };
    return out_id;
}

template <typename T>
int Tape<T>::sum(int x) {
    const Tensor<T>& xv = nodes_[x].value;
    T s = T(0);
    for (const T& v : xv.v) s += v;
    const int out_id = push(Tensor<T>::scalar(s), nodes_[x].requires_grad, nullptr);
    nodes_[out_id].backprop = [=](Tape& tape) {
        if (!tape.nodes_[x].requires_grad) return;
        const T g = tape.nodes_[out_id].grad.v[0];
        Tensor<T>& gx = tape.nodes_[x].grad;
        for (std::size_t i = 0; i < gx.numel(); ++i) gx.v[i] += g;
    };
    return out_id;
}

template <typename T>
int Tape<T>::loss_smooth_l1(int pred, const Tensor<T>& target, T beta) {
    const Tensor<T>& pv = nodes_[pred].value;
    detail::check_same_shape(pv, target, "loss_smooth_l1");
    const std::size_t n = pv.numel();
    double acc = 0.0;
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pv.v[i]) - static_cast<double>(target.v[i]);
        const double a = std::abs(d);
        margin = std::min(margin, std::abs(a - static_cast<double>(beta)));
        acc += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
    }
    note_kink(margin);
    const int out_id =
        push(Tensor<T>::scalar(static_cast<T>(acc / n)), nodes_[pred].requires_grad, nullptr);
    Tensor<T> tgt = target;
    nodes_[out_id].backprop = [this, out_id, pred, tgt = std::move(tgt), beta, n](Tape& tape) {
        if (!tape.nodes_[pred].requires_grad) return;
        const T g = tape.nodes_[out_id].grad.v[0] / static_cast<T>(n);
        const Tensor<T>& pval = tape.nodes_[pred].value;
        Tensor<T>& gp = tape.nodes_[pred].grad;
        for (std::size_t i = 0; i < n; ++i) {
            const T d = pval.v[i] - tgt.v[i];
            const T a = std::abs(d);
            gp.v[i] += g * (a < beta ? d / beta : (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0))));
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::loss_focal(int pred, const Tensor<T>& target, T gamma, T alpha, T clamp) {
    const Tensor<T>& pv = nodes_[pred].value;
    detail::check_same_shape(pv, target, "loss_focal");
    const std::size_t n = pv.numel();
    double acc = 0.0;
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pv.v[i];
        const double y = target.v[i];
        const double c = clamp;
        margin = std::min(margin, std::min(std::abs(p - c), std::abs((1.0 - p) - c)));
        const double lp = std::log(std::max(p, c));
        const double lq = std::log(std::max(1.0 - p, c));
        acc -= alpha * y * detail::safe_pow(1.0 - p, static_cast<double>(gamma)) * lp +
               (1.0 - alpha) * (1.0 - y) * detail::safe_pow(p, static_cast<double>(gamma)) * lq;
    }
    note_kink(margin);
    const int out_id =
        push(Tensor<T>::scalar(static_cast<T>(acc / n)), nodes_[pred].requires_grad, nullptr);
    Tensor<T> tgt = target;
    nodes_[out_id].backprop = [this, out_id, pred, tgt = std::move(tgt), gamma, alpha, clamp,
                               n](Tape& tape) {
        if (!tape.nodes_[pred].requires_grad) return;
        const T g0 = tape.nodes_[out_id].grad.v[0] / static_cast<T>(n);
        const Tensor<T>& pval = tape.nodes_[pred].value;
        Tensor<T>& gp = tape.nodes_[pred].grad;
        const double gam = gamma, al = alpha, c = clamp;
        for (std::size_t i = 0; i < n; ++i) {
            const double p = pval.v[i];
            const double y = tgt.v[i];
            const double lp = std::log(std::max(p, c));
            const double lq = std::log(std::max(1.0 - p, c));
            double d = 0.0;
            // d/dp of -alpha*y*(1-p)^gamma*log(max(p,c))
            if (gam != 0.0)
                d += al * y * gam * detail::safe_pow(1.0 - p, gam - 1.0) * lp;
            if (p > c) d -= al * y * detail::safe_pow(1.0 - p, gam) / p;
            // d/dp of -(1-alpha)*(1-y)*p^gamma*log(max(1-p,c))
            if (gam != 0.0)
                d -= (1.0 - al) * (1.0 - y) * gam * detail::safe_pow(p, gam - 1.0) * lq;
            if (1.0 - p > c) d += (1.0 - al) * (1.0 - y) * detail::safe_pow(p, gam) / (1.0 - p);
            gp.v[i] += g0 * static_cast<T>(d);
        }
    };
    return out_id;
}

template <typename T>
int Tape<T>::loss_dice(int pred, const Tensor<T>& target, T smooth) {
    const Tensor<T>& pv = nodes_[pred].value;
    detail::check_same_shape(pv, target, "loss_dice");
    const int N = pv.dims[0];
    const std::size_t per = pv.numel() / N;
    std::vector<double> inter(N), psq(N), ysq(N);
    double acc = 0.0;
    for (int b = 0; b < N; ++b) {
        const T* pp = &pv.v[b * per];
        const T* yp = &target.v[b * per];
        double a = 0.0, bp = 0.0, by = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            a += static_cast<double>(pp[i]) * yp[i];
            bp += static_cast<double>(pp[i]) * pp[i];
            by += static_cast<double>(yp[i]) * yp[i];
        }
        inter[b] = a;
        psq[b] = bp;
        ysq[b] = by;
        acc += 1.0 - (2.0 * a + smooth) / (bp + by + smooth);
    }
    const int out_id =
        push(Tensor<T>::scalar(static_cast<T>(acc / N)), nodes_[pred].requires_grad, nullptr);
    Tensor<T> tgt = target;
    nodes_[out_id].backprop = [this, out_id, pred, tgt = std::move(tgt), smooth, N, per, inter,
                               psq, ysq](Tape& tape) {
        if (!tape.nodes_[pred].requires_grad) return;
        const T g0 = tape.nodes_[out_id].grad.v[0] / static_cast<T>(N);
        const Tensor<T>& pval = tape.nodes_[pred].value;
        Tensor<T>& gp = tape.nodes_[pred].grad;
        for (int b = 0; b < N; ++b) {
            const double denom = psq[b] + ysq[b] + smooth;
            const double num = 2.0 * inter[b] + smooth;
            const T* pp = &pval.v[b * per];
            const T* yp = &tgt.v[b * per];
            T* dp = &gp.v[b * per];
            for (std::size_t i = 0; i < per; ++i) {
                const double d =
                    -(2.0 * yp[i] * denom - num * 2.0 * pp[i]) / (denom * denom);
                dp[i] += g0 * static_cast<T>(d);
            }
        }
    };
    return out_id;
}

// ---- optimizer ----

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::int64_t t = 0;
};

// One Adam update over a fixed parameter list. Throws NumericError naming the
// parameter if a gradient is non-finite. Zero gradients leave parameters
// unchanged but still advance the step counter.
template <typename T>
void adam_step(std::vector<Tensor<T>*> params, const std::vector<const Tensor<T>*>& grads,
               const std::vector<std::string>& names, AdamState<T>& state, T lr = T(1e-3),
               T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
    if (params.size() != grads.size())
        throw ShapeError("adam_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const Tensor<T>* p : params) {
            state.m.emplace_back(p->dims, T(0));
            state.v.emplace_back(p->dims, T(0));
        }
    }
    state.t += 1;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.t));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor<T>& p = *params[k];
        const Tensor<T>& g = *grads[k];
        if (!p.same_shape(g) || !p.same_shape(state.m[k]))
            throw ShapeError("adam_step: state shape mismatch for " +
                             (k < names.size() ? names[k] : std::to_string(k)));
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T gi = g.v[i];
            if (!std::isfinite(static_cast<double>(gi)))
                throw NumericError("non-finite gradient in parameter " +
                                   (k < names.size() ? names[k] : std::to_string(k)));
            state.m[k].v[i] = beta1 * state.m[k].v[i] + (T(1) - beta1) * gi;
            state.v[k].v[i] = beta2 * state.v[k].v[i] + (T(1) - beta2) * gi * gi;
            const T mhat = state.m[k].v[i] / bc1;
            const T vhat = state.v[k].v[i] / bc2;
            p.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---- finite-difference verification ----

// builder(tape, leaf_ids) constructs the computation and returns the scalar
// loss node. Central differences with the given step are compared against the
// recorded gradients on `samples` coordinates per input; inputs whose forward
// pass lands within 10*step of an op kink are redrawn via input_gen.
template <typename T>
double grad_check(const std::function<int(Tape<T>&, const std::vector<int>&)>& builder,
                  const std::function<std::vector<Tensor<T>>(Rng&)>& input_gen,
                  double step = 1e-5, int samples = 20, std::uint64_t seed = 12345) {
    static_assert(std::is_same_v<T, double>, "grad_check requires 64-bit precision");
    Rng rng(seed);

    std::vector<Tensor<T>> inputs;
    for (int attempt = 0; attempt < 64; ++attempt) {
        inputs = input_gen(rng);
        Tape<T> probe;
        std::vector<int> ids;
        for (const auto& t : inputs) ids.push_back(probe.leaf(t, true));
        builder(probe, ids);
        if (probe.kink_margin() >= 10.0 * step) break;
        if (attempt == 63)
            throw NumericError("grad_check: could not sample inputs away from kinks");
    }

    Tape<T> tape;
    std::vector<int> ids;
    for (const auto& t : inputs) ids.push_back(tape.leaf(t, true));
    const int loss = builder(tape, ids);
    tape.backward(loss);

    auto eval = [&](const std::vector<Tensor<T>>& in) {
        Tape<T> t;
        std::vector<int> lids;
        for (const auto& x : in) lids.push_back(t.leaf(x, false));
        const int l = builder(t, lids);
        return static_cast<double>(t.value(l).v[0]);
    };

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t n = inputs[k].numel();
        const int draws = std::min<std::size_t>(samples, n);
        for (int s = 0; s < draws; ++s) {
            const std::size_t i =
                n == 1 ? 0 : static_cast<std::size_t>(rng.uniform_int(0, n - 1));
            std::vector<Tensor<T>> probe = inputs;
            const T orig = probe[k].v[i];
            probe[k].v[i] = orig + static_cast<T>(step);
            const double fp = eval(probe);
            probe[k].v[i] = orig - static_cast<T>(step);
            const double fm = eval(probe);
            const double fd = (fp - fm) / (2.0 * step);
            const double ad = static_cast<double>(tape.grad(ids[k]).v[i]);
            const double rel =
                std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace ect
