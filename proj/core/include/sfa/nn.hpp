#pragma once

// Convolution and batch-normalization ops plus thin parameterized layer
// wrappers. Convolutions use cross-correlation semantics on NCHW tensors.

#include <cstdint>
#include <optional>

#include "sfa/tensor.hpp"

namespace sfa {

struct ConvGeom {
    int in_c = 0, out_c = 0, k = 0, stride = 1, pad = 0, groups = 1;
    int out_extent(int in_extent) const { return (in_extent + 2 * pad - k) / stride + 1; }
};

namespace detail {

inline void check_conv_args(const Shape& xs, const Shape& ws, int stride, int pad, int groups) {
    if (xs.size() != 4) throw DimensionError("conv2d: input must be [N,C,H,W]");
    if (ws.size() != 4) throw DimensionError("conv2d: weight must be [Cout,Cin/g,K,K]");
    if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
    if (pad < 0) throw ParameterError("conv2d: padding must be >= 0");
    if (groups < 1) throw ParameterError("conv2d: groups must be >= 1");
    const int C = xs[1];
    if (C % groups != 0) throw ParameterError("conv2d: channels not divisible by groups");
    if (ws[1] != C / groups)
        throw DimensionError("conv2d: weight input channels disagree with x/groups");
    if (ws[0] % groups != 0) throw ParameterError("conv2d: out channels not divisible by groups");
    if (ws[2] != ws[3] || ws[2] % 2 == 0) throw ParameterError("conv2d: kernel must be square and odd");
    if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2])
        throw DimensionError("conv2d: kernel larger than padded input");
}

}  // namespace detail

// Grouped 2-D cross-correlation with optional bias and optional center gate.
// `center_active`, when given, holds one 0/1 flag per output position
// (Hout*Wout); outputs at gated-off centers are exactly zero and contribute
// no gradient.
template <class T>
TensorT<T> conv2d_gated(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                        int pad, int groups, const std::vector<std::uint8_t>* center_active) {
    detail::check_conv_args(x.shape(), w.shape(), stride, pad, groups);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), Cg = w.dim(1), K = w.dim(2);
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K) / stride + 1;
    const bool has_bias = b.defined() && b.numel() > 0;
    if (has_bias && b.numel() != Cout) throw DimensionError("conv2d: bias length mismatch");
    if (center_active && static_cast<int>(center_active->size()) != Ho * Wo)
        throw DimensionError("conv2d: center gate size mismatch");

    std::vector<std::shared_ptr<TensorNode<T>>> parents = {x.node(), w.node()};
    if (has_bias) parents.push_back(b.node());
    auto n = detail::make_node<T>({N, Cout, Ho, Wo}, std::move(parents));

    const int cpg_out = Cout / groups;  // out channels per group
    auto xi = [&](int nn, int c, int y, int xx) {
        return static_cast<std::size_t>(((nn * C + c) * H + y) * W + xx);
    };
    auto wi = [&](int co, int cg, int ky, int kx) {
        return static_cast<std::size_t>(((co * Cg + cg) * K + ky) * K + kx);
    };
    auto oi = [&](int nn, int co, int y, int xx) {
        return static_cast<std::size_t>(((nn * Cout + co) * Ho + y) * Wo + xx);
    };

    for (int nn = 0; nn < N; ++nn)
        for (int co = 0; co < Cout; ++co) {
            const int g = co / cpg_out;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    if (center_active && !(*center_active)[static_cast<std::size_t>(oy * Wo + ox)]) {
                        n->data[oi(nn, co, oy, ox)] = T(0);
                        continue;
                    }
                    double acc = has_bias ? static_cast<double>(b.data()[static_cast<std::size_t>(co)]) : 0.0;
                    for (int cg = 0; cg < Cg; ++cg) {
                        const int c = g * Cg + cg;
                        for (int ky = 0; ky < K; ++ky) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < K; ++kx) {
                                const int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += static_cast<double>(x.data()[xi(nn, c, iy, ix)]) *
                                       static_cast<double>(w.data()[wi(co, cg, ky, kx)]);
                            }
                        }
                    }
                    n->data[oi(nn, co, oy, ox)] = static_cast<T>(acc);
                }
        }

    std::vector<std::uint8_t> gate = center_active ? *center_active : std::vector<std::uint8_t>();
    n->backward = [N, C, H, W, Cout, Cg, K, Ho, Wo, stride, pad, cpg_out, has_bias,
                   gate](TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        TensorNode<T>* pb = has_bias ? self.parents[2].get() : nullptr;
        const bool need_x = px->requires_grad;
        const bool need_w = pw->requires_grad;
        const bool need_b = pb && pb->requires_grad;
        if (need_x) px->ensure_grad();
        if (need_w) pw->ensure_grad();
        if (need_b) pb->ensure_grad();
        if (!need_x && !need_w && !need_b) return;

        auto xi = [&](int nn, int c, int y, int xx) {
            return static_cast<std::size_t>(((nn * C + c) * H + y) * W + xx);
        };
        auto wi = [&](int co, int cg, int ky, int kx) {
            return static_cast<std::size_t>(((co * Cg + cg) * K + ky) * K + kx);
        };
        auto oi = [&](int nn, int co, int y, int xx) {
            return static_cast<std::size_t>(((nn * Cout + co) * Ho + y) * Wo + xx);
        };
        for (int nn = 0; nn < N; ++nn)
            for (int co = 0; co < Cout; ++co) {
                const int g = co / cpg_out;
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        if (!gate.empty() && !gate[static_cast<std::size_t>(oy * Wo + ox)]) continue;
                        const T go = self.grad[oi(nn, co, oy, ox)];
                        if (go == T(0)) continue;
                        if (need_b) pb->grad[static_cast<std::size_t>(co)] += go;
                        for (int cg = 0; cg < Cg; ++cg) {
                            const int c = g * Cg + cg;
                            for (int ky = 0; ky < K; ++ky) {
                                const int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= H) continue;
                                for (int kx = 0; kx < K; ++kx) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= W) continue;
                                    if (need_w)
                                        pw->grad[wi(co, cg, ky, kx)] += go * px->data[xi(nn, c, iy, ix)];
                                    if (need_x)
                                        px->grad[xi(nn, c, iy, ix)] += go * pw->data[wi(co, cg, ky, kx)];
                                }
                            }
                        }
                    }
            }
    };
    return TensorT<T>::wrap(n);
}

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride = 1,
                  int pad = 0, int groups = 1) {
    return conv2d_gated(x, w, b, stride, pad, groups, nullptr);
}

// ---------------------------------------------------------------------------
// Batch normalization (NCHW, per-channel)
// ---------------------------------------------------------------------------

// Training mode normalizes with batch statistics and updates the running
// estimates in place (unbiased variance, torch-style momentum). Eval mode is
// a fixed affine map from the running statistics.
//
// `active`, when given, is an H*W 0/1 map: statistics run over active
// positions only and the output at inactive positions is forced to zero.
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                       T momentum = static_cast<T>(0.1), T eps = static_cast<T>(1e-5),
                       const std::vector<std::uint8_t>* active = nullptr) {
    if (x.ndim() != 4) throw DimensionError("batchnorm2d: input must be [N,C,H,W]");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C)
        throw DimensionError("batchnorm2d: affine parameter length mismatch");
    if (static_cast<int>(running_mean.size()) != C || static_cast<int>(running_var.size()) != C)
        throw DimensionError("batchnorm2d: running stat length mismatch");
    if (active && static_cast<int>(active->size()) != H * W)
        throw DimensionError("batchnorm2d: active map size mismatch");

    auto n = detail::make_node<T>(x.shape(), {x.node(), gamma.node(), beta.node()});
    auto idx = [&](int nn, int c, int y, int xx) {
        return static_cast<std::size_t>(((nn * C + c) * H + y) * W + xx);
    };

    std::int64_t m_count = 0;
    if (active) {
        for (auto a : *active) m_count += a ? 1 : 0;
        m_count *= N;
    } else {
        m_count = static_cast<std::int64_t>(N) * H * W;
    }

    std::vector<double> mean(static_cast<std::size_t>(C), 0.0), var(static_cast<std::size_t>(C), 0.0);
    if (training && m_count > 0) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int nn = 0; nn < N; ++nn)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        if (active && !(*active)[static_cast<std::size_t>(y * W + xx)]) continue;
                        s += static_cast<double>(x.data()[idx(nn, c, y, xx)]);
                    }
            mean[static_cast<std::size_t>(c)] = s / static_cast<double>(m_count);
        }
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int nn = 0; nn < N; ++nn)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        if (active && !(*active)[static_cast<std::size_t>(y * W + xx)]) continue;
                        const double d =
                            static_cast<double>(x.data()[idx(nn, c, y, xx)]) - mean[static_cast<std::size_t>(c)];
                        s += d * d;
                    }
            var[static_cast<std::size_t>(c)] = s / static_cast<double>(m_count);
        }
        const double unbias = m_count > 1 ? static_cast<double>(m_count) / (m_count - 1) : 1.0;
        for (int c = 0; c < C; ++c) {
            running_mean[static_cast<std::size_t>(c)] = static_cast<T>(
                (1.0 - momentum) * static_cast<double>(running_mean[static_cast<std::size_t>(c)]) +
                momentum * mean[static_cast<std::size_t>(c)]);
            running_var[static_cast<std::size_t>(c)] = static_cast<T>(
                (1.0 - momentum) * static_cast<double>(running_var[static_cast<std::size_t>(c)]) +
                momentum * var[static_cast<std::size_t>(c)] * unbias);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = static_cast<double>(running_mean[static_cast<std::size_t>(c)]);
            var[static_cast<std::size_t>(c)] = static_cast<double>(running_var[static_cast<std::size_t>(c)]);
        }
    }

    std::vector<double> istd(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c)
        istd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + static_cast<double>(eps));

    for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    if (active && !(*active)[static_cast<std::size_t>(y * W + xx)]) {
                        n->data[idx(nn, c, y, xx)] = T(0);
                        continue;
                    }
                    const double xh = (static_cast<double>(x.data()[idx(nn, c, y, xx)]) -
                                       mean[static_cast<std::size_t>(c)]) *
                                      istd[static_cast<std::size_t>(c)];
                    n->data[idx(nn, c, y, xx)] =
                        static_cast<T>(xh * static_cast<double>(gamma.data()[static_cast<std::size_t>(c)]) +
                                       static_cast<double>(beta.data()[static_cast<std::size_t>(c)]));
                }

    std::vector<std::uint8_t> act = active ? *active : std::vector<std::uint8_t>();
    const bool use_batch_stats = training && m_count > 0;
    n->backward = [N, C, H, W, mean, istd, m_count, act, use_batch_stats](TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        auto idx = [&](int nn, int c, int y, int xx) {
            return static_cast<std::size_t>(((nn * C + c) * H + y) * W + xx);
        };
        auto on = [&](int y, int xx) {
            return act.empty() || act[static_cast<std::size_t>(y * W + xx)];
        };
        for (int c = 0; c < C; ++c) {
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int nn = 0; nn < N; ++nn)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        if (!on(y, xx)) continue;
                        const double gy = static_cast<double>(self.grad[idx(nn, c, y, xx)]);
                        const double xh = (static_cast<double>(px->data[idx(nn, c, y, xx)]) -
                                           mean[static_cast<std::size_t>(c)]) *
                                          istd[static_cast<std::size_t>(c)];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xh;
                    }
            if (pg->requires_grad) {
                pg->ensure_grad();
                pg->grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_gy_xhat);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                pb->grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_gy);
            }
            if (px->requires_grad) {
                px->ensure_grad();
                const double gval = static_cast<double>(pg->data[static_cast<std::size_t>(c)]);
                for (int nn = 0; nn < N; ++nn)
                    for (int y = 0; y < H; ++y)
                        for (int xx = 0; xx < W; ++xx) {
                            if (!on(y, xx)) continue;
                            const double gy = static_cast<double>(self.grad[idx(nn, c, y, xx)]);
                            if (use_batch_stats) {
                                const double xh = (static_cast<double>(px->data[idx(nn, c, y, xx)]) -
                                                   mean[static_cast<std::size_t>(c)]) *
                                                  istd[static_cast<std::size_t>(c)];
                                px->grad[idx(nn, c, y, xx)] += static_cast<T>(
                                    gval * istd[static_cast<std::size_t>(c)] *
                                    (gy - sum_gy / static_cast<double>(m_count) -
                                     xh * sum_gy_xhat / static_cast<double>(m_count)));
                            } else {
                                px->grad[idx(nn, c, y, xx)] +=
                                    static_cast<T>(gval * istd[static_cast<std::size_t>(c)] * gy);
                            }
                        }
            }
        }
    };
    return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Layout helpers
// ---------------------------------------------------------------------------

// [N, C, H, W] -> token layout [N, H*W, C].
template <class T>
TensorT<T> nchw_to_tokens(const TensorT<T>& x) {
    if (x.ndim() != 4) throw DimensionError("nchw_to_tokens: input must be [N,C,H,W]");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int L = H * W;
    auto n = detail::make_node<T>({N, L, C}, {x.node()});
    for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l)
                n->data[static_cast<std::size_t>((nn * L + l) * C + c)] =
                    x.data()[static_cast<std::size_t>((nn * C + c) * L + l)];
    n->backward = [N, C, L](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c)
                for (int l = 0; l < L; ++l)
                    p->grad[static_cast<std::size_t>((nn * C + c) * L + l)] +=
                        self.grad[static_cast<std::size_t>((nn * L + l) * C + c)];
    };
    return TensorT<T>::wrap(n);
}

// Token layout [N, H*W, C] -> [N, C, H, W].
template <class T>
TensorT<T> tokens_to_nchw(const TensorT<T>& x, int H, int W) {
    if (x.ndim() != 3) throw DimensionError("tokens_to_nchw: input must be [N,L,C]");
    const int N = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (L != H * W) throw DimensionError("tokens_to_nchw: token count mismatch");
    auto n = detail::make_node<T>({N, C, H, W}, {x.node()});
    for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l)
                n->data[static_cast<std::size_t>((nn * C + c) * L + l)] =
                    x.data()[static_cast<std::size_t>((nn * L + l) * C + c)];
    n->backward = [N, C, L](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c)
                for (int l = 0; l < L; ++l)
                    p->grad[static_cast<std::size_t>((nn * L + l) * C + c)] +=
                        self.grad[static_cast<std::size_t>((nn * C + c) * L + l)];
    };
    return TensorT<T>::wrap(n);
}

// Zero out whole token rows: x is [N, L, C], active has L entries.
template <class T>
TensorT<T> mask_tokens(const TensorT<T>& x, const std::vector<std::uint8_t>& active) {
    if (x.ndim() != 3) throw DimensionError("mask_tokens: input must be [N,L,C]");
    const int N = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (static_cast<int>(active.size()) != L)
        throw DimensionError("mask_tokens: active map length mismatch");
    auto n = detail::make_node<T>(x.shape(), {x.node()});
    for (int nn = 0; nn < N; ++nn)
        for (int l = 0; l < L; ++l) {
            const bool on = active[static_cast<std::size_t>(l)];
            for (int c = 0; c < C; ++c)
                n->data[static_cast<std::size_t>((nn * L + l) * C + c)] =
                    on ? x.data()[static_cast<std::size_t>((nn * L + l) * C + c)] : T(0);
        }
    std::vector<std::uint8_t> act = active;
    n->backward = [N, L, C, act](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int nn = 0; nn < N; ++nn)
            for (int l = 0; l < L; ++l) {
                if (!act[static_cast<std::size_t>(l)]) continue;
                for (int c = 0; c < C; ++c)
                    p->grad[static_cast<std::size_t>((nn * L + l) * C + c)] +=
                        self.grad[static_cast<std::size_t>((nn * L + l) * C + c)];
            }
    };
    return TensorT<T>::wrap(n);
}

// Global average pool [N, C, H, W] -> [N, C].
template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    if (x.ndim() != 4) throw DimensionError("global_avg_pool: input must be [N,C,H,W]");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    auto n = detail::make_node<T>({N, C}, {x.node()});
    for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int i = 0; i < HW; ++i)
                acc += static_cast<double>(
                    x.data()[static_cast<std::size_t>((nn * C + c) * HW + i)]);
            n->data[static_cast<std::size_t>(nn * C + c)] = static_cast<T>(acc / HW);
        }
    n->backward = [N, C, HW](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c) {
                const T g = self.grad[static_cast<std::size_t>(nn * C + c)] / static_cast<T>(HW);
                for (int i = 0; i < HW; ++i)
                    p->grad[static_cast<std::size_t>((nn * C + c) * HW + i)] += g;
            }
    };
    return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Parameterized layers (float instantiation used by the model code)
// ---------------------------------------------------------------------------

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1, pad = 0, groups = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int in_c, int out_c, int k, int stride_, int pad_, int groups_, std::mt19937& rng)
        : stride(stride_), pad(pad_), groups(groups_) {
        const int fan_in = (in_c / groups_) * k * k;
        const Real std = static_cast<Real>(std::sqrt(2.0 / fan_in));
        w = Tensor::randn({out_c, in_c / groups_, k, k}, rng, std);
        w.set_requires_grad(true);
        b = Tensor::zeros({out_c});
        b.set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad, groups); }
    Tensor forward_masked(const Tensor& x, const std::vector<std::uint8_t>* center_active) const {
        return conv2d_gated(x, w, b, stride, pad, groups, center_active);
    }
    ConvGeom geom() const {
        return {w.dim(1) * groups, w.dim(0), w.dim(2), stride, pad, groups};
    }
};

struct LinearLayer {
    Tensor w, b;  // w is [in, out]

    LinearLayer() = default;
    LinearLayer(int in_f, int out_f, std::mt19937& rng) {
        const Real std = static_cast<Real>(std::sqrt(2.0 / in_f));
        w = Tensor::randn({in_f, out_f}, rng, std);
        w.set_requires_grad(true);
        b = Tensor::zeros({out_f});
        b.set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const { return bias_add_rows(matmul(x, w), b); }
};

struct BatchNormLayer {
    Tensor gamma, beta;
    std::vector<Real> running_mean, running_var;
    Real momentum = static_cast<Real>(0.1);
    Real eps = static_cast<Real>(1e-5);

    BatchNormLayer() = default;
    explicit BatchNormLayer(int c) {
        gamma = Tensor::ones({c});
        gamma.set_requires_grad(true);
        beta = Tensor::zeros({c});
        beta.set_requires_grad(true);
        running_mean.assign(static_cast<std::size_t>(c), Real(0));
        running_var.assign(static_cast<std::size_t>(c), Real(1));
    }

    Tensor forward(const Tensor& x, bool training,
                   const std::vector<std::uint8_t>* active = nullptr) {
        return batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps,
                           active);
    }

    // Token layout [M, C] runs through the same channel statistics by viewing
    // rows as batch entries of a 1x1 spatial map.
    Tensor forward_tokens(const Tensor& x, bool training) {
        Tensor x4 = reshape(x, {x.dim(0), x.dim(1), 1, 1});
        Tensor y = batchnorm2d(x4, gamma, beta, running_mean, running_var, training, momentum, eps);
        return reshape(y, x.shape());
    }
};

}  // namespace sfa
