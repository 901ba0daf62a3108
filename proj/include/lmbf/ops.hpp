#pragma once

// Neural-net operations on NCHW tensors: standard/grouped/depth-wise and
// transposed convolution, batch normalization, ReLU, GELU, max pooling,
// global average pooling, and channel softmax. Every op registers a backward
// rule on the tape; all rules are exercised by finite-difference checks in
// the test suite.
//
// Convolutions run as im2col + a per-group GEMM (Eigen). 1x1/stride-1
// convolutions skip the column buffer and map the input slab directly.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lmbf/tensor.hpp"

namespace lmbf {

// ---------------------------------------------------------------------------
// Parameter structs
// ---------------------------------------------------------------------------

// Weight layout [out_ch, in_ch/groups, k, k] for conv2d; for
// transpose_conv2d the same struct is read as [in_ch, out_ch/groups, k, k].
template <typename T>
struct ConvParams {
    Tensor<T> weight;
    Tensor<T> bias;
    int64_t stride = 1;
    int64_t padding = 0;
    int64_t groups = 1;

    static ConvParams make(int64_t in_ch, int64_t out_ch, int64_t k,
                           int64_t stride = 1, int64_t padding = 0, int64_t groups = 1) {
        if (in_ch < 1 || out_ch < 1 || k < 1 || stride < 1 || padding < 0 || groups < 1)
            throw config_error("conv: non-positive dimension in configuration");
        if (in_ch % groups != 0 || out_ch % groups != 0)
            throw config_error("conv: channels " + std::to_string(in_ch) + "->" + std::to_string(out_ch) +
                               " not divisible by groups " + std::to_string(groups));
        ConvParams p;
        p.weight = Tensor<T>::zeros({out_ch, in_ch / groups, k, k});
        p.bias = Tensor<T>::zeros({out_ch});
        p.stride = stride;
        p.padding = padding;
        p.groups = groups;
        return p;
    }

    // Transposed-convolution layout: weight [in_ch, out_ch/groups, k, k].
    static ConvParams make_transpose(int64_t in_ch, int64_t out_ch, int64_t k,
                                     int64_t stride = 2, int64_t padding = 0, int64_t groups = 1) {
        ConvParams p = make(out_ch, in_ch, k, stride, padding, groups);
        p.bias = Tensor<T>::zeros({out_ch});
        return p;
    }

    int64_t kernel() const { return weight.dim(2); }
};

template <typename T>
struct BatchNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
    // Active running-statistic handles; batchnorm reads and updates these.
    // They share storage with one entry of the per-pass sets below.
    Tensor<T> running_mean;
    Tensor<T> running_var;
    // One running-statistic set per forward pass. A layer that is evaluated
    // several times per forward (multi-pass networks) sees a different
    // activation distribution each time, so eval-mode normalization needs a
    // separate estimate per pass; set_pass selects the active one.
    std::vector<Tensor<T>> mean_passes;
    std::vector<Tensor<T>> var_passes;
    T eps = T(1e-5);
    T momentum = T(0.1);
    bool training = true;

    static BatchNormParams make(int64_t channels, int64_t passes = 1) {
        if (channels < 1) throw config_error("batchnorm: channels must be >= 1");
        if (passes < 1) throw config_error("batchnorm: passes must be >= 1");
        BatchNormParams p;
        p.gamma = Tensor<T>::ones({channels});
        p.beta = Tensor<T>::zeros({channels});
        for (int64_t k = 0; k < passes; ++k) {
            p.mean_passes.push_back(Tensor<T>::zeros({channels}));
            p.var_passes.push_back(Tensor<T>::ones({channels}));
        }
        p.set_pass(0);
        return p;
    }

    void set_pass(int64_t k) {
        if (mean_passes.empty()) return; // handles are standalone
        k = std::clamp<int64_t>(k, 0, static_cast<int64_t>(mean_passes.size()) - 1);
        running_mean = mean_passes[static_cast<size_t>(k)];
        running_var = var_passes[static_cast<size_t>(k)];
    }

    int64_t passes() const { return mean_passes.empty() ? 1 : static_cast<int64_t>(mean_passes.size()); }
    int64_t channels() const { return gamma.dim(0); }
};

// ---------------------------------------------------------------------------
// Convolution kernels (raw buffers)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;

struct ConvGeom {
    int64_t N, Cin, H, W;      // input
    int64_t Cout, k, stride, pad, groups;
    int64_t OH, OW;            // output
    int64_t icpg, ocpg;        // channels per group

    bool unit_kernel() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeom conv_geometry(const Shape& x, const Shape& w, int64_t stride, int64_t pad,
                              int64_t groups) {
    if (x.size() != 4) throw shape_error("conv: input must be NCHW, got " + shape_str(x));
    if (w.size() != 4) throw shape_error("conv: weight must be 4-D, got " + shape_str(w));
    ConvGeom g;
    g.N = x[0]; g.Cin = x[1]; g.H = x[2]; g.W = x[3];
    g.Cout = w[0]; g.k = w[2]; g.stride = stride; g.pad = pad; g.groups = groups;
    if (w[2] != w[3]) throw shape_error("conv: only square kernels are supported");
    if (groups < 1 || g.Cout % groups != 0)
        throw config_error("conv: out channels " + std::to_string(g.Cout) +
                           " not divisible by groups " + std::to_string(groups));
    if (g.Cin != w[1] * groups)
        throw config_error("conv: input channels " + std::to_string(g.Cin) + " incompatible with weight " +
                           shape_str(w) + " at groups " + std::to_string(groups));
    if (g.k > g.H + 2 * pad || g.k > g.W + 2 * pad)
        throw shape_error("conv: kernel " + std::to_string(g.k) + " larger than padded input " +
                          std::to_string(g.H + 2 * pad) + "x" + std::to_string(g.W + 2 * pad));
    g.OH = (g.H + 2 * pad - g.k) / stride + 1;
    g.OW = (g.W + 2 * pad - g.k) / stride + 1;
    g.icpg = g.Cin / groups;
    g.ocpg = g.Cout / groups;
    return g;
}

// Column layout: row (ic*k + ky)*k + kx, column oy*OW + ox.
template <typename T>
inline void im2col(const T* x, const ConvGeom& g, int64_t n, int64_t group, T* col) {
    const int64_t c0 = group * g.icpg;
    for (int64_t ic = 0; ic < g.icpg; ++ic) {
        const T* xc = x + ((n * g.Cin + c0 + ic) * g.H) * g.W;
        for (int64_t ky = 0; ky < g.k; ++ky) {
            for (int64_t kx = 0; kx < g.k; ++kx) {
                T* row = col + (((ic * g.k + ky) * g.k + kx) * g.OH) * g.OW;
                for (int64_t oy = 0; oy < g.OH; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.H) {
                        std::fill(row, row + g.OW, T(0));
                        row += g.OW;
                        continue;
                    }
                    const T* xrow = xc + iy * g.W;
                    for (int64_t ox = 0; ox < g.OW; ++ox) {
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        row[ox] = (ix < 0 || ix >= g.W) ? T(0) : xrow[ix];
                    }
                    row += g.OW;
                }
            }
        }
    }
}

// Scatter-add of a column buffer back onto the (n, group) input slab.
template <typename T>
inline void col2im_accum(const T* col, const ConvGeom& g, int64_t n, int64_t group, T* x) {
    const int64_t c0 = group * g.icpg;
    for (int64_t ic = 0; ic < g.icpg; ++ic) {
        T* xc = x + ((n * g.Cin + c0 + ic) * g.H) * g.W;
        for (int64_t ky = 0; ky < g.k; ++ky) {
            for (int64_t kx = 0; kx < g.k; ++kx) {
                const T* row = col + (((ic * g.k + ky) * g.k + kx) * g.OH) * g.OW;
                for (int64_t oy = 0; oy < g.OH; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy >= 0 && iy < g.H) {
                        T* xrow = xc + iy * g.W;
                        for (int64_t ox = 0; ox < g.OW; ++ox) {
                            const int64_t ix = ox * g.stride - g.pad + kx;
                            if (ix >= 0 && ix < g.W) xrow[ix] += row[ox];
                        }
                    }
                    row += g.OW;
                }
            }
        }
    }
}

// y[n, Cout, OH, OW] = W * im2col(x) (+ bias later).
template <typename T>
inline void conv_fwd(const T* x, const T* w, const ConvGeom& g, T* y) {
    const int64_t kk = g.icpg * g.k * g.k;
    const int64_t ohw = g.OH * g.OW;
    std::vector<T> col;
    if (!g.unit_kernel()) col.resize(static_cast<size_t>(kk * ohw));
    for (int64_t n = 0; n < g.N; ++n) {
        for (int64_t gr = 0; gr < g.groups; ++gr) {
            MapCM<T> Wg(w + gr * g.ocpg * kk, g.ocpg, kk);
            MapM<T> Yg(y + ((n * g.Cout + gr * g.ocpg) * g.OH) * g.OW, g.ocpg, ohw);
            if (g.unit_kernel()) {
                MapCM<T> Xg(x + ((n * g.Cin + gr * g.icpg) * g.H) * g.W, g.icpg, ohw);
                Yg.noalias() = Wg * Xg;
            } else {
                im2col(x, g, n, gr, col.data());
                MapCM<T> Col(col.data(), kk, ohw);
                Yg.noalias() = Wg * Col;
            }
        }
    }
}

// dx += W^T * dy (adjoint of conv_fwd).
template <typename T>
inline void conv_bwd_data(const T* dy, const T* w, const ConvGeom& g, T* dx) {
    const int64_t kk = g.icpg * g.k * g.k;
    const int64_t ohw = g.OH * g.OW;
    std::vector<T> col;
    if (!g.unit_kernel()) col.resize(static_cast<size_t>(kk * ohw));
    for (int64_t n = 0; n < g.N; ++n) {
        for (int64_t gr = 0; gr < g.groups; ++gr) {
            MapCM<T> Wg(w + gr * g.ocpg * kk, g.ocpg, kk);
            MapCM<T> dYg(dy + ((n * g.Cout + gr * g.ocpg) * g.OH) * g.OW, g.ocpg, ohw);
            if (g.unit_kernel()) {
                MapM<T> dXg(dx + ((n * g.Cin + gr * g.icpg) * g.H) * g.W, g.icpg, ohw);
                dXg.noalias() += Wg.transpose() * dYg;
            } else {
                MapM<T> Col(col.data(), kk, ohw);
                Col.noalias() = Wg.transpose() * dYg;
                col2im_accum(col.data(), g, n, gr, dx);
            }
        }
    }
}

// dw += dy * im2col(x)^T.
template <typename T>
inline void conv_bwd_weight(const T* x, const T* dy, const ConvGeom& g, T* dw) {
    const int64_t kk = g.icpg * g.k * g.k;
    const int64_t ohw = g.OH * g.OW;
    std::vector<T> col;
    if (!g.unit_kernel()) col.resize(static_cast<size_t>(kk * ohw));
    for (int64_t n = 0; n < g.N; ++n) {
        for (int64_t gr = 0; gr < g.groups; ++gr) {
            MapM<T> dWg(dw + gr * g.ocpg * kk, g.ocpg, kk);
            MapCM<T> dYg(dy + ((n * g.Cout + gr * g.ocpg) * g.OH) * g.OW, g.ocpg, ohw);
            if (g.unit_kernel()) {
                MapCM<T> Xg(x + ((n * g.Cin + gr * g.icpg) * g.H) * g.W, g.icpg, ohw);
                dWg.noalias() += dYg * Xg.transpose();
            } else {
                im2col(x, g, n, gr, col.data());
                MapCM<T> Col(col.data(), kk, ohw);
                dWg.noalias() += dYg * Col.transpose();
            }
        }
    }
}

template <typename T>
inline void conv_bwd_bias(const T* dy, int64_t N, int64_t C, int64_t HW, T* db) {
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* p = dy + (n * C + c) * HW;
            T acc = T(0);
            for (int64_t i = 0; i < HW; ++i) acc += p[i];
            db[c] += acc;
        }
}

template <typename T>
inline void add_channel_bias(T* y, const T* b, int64_t N, int64_t C, int64_t HW) {
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            T* p = y + (n * C + c) * HW;
            const T v = b[c];
            for (int64_t i = 0; i < HW; ++i) p[i] += v;
        }
}

} // namespace detail

// ---------------------------------------------------------------------------
// conv2d / grouped_conv2d
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
    const auto g = detail::conv_geometry(x.shape(), p.weight.shape(), p.stride, p.padding, p.groups);
    if (p.bias.numel() != g.Cout)
        throw config_error("conv: bias size " + std::to_string(p.bias.numel()) +
                           " does not match out channels " + std::to_string(g.Cout));
    Tensor<T> y = Tensor<T>::zeros({g.N, g.Cout, g.OH, g.OW});
    detail::conv_fwd(x.ptr(), p.weight.ptr(), g, y.ptr());
    detail::add_channel_bias(y.ptr(), p.bias.ptr(), g.N, g.Cout, g.OH * g.OW);

    Tensor<T> w = p.weight, b = p.bias;
    detail::maybe_record<T>("conv2d", {x, w, b}, y, [x, w, b, y, g](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        if (x.requires_grad())
            detail::conv_bwd_data(gy.data(), w.ptr(), g, gb.of(x).data());
        if (w.requires_grad())
            detail::conv_bwd_weight(x.ptr(), gy.data(), g, gb.of(w).data());
        if (b.requires_grad())
            detail::conv_bwd_bias(gy.data(), g.N, g.Cout, g.OH * g.OW, gb.of(b).data());
    });
    return y;
}

// Same operation; the name documents intent at call sites that rely on
// group separation (Eq.-style cascades).
template <typename T>
inline Tensor<T> grouped_conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
    if (p.groups < 2) throw config_error("grouped_conv2d: groups must be > 1");
    return conv2d(x, p);
}

// ---------------------------------------------------------------------------
// transpose_conv2d — the adjoint map of conv2d with the same weights, so
// d/dx transpose_conv2d(x, W) is exactly conv2d(., W).
// Weight layout [in_ch, out_ch/groups, k, k]; output spatial size
// stride*(H-1) + k - 2*pad.
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> transpose_conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
    const Shape& xs = x.shape();
    const Shape& ws = p.weight.shape();
    if (xs.size() != 4) throw shape_error("transpose_conv2d: input must be NCHW");
    if (xs[1] != ws[0])
        throw config_error("transpose_conv2d: input channels " + std::to_string(xs[1]) +
                           " do not match weight " + shape_str(ws));
    const int64_t out_ch = ws[1] * p.groups;
    const int64_t OH = p.stride * (xs[2] - 1) + ws[2] - 2 * p.padding;
    const int64_t OW = p.stride * (xs[3] - 1) + ws[3] - 2 * p.padding;
    if (OH < 1 || OW < 1) throw shape_error("transpose_conv2d: empty output");
    if (p.bias.numel() != out_ch)
        throw config_error("transpose_conv2d: bias size does not match out channels");

    // The underlying conv maps [N, out_ch, OH, OW] -> [N, in_ch, H, W].
    const auto g = detail::conv_geometry({xs[0], out_ch, OH, OW}, ws, p.stride, p.padding, p.groups);
    if (g.OH != xs[2] || g.OW != xs[3])
        throw shape_error("transpose_conv2d: geometry does not invert to the input size");

    Tensor<T> y = Tensor<T>::zeros({xs[0], out_ch, OH, OW});
    detail::conv_bwd_data(x.ptr(), p.weight.ptr(), g, y.ptr());
    detail::add_channel_bias(y.ptr(), p.bias.ptr(), xs[0], out_ch, OH * OW);

    Tensor<T> w = p.weight, b = p.bias;
    detail::maybe_record<T>("transpose_conv2d", {x, w, b}, y, [x, w, b, y, g](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        if (x.requires_grad()) {
            // conv_fwd writes its result, so run it on scratch and accumulate:
            // x may have picked up gradient from other consumers already.
            auto& gx = gb.of(x);
            std::vector<T> tmp(gx.size(), T(0));
            detail::conv_fwd(gy.data(), w.ptr(), g, tmp.data());
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
        }
        if (w.requires_grad())
            detail::conv_bwd_weight(gy.data(), x.ptr(), g, gb.of(w).data());
        if (b.requires_grad())
            detail::conv_bwd_bias(gy.data(), y.dim(0), y.dim(1), y.dim(2) * y.dim(3), gb.of(b).data());
    });
    return y;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw shape_error("batchnorm: input must be NCHW");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    if (C != p.channels())
        throw config_error("batchnorm: " + std::to_string(C) + " channels vs params " +
                           std::to_string(p.channels()));
    if (p.eps <= T(0)) throw config_error("batchnorm: eps must be positive");
    const int64_t HW = H * W;
    const int64_t M = N * HW;

    Tensor<T> y = Tensor<T>::zeros(s);
    std::vector<T> invstd(C), mean(C);
    // xhat is needed by the backward rule and by dgamma.
    auto xhat = std::make_shared<std::vector<T>>(x.data().size());

    if (p.training) {
        if (M < 2)
            throw contract_error("batchnorm: degenerate statistics (batch*H*W = " +
                                 std::to_string(M) + " < 2 in training mode)");
        for (int64_t c = 0; c < C; ++c) {
            T m = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* px = x.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) m += px[i];
            }
            m /= T(M);
            T var = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* px = x.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const T d = px[i] - m;
                    var += d * d;
                }
            }
            var /= T(M);
            mean[c] = m;
            invstd[c] = T(1) / std::sqrt(var + p.eps);
            // Unbiased variance feeds the running estimate.
            const T var_unbiased = var * T(M) / T(M - 1);
            p.running_mean.data()[c] = (T(1) - p.momentum) * p.running_mean.data()[c] + p.momentum * m;
            p.running_var.data()[c] = (T(1) - p.momentum) * p.running_var.data()[c] + p.momentum * var_unbiased;
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            if (p.running_var.data()[c] < T(0))
                throw contract_error("batchnorm: negative running variance");
            mean[c] = p.running_mean.data()[c];
            invstd[c] = T(1) / std::sqrt(p.running_var.data()[c] + p.eps);
        }
    }

    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* px = x.ptr() + (n * C + c) * HW;
            T* ph = xhat->data() + (n * C + c) * HW;
            T* py = y.ptr() + (n * C + c) * HW;
            const T m = mean[c], is = invstd[c];
            const T gm = p.gamma.data()[c], bt = p.beta.data()[c];
            for (int64_t i = 0; i < HW; ++i) {
                ph[i] = (px[i] - m) * is;
                py[i] = gm * ph[i] + bt;
            }
        }

    Tensor<T> gamma = p.gamma, beta = p.beta;
    const bool training = p.training;
    detail::maybe_record<T>("batchnorm", {x, gamma, beta}, y,
        [x, gamma, beta, y, xhat, invstd, N, C, HW, M, training](GradBuffers<T>& gb) {
            const auto& gy = gb.of(y);
            if (gamma.requires_grad()) {
                auto& gg = gb.of(gamma);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* pg = gy.data() + (n * C + c) * HW;
                        const T* ph = xhat->data() + (n * C + c) * HW;
                        T acc = T(0);
                        for (int64_t i = 0; i < HW; ++i) acc += pg[i] * ph[i];
                        gg[c] += acc;
                    }
            }
            if (beta.requires_grad()) {
                auto& gbta = gb.of(beta);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* pg = gy.data() + (n * C + c) * HW;
                        T acc = T(0);
                        for (int64_t i = 0; i < HW; ++i) acc += pg[i];
                        gbta[c] += acc;
                    }
            }
            if (!x.requires_grad()) return;
            auto& gx = gb.of(x);
            if (!training) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t off = (n * C + c) * HW;
                        const T f = gamma.data()[c] * invstd[c];
                        for (int64_t i = 0; i < HW; ++i) gx[off + i] += gy[off + i] * f;
                    }
                return;
            }
            // Training mode: the batch statistics depend on x.
            // dx = gamma*invstd/M * (M*dy - sum(dy) - xhat * sum(dy*xhat))
            std::vector<T> sum_dy(C, T(0)), sum_dyh(C, T(0));
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t off = (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        sum_dy[c] += gy[off + i];
                        sum_dyh[c] += gy[off + i] * (*xhat)[off + i];
                    }
                }
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t off = (n * C + c) * HW;
                    const T f = gamma.data()[c] * invstd[c] / T(M);
                    for (int64_t i = 0; i < HW; ++i)
                        gx[off + i] += f * (T(M) * gy[off + i] - sum_dy[c] - (*xhat)[off + i] * sum_dyh[c]);
                }
        });
    return y;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* py = y.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = px[i] > T(0) ? px[i] : T(0);
    detail::maybe_record<T>("relu", {x}, y, [x, y](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        auto& gx = gb.of(x);
        const T* px = x.ptr();
        for (size_t i = 0; i < gx.size(); ++i)
            if (px[i] > T(0)) gx[i] += gy[i];
    });
    return y;
}

namespace detail {
// 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
template <typename T>
inline T gelu_value(T x) {
    const T c = T(0.7978845608028654); // sqrt(2/pi)
    const T u = c * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}
template <typename T>
inline T gelu_grad(T x) {
    const T c = T(0.7978845608028654);
    const T u = c * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(u);
    const T sech2 = T(1) - t * t;
    const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * sech2 * du;
}
} // namespace detail

template <typename T>
inline Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* py = y.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = detail::gelu_value(px[i]);
    detail::maybe_record<T>("gelu", {x}, y, [x, y](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        auto& gx = gb.of(x);
        const T* px = x.ptr();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * detail::gelu_grad(px[i]);
    });
    return y;
}

template <typename T>
inline Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* py = y.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) py[i] = T(1) / (T(1) + std::exp(-px[i]));
    detail::maybe_record<T>("sigmoid", {x}, y, [x, y](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        auto& gx = gb.of(x);
        const T* py = y.ptr();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * py[i] * (T(1) - py[i]);
    });
    return y;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// 2x2 window, stride 2. Gradient routes to the argmax; ties go to the first
// element in scan order.
template <typename T>
inline Tensor<T> maxpool2d(const Tensor<T>& x, int64_t window = 2, int64_t stride = 2) {
    if (window != 2 || stride != 2)
        throw config_error("maxpool2d: only window 2 / stride 2 is supported");
    const Shape& s = x.shape();
    if (s.size() != 4) throw shape_error("maxpool2d: input must be NCHW");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw shape_error("maxpool2d: odd spatial extent " + std::to_string(H) + "x" + std::to_string(W));
    const int64_t OH = H / 2, OW = W / 2;
    Tensor<T> y = Tensor<T>::zeros({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OH * OW));
    const T* px = x.ptr();
    T* py = y.ptr();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* plane = px + nc * H * W;
        T* out = py + nc * OH * OW;
        int64_t* am = argmax->data() + nc * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                int64_t best = (2 * oy) * W + 2 * ox;
                T bv = plane[best];
                const int64_t cands[3] = {(2 * oy) * W + 2 * ox + 1,
                                          (2 * oy + 1) * W + 2 * ox,
                                          (2 * oy + 1) * W + 2 * ox + 1};
                for (int64_t idx : cands)
                    if (plane[idx] > bv) { bv = plane[idx]; best = idx; }
                out[oy * OW + ox] = bv;
                am[oy * OW + ox] = nc * H * W + best;
            }
    }
    detail::maybe_record<T>("maxpool2d", {x}, y, [x, y, argmax](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        auto& gx = gb.of(x);
        for (size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
    });
    return y;
}

// Spatial mean per channel -> [N, C, 1, 1].
template <typename T>
inline Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw shape_error("global_avg_pool: input must be NCHW");
    const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    Tensor<T> y = Tensor<T>::zeros({N, C, 1, 1});
    const T* px = x.ptr();
    T* py = y.ptr();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        T acc = T(0);
        const T* p = px + nc * HW;
        for (int64_t i = 0; i < HW; ++i) acc += p[i];
        py[nc] = acc / T(HW);
    }
    detail::maybe_record<T>("global_avg_pool", {x}, y, [x, y, HW](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        auto& gx = gb.of(x);
        for (size_t nc = 0; nc < gy.size(); ++nc) {
            const T g = gy[nc] / T(HW);
            T* p = gx.data() + nc * HW;
            for (int64_t i = 0; i < HW; ++i) p[i] += g;
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Channel softmax (per pixel), stabilized by max subtraction.
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> softmax_channels(const Tensor<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw shape_error("softmax_channels: input must be NCHW");
    const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    Tensor<T> y = Tensor<T>::zeros(s);
    const T* px = x.ptr();
    T* py = y.ptr();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < HW; ++i) {
            T mx = px[(n * C) * HW + i];
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, px[(n * C + c) * HW + i]);
            T denom = T(0);
            for (int64_t c = 0; c < C; ++c) {
                const T e = std::exp(px[(n * C + c) * HW + i] - mx);
                py[(n * C + c) * HW + i] = e;
                denom += e;
            }
            for (int64_t c = 0; c < C; ++c) py[(n * C + c) * HW + i] /= denom;
        }
    detail::maybe_record<T>("softmax_channels", {x}, y, [x, y, N, C, HW](GradBuffers<T>& gb) {
        const auto& gy = gb.of(y);
        auto& gx = gb.of(x);
        const T* py = y.ptr();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) {
                T dot = T(0);
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t k = (n * C + c) * HW + i;
                    dot += gy[k] * py[k];
                }
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t k = (n * C + c) * HW + i;
                    gx[k] += py[k] * (gy[k] - dot);
                }
            }
    });
    return y;
}

// Learnable parameter count of one conv: out*(in/groups)*k^2 + out.
template <typename T>
inline int64_t conv_param_count(const ConvParams<T>& p) {
    return p.weight.numel() + p.bias.numel();
}

} // namespace lmbf
