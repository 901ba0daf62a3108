#pragma once

// The segmentation network: multipath residual blocks (three cascaded
// residual stages summing 1x1/3x3/5x5 branches), a focal-modulation
// attention block (hierarchical depth-wise contexts, gated aggregation,
// query modulation), and the bidirectional encoder-decoder assembly with
// three pool/upsample stages, additive skips, and weight-shared reverse
// refinement passes. Also: deterministic He initialization, exact parameter
// enumeration, and the ablation configuration ladder.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lmbf/ops.hpp"

namespace lmbf {

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct MRBConfig {
    int64_t channels = 0;                 // set per stage by the builder
    std::vector<int64_t> kernel_set{1, 3, 5};
    int64_t groups = 4;                   // grouped cascades
};

inline void validate(const MRBConfig& c) {
    if (c.channels < 1) throw config_error("mrb: channels must be positive");
    if (c.groups < 1 || c.channels % c.groups != 0)
        throw config_error("mrb: channels " + std::to_string(c.channels) +
                           " not divisible by groups " + std::to_string(c.groups));
    if (c.kernel_set.empty()) throw config_error("mrb: kernel_set must be non-empty");
    for (int64_t k : c.kernel_set)
        if (k < 1 || k % 2 == 0) throw config_error("mrb: kernels must be odd, got " + std::to_string(k));
}

struct FMABConfig {
    int64_t channels = 0;
    int64_t focal_levels = 2;
    std::vector<int64_t> level_kernels{3, 5};
    bool include_global = true;

    int64_t gate_count() const { return focal_levels + (include_global ? 1 : 0); }
};

inline void validate(const FMABConfig& c) {
    if (c.channels < 1) throw config_error("fmab: channels must be positive");
    if (c.focal_levels < 1) throw config_error("fmab: focal_levels must be positive");
    if (static_cast<int64_t>(c.level_kernels.size()) != c.focal_levels)
        throw config_error("fmab: " + std::to_string(c.level_kernels.size()) + " level kernels for " +
                           std::to_string(c.focal_levels) + " focal levels");
    for (int64_t k : c.level_kernels)
        if (k < 1 || k % 2 == 0) throw config_error("fmab: level kernels must be odd");
}

enum class AblationId { BRP, BRP_MRB13, BRP_MRB135, BRP_MRB135_P64, BRP_MRB135_P128, FULL };

inline std::string to_string(AblationId id) {
    switch (id) {
        case AblationId::BRP: return "BRP";
        case AblationId::BRP_MRB13: return "BRP_MRB13";
        case AblationId::BRP_MRB135: return "BRP_MRB135";
        case AblationId::BRP_MRB135_P64: return "BRP_MRB135_P64";
        case AblationId::BRP_MRB135_P128: return "BRP_MRB135_P128";
        case AblationId::FULL: return "FULL";
    }
    throw config_error("unknown ablation id");
}

inline AblationId parse_ablation(const std::string& s) {
    for (AblationId id : {AblationId::BRP, AblationId::BRP_MRB13, AblationId::BRP_MRB135,
                          AblationId::BRP_MRB135_P64, AblationId::BRP_MRB135_P128, AblationId::FULL})
        if (to_string(id) == s) return id;
    throw config_error("unknown ablation id '" + s + "'");
}

struct NetworkConfig {
    std::array<int64_t, 3> input_size{256, 256, 3}; // nominal full-resolution H, W, channels
    int64_t stem_channels = 8;
    std::array<int64_t, 3> stage_channels{16, 32, 32};
    MRBConfig mrb;                // kernel_set/groups template; channels filled per stage
    bool use_mrb = true;          // false: plain 3x3 conv stage blocks (the BRP baseline)
    bool use_fmab = true;
    int64_t reverse_passes = 1;
    int64_t num_classes = 2;
    AblationId ablation_id = AblationId::FULL;
    int64_t patch_size = 128;     // consumed by the data pipeline, not the graph

    int64_t in_channels() const { return input_size[2]; }
};

inline void validate(const NetworkConfig& c) {
    if (c.input_size[0] < 8 || c.input_size[1] < 8 || c.input_size[0] % 8 != 0 || c.input_size[1] % 8 != 0)
        throw config_error("network: nominal input extents must be positive multiples of 8");
    if (c.in_channels() < 1 || c.stem_channels < 1) throw config_error("network: channels must be positive");
    for (int64_t s : c.stage_channels)
        if (s < 1) throw config_error("network: invalid stage channel list");
    if (c.num_classes < 2) throw config_error("network: need at least 2 classes for the softmax head");
    if (c.reverse_passes < 0) throw config_error("network: reverse_passes must be >= 0");
    if (c.use_mrb)
        for (int64_t s : c.stage_channels) {
            MRBConfig m = c.mrb;
            m.channels = s;
            validate(m);
        }
}

// Table-style ablation ladder: a plain residual-free baseline, MRBs with
// growing kernel sets, and the full network with the attention block.
inline NetworkConfig make_ablation(AblationId id) {
    NetworkConfig c;
    c.ablation_id = id;
    switch (id) {
        case AblationId::BRP:
            c.use_mrb = false;
            c.use_fmab = false;
            break;
        case AblationId::BRP_MRB13:
            c.mrb.kernel_set = {1, 3};
            c.use_fmab = false;
            break;
        case AblationId::BRP_MRB135:
            c.mrb.kernel_set = {1, 3, 5};
            c.use_fmab = false;
            break;
        case AblationId::BRP_MRB135_P64:
            c.mrb.kernel_set = {1, 3, 5};
            c.use_fmab = false;
            c.patch_size = 64;
            break;
        case AblationId::BRP_MRB135_P128:
            c.mrb.kernel_set = {1, 3, 5};
            c.use_fmab = false;
            c.patch_size = 128;
            break;
        case AblationId::FULL:
            break;
    }
    return c;
}

// Small variant of the same wiring for desk-scale runs and finite-difference
// checks: stem 4, stage widths [4,8,8].
inline NetworkConfig width_reduced(NetworkConfig c) {
    c.stem_channels = 4;
    c.stage_channels = {4, 8, 8};
    return c;
}

// ---------------------------------------------------------------------------
// Channel slicing (autograd view-copy used by the attention block)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1) {
    if (x.shape().size() != 4) throw shape_error("slice_channels: want NCHW");
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw shape_error("slice_channels: bad range [" + std::to_string(c0) + "," +
                          std::to_string(c1) + ") of " + std::to_string(C));
    const int64_t SC = c1 - c0;
    Tensor<T> y = Tensor<T>::zeros({N, SC, x.dim(2), x.dim(3)});
    for (int64_t n = 0; n < N; ++n)
        std::copy_n(x.ptr() + (n * C + c0) * HW, SC * HW, y.ptr() + n * SC * HW);
    maybe_record<T>("slice_channels", {x}, y, [x, y, c0, N, C, SC, HW](GradBuffers<T>& gb) {
        if (!x.requires_grad()) return;
        const auto& gy = gb.of(y);
        auto& gx = gb.of(x);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < SC * HW; ++i)
                gx[(n * C + c0) * HW + i] += gy[n * SC * HW + i];
    });
    return y;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Multipath residual block
// ---------------------------------------------------------------------------

template <typename T>
struct MRBWeights {
    MRBConfig cfg;

    struct Branch {
        ConvParams<T> conv;
        BatchNormParams<T> bn;
    };
    // Cascade 0: full convolutions; cascades 1 and 2: grouped.
    std::array<std::vector<Branch>, 3> cascades;

    static MRBWeights make(const MRBConfig& cfg, int64_t bn_passes = 1) {
        validate(cfg);
        MRBWeights w;
        w.cfg = cfg;
        for (int c = 0; c < 3; ++c) {
            const int64_t groups = c == 0 ? 1 : cfg.groups;
            for (int64_t k : cfg.kernel_set) {
                Branch b;
                b.conv = ConvParams<T>::make(cfg.channels, cfg.channels, k, 1, (k - 1) / 2, groups);
                b.bn = BatchNormParams<T>::make(cfg.channels, bn_passes);
                w.cascades[c].push_back(std::move(b));
            }
        }
        return w;
    }
};

// R_{c+1} = R_c + sum_over_kernels BN(relu(conv_k(R_c))), three cascades.
template <typename T>
inline Tensor<T> mrb_forward(const Tensor<T>& x, MRBWeights<T>& w) {
    if (x.dim(1) != w.cfg.channels)
        throw config_error("mrb_forward: input has " + std::to_string(x.dim(1)) + " channels, block wants " +
                           std::to_string(w.cfg.channels));
    Tensor<T> r = x;
    for (auto& cascade : w.cascades) {
        Tensor<T> acc = r;
        for (auto& branch : cascade)
            acc = add(acc, batchnorm(relu(conv2d(r, branch.conv)), branch.bn));
        r = acc;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Focal modulation attention block
// ---------------------------------------------------------------------------

template <typename T>
struct FMABWeights {
    FMABConfig cfg;
    ConvParams<T> proj;                    // 1x1, C -> 2C: query | level-0 context
    std::vector<ConvParams<T>> level_dw;   // depth-wise, one per focal level
    ConvParams<T> gates;                   // 1x1, C -> gate_count
    ConvParams<T> modulator;               // 1x1, C -> C
    ConvParams<T> out;                     // 1x1, C -> C

    static FMABWeights make(const FMABConfig& cfg) {
        validate(cfg);
        FMABWeights w;
        w.cfg = cfg;
        const int64_t C = cfg.channels;
        w.proj = ConvParams<T>::make(C, 2 * C, 1);
        for (int64_t k : cfg.level_kernels)
            w.level_dw.push_back(ConvParams<T>::make(C, C, k, 1, (k - 1) / 2, C));
        w.gates = ConvParams<T>::make(C, cfg.gate_count(), 1);
        w.modulator = ConvParams<T>::make(C, C, 1);
        w.out = ConvParams<T>::make(C, C, 1);
        return w;
    }
};

template <typename T>
inline Tensor<T> fmab_forward(const Tensor<T>& x, FMABWeights<T>& w) {
    const int64_t C = w.cfg.channels;
    if (x.dim(1) != C)
        throw config_error("fmab_forward: input has " + std::to_string(x.dim(1)) + " channels, block wants " +
                           std::to_string(C));
    Tensor<T> p = conv2d(x, w.proj);
    Tensor<T> q = detail::slice_channels(p, 0, C);
    Tensor<T> z = detail::slice_channels(p, C, 2 * C);

    // Hierarchical contexts: each level widens the receptive field; the
    // optional global level is the pooled coarsest context.
    std::vector<Tensor<T>> contexts;
    for (auto& dw : w.level_dw) {
        z = gelu(conv2d(z, dw));
        contexts.push_back(z);
    }
    if (w.cfg.include_global) contexts.push_back(gelu(global_avg_pool(z)));

    // One gate map per context, broadcast across channels. The sigmoid bounds
    // each gate to (0,1) so a context's contribution is a true importance
    // weight and the aggregate cannot outgrow the contexts themselves.
    Tensor<T> gate_maps = sigmoid(conv2d(x, w.gates));
    Tensor<T> agg;
    for (size_t l = 0; l < contexts.size(); ++l) {
        Tensor<T> g = detail::slice_channels(gate_maps, static_cast<int64_t>(l),
                                             static_cast<int64_t>(l) + 1);
        Tensor<T> term = mul(g, contexts[l]); // broadcasts over channels (and space for the global level)
        agg = l == 0 ? term : add(agg, term);
    }
    // Mean rather than sum over context levels: the constant factor is
    // absorbable into the modulator, but keeps the aggregate's magnitude
    // independent of the level count, which conditions training much better.
    Tensor<T> scale = Tensor<T>::full({1, 1, 1, 1}, T(1) / T(contexts.size()));
    agg = mul(agg, scale);
    Tensor<T> m = conv2d(agg, w.modulator);
    return add(conv2d(mul(q, m), w.out), x);
}

// ---------------------------------------------------------------------------
// Stage block: an MRB, or a plain conv->relu->BN stage for the baseline.
// ---------------------------------------------------------------------------

template <typename T>
struct StageBlock {
    bool is_mrb = true;
    std::optional<MRBWeights<T>> mrb;
    std::optional<ConvParams<T>> conv;
    std::optional<BatchNormParams<T>> bn;

    static StageBlock make(int64_t channels, const NetworkConfig& net) {
        StageBlock s;
        s.is_mrb = net.use_mrb;
        const int64_t bn_passes = net.reverse_passes + 1;
        if (net.use_mrb) {
            MRBConfig m = net.mrb;
            m.channels = channels;
            s.mrb = MRBWeights<T>::make(m, bn_passes);
        } else {
            s.conv = ConvParams<T>::make(channels, channels, 3, 1, 1);
            s.bn = BatchNormParams<T>::make(channels, bn_passes);
        }
        return s;
    }

    Tensor<T> forward(const Tensor<T>& x) {
        if (is_mrb) return mrb_forward(x, *mrb);
        return batchnorm(relu(conv2d(x, *conv)), *bn);
    }
};

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

template <typename T>
struct LmbfNet {
    NetworkConfig cfg;

    ConvParams<T> stem;                      // in -> stem, k3
    BatchNormParams<T> stem_bn;
    std::optional<ConvParams<T>> adapt1;     // stem -> stage0
    std::optional<ConvParams<T>> adapt2;     // stage0 -> stage1
    std::optional<ConvParams<T>> adapt3;     // stage1 -> stage2
    StageBlock<T> enc1, enc2, enc3;
    std::optional<FMABWeights<T>> fmab;
    ConvParams<T> up1, up2, up3;             // transposed convs, k2 s2
    std::optional<ConvParams<T>> skip3_adapt; // enc3 -> decoder width, when different
    std::optional<ConvParams<T>> skip2_adapt; // enc2 -> decoder width, when different
    StageBlock<T> dec3, dec2;
    ConvParams<T> final_conv;                // stage0 -> stem, k3
    BatchNormParams<T> final_bn;
    ConvParams<T> head;                      // stem -> num_classes, 1x1
    ConvParams<T> rev1, rev2, rev3;          // reverse injection adapters, zero-initialized
};

// ---------------------------------------------------------------------------
// Parameter/buffer visitation — the single enumeration order used by the
// optimizer, checkpointing, and counting.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fn>
inline void visit_conv(const std::string& name, ConvParams<T>& c, Fn&& fn) {
    fn(name + ".weight", c.weight);
    fn(name + ".bias", c.bias);
}

template <typename T, typename Fn>
inline void visit_bn_params(const std::string& name, BatchNormParams<T>& b, Fn&& fn) {
    fn(name + ".gamma", b.gamma);
    fn(name + ".beta", b.beta);
}

template <typename T, typename Fn>
inline void visit_bn_buffers(const std::string& name, BatchNormParams<T>& b, Fn&& fn) {
    for (size_t k = 0; k < b.mean_passes.size(); ++k) {
        const std::string sfx = k == 0 ? "" : ".p" + std::to_string(k);
        fn(name + ".running_mean" + sfx, b.mean_passes[k]);
        fn(name + ".running_var" + sfx, b.var_passes[k]);
    }
}

template <typename T, typename Fn>
inline void visit_stage(const std::string& name, StageBlock<T>& s, bool params, Fn&& fn) {
    if (s.is_mrb) {
        for (size_t c = 0; c < 3; ++c)
            for (size_t b = 0; b < s.mrb->cascades[c].size(); ++b) {
                auto& br = s.mrb->cascades[c][b];
                const std::string base =
                    name + ".c" + std::to_string(c) + ".k" + std::to_string(s.mrb->cfg.kernel_set[b]);
                if (params) {
                    visit_conv(base + ".conv", br.conv, fn);
                    visit_bn_params(base + ".bn", br.bn, fn);
                } else {
                    visit_bn_buffers(base + ".bn", br.bn, fn);
                }
            }
    } else {
        if (params) {
            visit_conv(name + ".conv", *s.conv, fn);
            visit_bn_params(name + ".bn", *s.bn, fn);
        } else {
            visit_bn_buffers(name + ".bn", *s.bn, fn);
        }
    }
}

} // namespace detail

// fn(name, Tensor&) over every learnable tensor, in a stable order.
template <typename T, typename Fn>
inline void visit_params(LmbfNet<T>& m, Fn&& fn) {
    detail::visit_conv<T>("stem", m.stem, fn);
    detail::visit_bn_params<T>("stem_bn", m.stem_bn, fn);
    if (m.adapt1) detail::visit_conv<T>("adapt1", *m.adapt1, fn);
    if (m.adapt2) detail::visit_conv<T>("adapt2", *m.adapt2, fn);
    if (m.adapt3) detail::visit_conv<T>("adapt3", *m.adapt3, fn);
    detail::visit_stage<T>("enc1", m.enc1, true, fn);
    detail::visit_stage<T>("enc2", m.enc2, true, fn);
    detail::visit_stage<T>("enc3", m.enc3, true, fn);
    if (m.fmab) {
        detail::visit_conv<T>("fmab.proj", m.fmab->proj, fn);
        for (size_t l = 0; l < m.fmab->level_dw.size(); ++l)
            detail::visit_conv<T>("fmab.dw" + std::to_string(l), m.fmab->level_dw[l], fn);
        detail::visit_conv<T>("fmab.gates", m.fmab->gates, fn);
        detail::visit_conv<T>("fmab.modulator", m.fmab->modulator, fn);
        detail::visit_conv<T>("fmab.out", m.fmab->out, fn);
    }
    detail::visit_conv<T>("up1", m.up1, fn);
    if (m.skip3_adapt) detail::visit_conv<T>("skip3_adapt", *m.skip3_adapt, fn);
    detail::visit_stage<T>("dec3", m.dec3, true, fn);
    detail::visit_conv<T>("up2", m.up2, fn);
    if (m.skip2_adapt) detail::visit_conv<T>("skip2_adapt", *m.skip2_adapt, fn);
    detail::visit_stage<T>("dec2", m.dec2, true, fn);
    detail::visit_conv<T>("up3", m.up3, fn);
    detail::visit_conv<T>("final", m.final_conv, fn);
    detail::visit_bn_params<T>("final_bn", m.final_bn, fn);
    detail::visit_conv<T>("head", m.head, fn);
    detail::visit_conv<T>("rev1", m.rev1, fn);
    detail::visit_conv<T>("rev2", m.rev2, fn);
    detail::visit_conv<T>("rev3", m.rev3, fn);
}

// fn(name, Tensor&) over the non-learnable state (batch-norm running stats).
template <typename T, typename Fn>
inline void visit_buffers(LmbfNet<T>& m, Fn&& fn) {
    detail::visit_bn_buffers<T>("stem_bn", m.stem_bn, fn);
    detail::visit_stage<T>("enc1", m.enc1, false, fn);
    detail::visit_stage<T>("enc2", m.enc2, false, fn);
    detail::visit_stage<T>("enc3", m.enc3, false, fn);
    detail::visit_stage<T>("dec3", m.dec3, false, fn);
    detail::visit_stage<T>("dec2", m.dec2, false, fn);
    detail::visit_bn_buffers<T>("final_bn", m.final_bn, fn);
}

template <typename T, typename Fn>
inline void for_each_bn(LmbfNet<T>& m, Fn&& fn) {
    fn(m.stem_bn);
    fn(m.final_bn);
    for (StageBlock<T>* s : {&m.enc1, &m.enc2, &m.enc3, &m.dec3, &m.dec2}) {
        if (s->is_mrb) {
            for (auto& cascade : s->mrb->cascades)
                for (auto& br : cascade) fn(br.bn);
        } else {
            fn(*s->bn);
        }
    }
}

template <typename T>
inline void set_training(LmbfNet<T>& m, bool training) {
    for_each_bn(m, [training](BatchNormParams<T>& b) { b.training = training; });
}

// Selects which per-pass running-statistic set the batch norms use.
template <typename T>
inline void set_bn_pass(LmbfNet<T>& m, int64_t pass) {
    for_each_bn(m, [pass](BatchNormParams<T>& b) { b.set_pass(pass); });
}

template <typename T>
inline void set_requires_grad(LmbfNet<T>& m, bool v) {
    visit_params(m, [v](const std::string&, Tensor<T>& t) { t.set_requires_grad(v); });
}

// ---------------------------------------------------------------------------
// Builder with He-normal initialization (zero biases; the reverse injection
// adapters start at exactly zero so refinement passes are identity at init).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void he_init(ConvParams<T>& c, int64_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : c.weight.data()) v = static_cast<T>(dist(rng));
    // biases stay zero
}

template <typename T>
inline void he_init_conv(ConvParams<T>& c, std::mt19937_64& rng) {
    he_init(c, c.weight.dim(1) * c.weight.dim(2) * c.weight.dim(3), rng);
}

// k = stride = 2 transposed conv: each output position receives exactly one
// tap per input channel.
template <typename T>
inline void he_init_tconv(ConvParams<T>& c, std::mt19937_64& rng) {
    he_init(c, c.weight.dim(0), rng);
}

} // namespace detail

template <typename T>
inline LmbfNet<T> build_network(const NetworkConfig& cfg, uint64_t seed) {
    validate(cfg);
    LmbfNet<T> m;
    m.cfg = cfg;
    const auto& st = cfg.stage_channels;

    m.stem = ConvParams<T>::make(cfg.in_channels(), cfg.stem_channels, 3, 1, 1);
    m.stem_bn = BatchNormParams<T>::make(cfg.stem_channels, cfg.reverse_passes + 1);
    if (cfg.stem_channels != st[0]) m.adapt1 = ConvParams<T>::make(cfg.stem_channels, st[0], 1);
    if (st[0] != st[1]) m.adapt2 = ConvParams<T>::make(st[0], st[1], 1);
    if (st[1] != st[2]) m.adapt3 = ConvParams<T>::make(st[1], st[2], 1);
    m.enc1 = StageBlock<T>::make(st[0], cfg);
    m.enc2 = StageBlock<T>::make(st[1], cfg);
    m.enc3 = StageBlock<T>::make(st[2], cfg);
    if (cfg.use_fmab) {
        FMABConfig f;
        f.channels = st[2];
        m.fmab = FMABWeights<T>::make(f);
    }
    m.up1 = ConvParams<T>::make_transpose(st[2], st[1], 2, 2, 0);
    if (st[2] != st[1]) m.skip3_adapt = ConvParams<T>::make(st[2], st[1], 1);
    m.dec3 = StageBlock<T>::make(st[1], cfg);
    m.up2 = ConvParams<T>::make_transpose(st[1], st[0], 2, 2, 0);
    if (st[1] != st[0]) m.skip2_adapt = ConvParams<T>::make(st[1], st[0], 1);
    m.dec2 = StageBlock<T>::make(st[0], cfg);
    m.up3 = ConvParams<T>::make_transpose(st[0], st[0], 2, 2, 0);
    m.final_conv = ConvParams<T>::make(st[0], cfg.stem_channels, 3, 1, 1);
    m.final_bn = BatchNormParams<T>::make(cfg.stem_channels, cfg.reverse_passes + 1);
    m.head = ConvParams<T>::make(cfg.stem_channels, cfg.num_classes, 1);
    m.rev1 = ConvParams<T>::make(st[0], st[0], 1);
    m.rev2 = ConvParams<T>::make(st[0], st[1], 1);
    m.rev3 = ConvParams<T>::make(st[1], st[2], 1);

    // Initialize in visitation order so the layout of random draws is stable.
    std::mt19937_64 rng(seed);
    detail::he_init_conv(m.stem, rng);
    if (m.adapt1) detail::he_init_conv(*m.adapt1, rng);
    if (m.adapt2) detail::he_init_conv(*m.adapt2, rng);
    if (m.adapt3) detail::he_init_conv(*m.adapt3, rng);
    auto init_stage = [&rng](StageBlock<T>& s) {
        if (s.is_mrb) {
            for (auto& cascade : s.mrb->cascades)
                for (auto& br : cascade) detail::he_init_conv(br.conv, rng);
        } else {
            detail::he_init_conv(*s.conv, rng);
        }
    };
    init_stage(m.enc1);
    init_stage(m.enc2);
    init_stage(m.enc3);
    if (m.fmab) {
        detail::he_init_conv(m.fmab->proj, rng);
        for (auto& dw : m.fmab->level_dw) detail::he_init_conv(dw, rng);
        detail::he_init_conv(m.fmab->gates, rng);
        detail::he_init_conv(m.fmab->modulator, rng);
        // The output projection stays zero so the whole attention block starts
        // as an exact identity; the multiplicative q*m path otherwise injects
        // large-variance noise at the bottleneck that training must unlearn.
    }
    detail::he_init_tconv(m.up1, rng);
    if (m.skip3_adapt) detail::he_init_conv(*m.skip3_adapt, rng);
    init_stage(m.dec3);
    detail::he_init_tconv(m.up2, rng);
    if (m.skip2_adapt) detail::he_init_conv(*m.skip2_adapt, rng);
    init_stage(m.dec2);
    detail::he_init_tconv(m.up3, rng);
    detail::he_init_conv(m.final_conv, rng);
    detail::he_init_conv(m.head, rng);
    // rev1/rev2/rev3 stay zero by construction.
    return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// One encoder-decoder sweep plus `reverse_passes` refinement sweeps. Each
// refinement re-runs the encoder with the previous sweep's decoder features
// injected additively into the matching encoder stage inputs through the
// shared 1x1 reverse adapters. The softmax head runs on the final sweep only.
template <typename T>
inline Tensor<T> forward_bidirectional(LmbfNet<T>& m, const Tensor<T>& x, int64_t reverse_passes) {
    if (reverse_passes < 0) throw config_error("forward_bidirectional: reverse_passes must be >= 0");
    if (x.shape().size() != 4) throw shape_error("forward: want NCHW, got " + shape_str(x.shape()));
    if (x.dim(1) != m.cfg.in_channels())
        throw config_error("forward: input has " + std::to_string(x.dim(1)) + " channels, model wants " +
                           std::to_string(m.cfg.in_channels()));
    if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0 || x.dim(2) < 8 || x.dim(3) < 8)
        throw shape_error("forward: spatial extents must be multiples of 8 for three pooling stages, got " +
                          shape_str(x.shape()));

    std::optional<Tensor<T>> d1, d2, d3; // previous sweep's decoder features
    for (int64_t pass = 0; pass <= reverse_passes; ++pass) {
        set_bn_pass(m, pass); // each pass keeps its own running statistics
        Tensor<T> h = batchnorm(relu(conv2d(x, m.stem)), m.stem_bn);
        if (m.adapt1) h = conv2d(h, *m.adapt1);
        if (d1) h = add(h, conv2d(*d1, m.rev1));
        Tensor<T> e1 = m.enc1.forward(h);

        h = maxpool2d(e1);
        if (m.adapt2) h = conv2d(h, *m.adapt2);
        if (d2) h = add(h, conv2d(*d2, m.rev2));
        Tensor<T> e2 = m.enc2.forward(h);

        h = maxpool2d(e2);
        if (m.adapt3) h = conv2d(h, *m.adapt3);
        if (d3) h = add(h, conv2d(*d3, m.rev3));
        Tensor<T> e3 = m.enc3.forward(h);

        h = maxpool2d(e3);
        if (m.fmab) h = fmab_forward(h, *m.fmab);

        h = transpose_conv2d(h, m.up1);
        h = add(h, m.skip3_adapt ? conv2d(e3, *m.skip3_adapt) : e3);
        Tensor<T> dd3 = m.dec3.forward(h);

        h = transpose_conv2d(dd3, m.up2);
        h = add(h, m.skip2_adapt ? conv2d(e2, *m.skip2_adapt) : e2);
        Tensor<T> dd2 = m.dec2.forward(h);

        h = transpose_conv2d(dd2, m.up3);
        Tensor<T> dd1 = add(h, e1);

        if (pass < reverse_passes) {
            d1 = dd1;
            d2 = dd2;
            d3 = dd3;
            continue;
        }
        h = batchnorm(relu(conv2d(dd1, m.final_conv)), m.final_bn);
        h = conv2d(h, m.head);
        return softmax_channels(h);
    }
    throw contract_error("forward_bidirectional: unreachable");
}

template <typename T>
inline Tensor<T> forward(LmbfNet<T>& m, const Tensor<T>& x) {
    return forward_bidirectional(m, x, m.cfg.reverse_passes);
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

struct ParamCount {
    std::vector<std::pair<std::string, int64_t>> per_layer;
    int64_t total = 0;
};

template <typename T>
inline ParamCount count_params(LmbfNet<T>& m) {
    ParamCount pc;
    visit_params(m, [&pc](const std::string& name, Tensor<T>& t) {
        pc.per_layer.emplace_back(name, t.numel());
        pc.total += t.numel();
    });
    return pc;
}

} // namespace lmbf
