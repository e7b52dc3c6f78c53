#pragma once

// Neighbor-parameter synthesis and the computing layers that stand in for
// removed blocks. Anchors are read from the retained neighbors on every
// call and pass through stop_gradient, so only the coefficients and the
// layer's own normalization are trained through this path.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "repl/blocks.hpp"

namespace repl {

inline constexpr double kSynthEps = 1e-5;

enum class NeighborUse { both, prev_only, next_only };
enum class VitSynth { scalar, headwise };

inline const char* to_string(NeighborUse u) {
    switch (u) {
        case NeighborUse::both: return "both";
        case NeighborUse::prev_only: return "prev_only";
        case NeighborUse::next_only: return "next_only";
    }
    return "?";
}

inline const char* to_string(VitSynth s) { return s == VitSynth::scalar ? "scalar" : "headwise"; }

/// Layout of a layer's mixing coefficients. `tied` keeps only alpha and
/// uses beta = 1 - alpha. An unused neighbor's coefficient is pinned at 0.
struct CoeffSpec {
    std::size_t groups = 1;
    NeighborUse use = NeighborUse::both;
    bool tied = false;

    std::size_t trainable_count() const {
        if (tied) return use == NeighborUse::both ? groups : 0;
        return use == NeighborUse::both ? 2 * groups : groups;
    }
};

template <typename T>
struct SynthCoeffs {
    Tensor<T> alpha, beta;

    static SynthCoeffs init(std::size_t groups) {
        return {Tensor<T>({groups}, T(0.5)), Tensor<T>({groups}, T(0.5))};
    }
};

// ---- normalization (plain tensors) ----------------------------------------

template <typename T>
Tensor<T> normalize_rows_of(const Tensor<T>& w, std::size_t rows, T eps) {
    Tape<T> tape;
    return ad::normalize_rows(tape.constant(w), rows, eps).value();
}

/// Each output-channel slice over (Cin, q, q) divided by sqrt(sum sq + eps).
template <typename T>
Tensor<T> normalize_conv_kernel(const Tensor<T>& w, T eps = static_cast<T>(kSynthEps)) {
    if (w.rank() != 4) throw Error(ErrorKind::shape, "conv kernel must be rank 4, got " + shape_str(w.shape()));
    return normalize_rows_of(w, w.dim(0), eps);
}

template <typename T>
Tensor<T> normalize_linear_rows(const Tensor<T>& w, T eps = static_cast<T>(kSynthEps)) {
    if (w.rank() != 2) throw Error(ErrorKind::shape, "linear weight must be rank 2, got " + shape_str(w.shape()));
    return normalize_rows_of(w, w.dim(0), eps);
}

// ---- synthesis on the tape ------------------------------------------------

namespace ad {

namespace detail_synth {

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorKind::shape, std::string(what) + ": anchor shapes differ, " + shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
    }
}

/// alpha[g] * A[o, g, i] + beta[g] * B[o, g, i]
template <typename T>
Var<T> mix(Var<T> a, Var<T> b, Var<T> alpha, Var<T> beta, std::size_t outer) {
    const std::size_t groups = alpha.value().numel();
    const std::size_t per = a.value().numel() / outer;
    if (groups == 0 || per % groups != 0 || beta.value().numel() != groups) {
        throw Error(ErrorKind::shape, "coefficient count " + std::to_string(groups) + " does not tile anchor " +
                                          shape_str(a.shape()));
    }
    const std::size_t inner = per / groups;
    return add(group_scale(a, alpha, outer, groups, inner), group_scale(b, beta, outer, groups, inner));
}

}  // namespace detail_synth

/// W[c] = alpha[c] * norm(prev)[c] + beta[c] * norm(next)[c]. One
/// coefficient group per output channel, or a single shared group.
template <typename T>
Var<T> synth_conv_kernel(Var<T> prev, Var<T> next, Var<T> alpha, Var<T> beta, T eps) {
    detail_synth::require_same(prev, next, "kernel synthesis");
    if (prev.value().rank() != 4) throw Error(ErrorKind::shape, "kernel synthesis expects rank-4 anchors");
    const std::size_t rows = prev.shape()[0];
    return detail_synth::mix(normalize_rows(prev, rows, eps), normalize_rows(next, rows, eps), alpha, beta, 1);
}

template <typename T>
struct ProjSynth {
    Var<T> weight, bias;
};

/// Scalar mode mixes raw anchors and biases with the same coefficients.
/// Headwise mode mixes row-normalized anchors per column group (one group
/// per head) and averages the biases.
template <typename T>
ProjSynth<T> synth_vit_proj(Var<T> wo_prev, Var<T> wo_next, Var<T> bo_prev, Var<T> bo_next, Var<T> alpha,
                            Var<T> beta, VitSynth mode, std::size_t heads, T eps) {
    detail_synth::require_same(wo_prev, wo_next, "projection synthesis");
    detail_synth::require_same(bo_prev, bo_next, "projection bias synthesis");
    const std::size_t d = wo_prev.shape()[0];
    if (mode == VitSynth::scalar) {
        return {detail_synth::mix(wo_prev, wo_next, alpha, beta, 1),
                detail_synth::mix(bo_prev, bo_next, alpha, beta, 1)};
    }
    if (heads == 0 || d % heads != 0) {
        throw Error(ErrorKind::shape, "headwise synthesis: d=" + std::to_string(d) + " not divisible by H=" +
                                          std::to_string(heads));
    }
    auto w = detail_synth::mix(normalize_rows(wo_prev, d, eps), normalize_rows(wo_next, d, eps), alpha, beta, d);
    return {w, scale(add(bo_prev, bo_next), T(0.5))};
}

template <typename T>
struct MlpSynth {
    Var<T> w1, b1, w2, b2;
};

/// Fixed half-averages of row-normalized neighbor weights and raw biases.
template <typename T>
MlpSynth<T> synth_vit_mlp(Var<T> w1p, Var<T> w1n, Var<T> b1p, Var<T> b1n, Var<T> w2p, Var<T> w2n, Var<T> b2p,
                          Var<T> b2n, T eps) {
    detail_synth::require_same(w1p, w1n, "mlp synthesis (first layer)");
    detail_synth::require_same(w2p, w2n, "mlp synthesis (second layer)");
    detail_synth::require_same(b1p, b1n, "mlp bias synthesis");
    detail_synth::require_same(b2p, b2n, "mlp bias synthesis");
    auto avg_norm = [eps](Var<T> a, Var<T> b) {
        const std::size_t rows = a.shape()[0];
        return scale(add(normalize_rows(a, rows, eps), normalize_rows(b, rows, eps)), T(0.5));
    };
    auto avg = [](Var<T> a, Var<T> b) { return scale(add(a, b), T(0.5)); };
    return {avg_norm(w1p, w1n), avg(b1p, b1n), avg_norm(w2p, w2n), avg(b2p, b2n)};
}

}  // namespace ad

// ---- plain-tensor synthesis (tests, analysis) ------------------------------

template <typename T>
Tensor<T> synth_basic_kernel(const Tensor<T>& prev, const Tensor<T>& next, const SynthCoeffs<T>& c,
                             T eps = static_cast<T>(kSynthEps)) {
    Tape<T> tape;
    return ad::synth_conv_kernel(tape.constant(prev), tape.constant(next), tape.constant(c.alpha),
                                 tape.constant(c.beta), eps)
        .value();
}

template <typename T>
Tensor<T> synth_bottleneck_mid(const Tensor<T>& prev, const Tensor<T>& next, const SynthCoeffs<T>& c,
                               T eps = static_cast<T>(kSynthEps)) {
    return synth_basic_kernel(prev, next, c, eps);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> synth_vit_proj(const Tensor<T>& wo_prev, const Tensor<T>& wo_next,
                                               const Tensor<T>& bo_prev, const Tensor<T>& bo_next,
                                               const SynthCoeffs<T>& c, VitSynth mode, std::size_t heads,
                                               T eps = static_cast<T>(kSynthEps)) {
    Tape<T> tape;
    auto r = ad::synth_vit_proj(tape.constant(wo_prev), tape.constant(wo_next), tape.constant(bo_prev),
                                tape.constant(bo_next), tape.constant(c.alpha), tape.constant(c.beta), mode, heads,
                                eps);
    return {r.weight.value(), r.bias.value()};
}

template <typename T>
struct MlpWeights {
    Tensor<T> w1, b1, w2, b2;
};

template <typename T>
MlpWeights<T> synth_vit_mlp(const MlpWeights<T>& prev, const MlpWeights<T>& next,
                            T eps = static_cast<T>(kSynthEps)) {
    if (prev.w1.shape() != next.w1.shape()) {
        throw Error(ErrorKind::shape, "mlp synthesis: hidden width differs, " + shape_str(prev.w1.shape()) + " vs " +
                                          shape_str(next.w1.shape()));
    }
    Tape<T> tape;
    auto k = [&](const Tensor<T>& t) { return tape.constant(t); };
    auto r = ad::synth_vit_mlp(k(prev.w1), k(next.w1), k(prev.b1), k(next.b1), k(prev.w2), k(next.w2), k(prev.b2),
                               k(next.b2), eps);
    return {r.w1.value(), r.b1.value(), r.w2.value(), r.b2.value()};
}

// ---- computing layers -------------------------------------------------------

enum class CnnKind { basic, bottleneck };

/// Replacement for a removed CNN block. Own parameters live under `prefix`
/// (alpha, beta, bn); anchors are read from `prev_block` / `next_block`.
struct CnnComputingLayer {
    CnnKind kind = CnnKind::basic;
    std::size_t channels = 0;  // C
    std::size_t mid = 0;       // B, bottleneck only
    std::size_t kernel = 3;
    std::string prefix, prev_block, next_block;
    CoeffSpec coeffs;
    double eps = kSynthEps;
    /// Prepended to every anchor id; the frozen-anchor twin uses "frozen.".
    std::string anchor_namespace;
    /// Test switch: when false the anchors are read without stop_gradient.
    bool detach_anchors = true;

    std::size_t synth_rows() const { return kind == CnnKind::basic ? channels : mid; }

    ParamId prev_kernel() const {
        return anchor_namespace + join_id(prev_block, kind == CnnKind::basic ? "conv2" : "conv_mid");
    }
    ParamId next_kernel() const {
        return anchor_namespace + join_id(next_block, kind == CnnKind::basic ? "conv1" : "conv_mid");
    }
    ParamId reduce_anchor() const { return anchor_namespace + join_id(prev_block, "conv_red"); }
    ParamId expand_anchor() const { return anchor_namespace + join_id(next_block, "conv_exp"); }

    std::vector<ParamId> anchors() const {
        if (kind == CnnKind::basic) return {prev_kernel(), next_kernel()};
        return {reduce_anchor(), prev_kernel(), next_kernel(), expand_anchor()};
    }
};

/// Replacement for a removed ViT block. Attention branch first, then the
/// MLP branch; either may be disabled, and with both off it is the identity.
struct VitComputingLayer {
    std::size_t dim = 0, heads = 1, mlp_dim = 0;
    std::string prefix, prev_block, next_block;
    VitSynth synth = VitSynth::headwise;
    bool use_attn = true;
    bool use_mlp = true;
    CoeffSpec coeffs;
    double eps = kSynthEps;
    std::string anchor_namespace;
    bool detach_anchors = true;

    ParamId prev(const char* role) const { return anchor_namespace + join_id(prev_block, role); }
    ParamId next(const char* role) const { return anchor_namespace + join_id(next_block, role); }

    /// Headwise output scale d^{-1/2}; the scalar path is unscaled.
    double output_scale() const { return synth == VitSynth::headwise ? 1.0 / std::sqrt(double(dim)) : 1.0; }

    std::vector<ParamId> anchors() const {
        std::vector<ParamId> ids;
        if (use_attn) {
            for (const char* r : {"attn.wo", "attn.bo"}) {
                ids.push_back(prev(r));
                ids.push_back(next(r));
            }
            if (synth == VitSynth::headwise) {
                ids.push_back(prev("ln1.gamma"));
                ids.push_back(prev("ln1.beta"));
            }
        }
        if (use_mlp) {
            for (const char* r : {"mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"}) {
                ids.push_back(prev(r));
                ids.push_back(next(r));
            }
            ids.push_back(prev("ln2.gamma"));
            ids.push_back(prev("ln2.beta"));
        }
        return ids;
    }
};

// ---- installation -----------------------------------------------------------

/// alpha / beta under `prefix`, decay-exempt. A coefficient pinned to an
/// unused neighbor is stored as a non-trainable zero.
template <typename T>
void install_coeffs(ParamStore<T>& store, const std::string& prefix, const CoeffSpec& spec) {
    const ParamInfo live{ParamGroup::computing, true, true};
    const ParamInfo pinned{ParamGroup::computing, false, true};
    const auto init = SynthCoeffs<T>::init(spec.groups);
    const bool alpha_live = spec.use != NeighborUse::next_only;
    const bool beta_live = spec.use != NeighborUse::prev_only;
    if (spec.tied) {
        // beta = 1 - alpha; pinning one side pins both.
        Tensor<T> a = init.alpha;
        if (spec.use == NeighborUse::prev_only) a.fill(T(1));
        if (spec.use == NeighborUse::next_only) a.fill(T(0));
        store.add_param(join_id(prefix, "alpha"), a, spec.use == NeighborUse::both ? live : pinned);
        return;
    }
    store.add_param(join_id(prefix, "alpha"), alpha_live ? init.alpha : Tensor<T>({spec.groups}),
                    alpha_live ? live : pinned);
    store.add_param(join_id(prefix, "beta"), beta_live ? init.beta : Tensor<T>({spec.groups}),
                    beta_live ? live : pinned);
}

template <typename T>
void install(ParamStore<T>& store, const CnnComputingLayer& layer) {
    install_coeffs(store, layer.prefix, layer.coeffs);
    install_bn(store, join_id(layer.prefix, "bn"), BatchNormParams<T>::identity(layer.channels),
               ParamGroup::computing);
}

template <typename T>
void install(ParamStore<T>& store, const VitComputingLayer& layer) {
    if (layer.use_attn) install_coeffs(store, layer.prefix, layer.coeffs);
}

// ---- forwards ---------------------------------------------------------------

namespace detail {

template <typename T>
std::pair<Var<T>, Var<T>> coeff_vars(const Context<T>& ctx, const std::string& prefix, const CoeffSpec& spec) {
    auto alpha = ctx.param(join_id(prefix, "alpha"));
    if (spec.tied) return {alpha, ad::one_minus(alpha)};
    return {alpha, ctx.param(join_id(prefix, "beta"))};
}

template <typename T>
Var<T> anchor(const Context<T>& ctx, const ParamId& id, bool detach) {
    auto v = ctx.param(id);
    return detach ? ad::stop_gradient(v) : v;
}

template <typename T>
void check_anchor(const Var<T>& v, const Shape& expected, const ParamId& id) {
    if (v.shape() != expected) {
        throw Error(ErrorKind::shape, "anchor " + id.key + " has shape " + shape_str(v.shape()) + ", expected " +
                                          shape_str(expected));
    }
}

}  // namespace detail

/// Synthesized kernel for a CNN computing layer, recorded under a synthesis scope.
template <typename T>
Var<T> synthesize_kernel(const Context<T>& ctx, const CnnComputingLayer& layer) {
    auto scope = ctx.tape.synth_scope();
    const std::size_t n = layer.synth_rows(), q = layer.kernel;
    auto prev = detail::anchor(ctx, layer.prev_kernel(), layer.detach_anchors);
    auto next = detail::anchor(ctx, layer.next_kernel(), layer.detach_anchors);
    detail::check_anchor(prev, {n, n, q, q}, layer.prev_kernel());
    detail::check_anchor(next, {n, n, q, q}, layer.next_kernel());
    auto [alpha, beta] = detail::coeff_vars(ctx, layer.prefix, layer.coeffs);
    return ad::synth_conv_kernel(prev, next, alpha, beta, static_cast<T>(layer.eps));
}

/// Basic: ReLU(x + BN_r(W * x)).
/// Bottleneck: ReLU(x + BN_r(W_exp * ReLU(W_mid * ReLU(W_red * x)))).
template <typename T>
Var<T> computing_cnn_forward(const Context<T>& ctx, const CnnComputingLayer& layer, Var<T> x) {
    detail::check_channels(x.shape(), layer.channels, "computing layer");
    auto w = synthesize_kernel(ctx, layer);
    const std::size_t pad = layer.kernel / 2;
    Var<T> y;
    if (layer.kind == CnnKind::basic) {
        y = ad::conv2d(x, w, 1, pad);
    } else {
        auto red = detail::anchor(ctx, layer.reduce_anchor(), layer.detach_anchors);
        auto exp = detail::anchor(ctx, layer.expand_anchor(), layer.detach_anchors);
        detail::check_anchor(red, {layer.mid, layer.channels, 1, 1}, layer.reduce_anchor());
        detail::check_anchor(exp, {layer.channels, layer.mid, 1, 1}, layer.expand_anchor());
        auto z1 = ad::relu(ad::conv2d(x, red, 1, 0));
        auto z2 = ad::relu(ad::conv2d(z1, w, 1, pad));
        y = ad::conv2d(z2, exp, 1, 0);
    }
    return ad::relu(ad::add(x, bn_forward(ctx, join_id(layer.prefix, "bn"), y)));
}

template <typename T>
Var<T> computing_basic_forward(const Context<T>& ctx, const CnnComputingLayer& layer, Var<T> x) {
    if (layer.kind != CnnKind::basic) throw Error(ErrorKind::config, "layer " + layer.prefix + " is not basic");
    return computing_cnn_forward(ctx, layer, x);
}

template <typename T>
Var<T> computing_bottleneck_forward(const Context<T>& ctx, const CnnComputingLayer& layer, Var<T> x) {
    if (layer.kind != CnnKind::bottleneck) {
        throw Error(ErrorKind::config, "layer " + layer.prefix + " is not a bottleneck");
    }
    return computing_cnn_forward(ctx, layer, x);
}

/// Operator the attention branch applies: out = X + lin(pre(X), weight, bias).
/// `weight` already carries the output scale.
template <typename T>
struct VitAttnOperator {
    Var<T> weight, bias;
    std::optional<std::pair<Var<T>, Var<T>>> norm;  // LN (gamma, beta) for the headwise path
};

template <typename T>
VitAttnOperator<T> synthesize_attn(const Context<T>& ctx, const VitComputingLayer& layer) {
    auto scope = ctx.tape.synth_scope();
    auto a = [&](const ParamId& id) { return detail::anchor(ctx, id, layer.detach_anchors); };
    const std::size_t d = layer.dim;
    auto wo_p = a(layer.prev("attn.wo")), wo_n = a(layer.next("attn.wo"));
    auto bo_p = a(layer.prev("attn.bo")), bo_n = a(layer.next("attn.bo"));
    detail::check_anchor(wo_p, {d, d}, layer.prev("attn.wo"));
    detail::check_anchor(bo_p, {d}, layer.prev("attn.bo"));
    auto [alpha, beta] = detail::coeff_vars(ctx, layer.prefix, layer.coeffs);
    auto proj = ad::synth_vit_proj(wo_p, wo_n, bo_p, bo_n, alpha, beta, layer.synth, layer.heads,
                                   static_cast<T>(layer.eps));
    VitAttnOperator<T> op{proj.weight, proj.bias, std::nullopt};
    if (layer.synth == VitSynth::headwise) {
        op.weight = ad::scale(proj.weight, static_cast<T>(layer.output_scale()));
        op.norm = std::pair{a(layer.prev("ln1.gamma")), a(layer.prev("ln1.beta"))};
    }
    return op;
}

template <typename T>
ad::MlpSynth<T> synthesize_mlp(const Context<T>& ctx, const VitComputingLayer& layer) {
    auto scope = ctx.tape.synth_scope();
    auto a = [&](const char* role, bool prev) {
        const ParamId id = prev ? layer.prev(role) : layer.next(role);
        return detail::anchor(ctx, id, layer.detach_anchors);
    };
    return ad::synth_vit_mlp(a("mlp.w1", true), a("mlp.w1", false), a("mlp.b1", true), a("mlp.b1", false),
                             a("mlp.w2", true), a("mlp.w2", false), a("mlp.b2", true), a("mlp.b2", false),
                             static_cast<T>(layer.eps));
}

namespace detail {

template <typename T>
void check_tokens(const Var<T>& x, std::size_t d) {
    if (x.value().rank() != 3 || x.shape()[2] != d) {
        throw Error(ErrorKind::shape, "computing layer: expected [B,T," + std::to_string(d) + "], got " +
                                          shape_str(x.shape()));
    }
}

}  // namespace detail

/// Scalar: X + X W^T + b. Headwise: X + d^{-1/2} LN_{r-1,1}(X) W^T + b.
template <typename T>
Var<T> computing_vit_attn_forward(const Context<T>& ctx, const VitComputingLayer& layer, Var<T> x) {
    detail::check_tokens(x, layer.dim);
    if (!layer.use_attn) return x;
    auto op = synthesize_attn(ctx, layer);
    auto in = op.norm ? ad::layer_norm(x, op.norm->first, op.norm->second, ctx.ln_eps) : x;
    return ad::add(x, ad::linear(in, op.weight, op.bias));
}

/// X + W2 GELU(W1 LN_{r-1,2}(X) + b1) + b2.
template <typename T>
Var<T> computing_vit_mlp_forward(const Context<T>& ctx, const VitComputingLayer& layer, Var<T> x) {
    detail::check_tokens(x, layer.dim);
    if (!layer.use_mlp) return x;
    auto m = synthesize_mlp(ctx, layer);
    auto ln = ad::layer_norm(x, detail::anchor(ctx, layer.prev("ln2.gamma"), layer.detach_anchors),
                             detail::anchor(ctx, layer.prev("ln2.beta"), layer.detach_anchors), ctx.ln_eps);
    return ad::add(x, ad::linear(ad::gelu(ad::linear(ln, m.w1, m.b1)), m.w2, m.b2));
}

template <typename T>
Var<T> computing_vit_forward(const Context<T>& ctx, const VitComputingLayer& layer, Var<T> x) {
    return computing_vit_mlp_forward(ctx, layer, computing_vit_attn_forward(ctx, layer, x));
}

}  // namespace repl
