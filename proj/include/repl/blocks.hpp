#pragma once

// Reference forwards and parameter containers for the three backbone block
// families: ResNet BasicBlock, ResNet Bottleneck, and the pre-norm ViT block.

#include <optional>
#include <string>

#include "repl/ops.hpp"
#include "repl/params.hpp"

namespace repl {

struct BasicBlockShape {
    std::size_t in_channels = 0;
    std::size_t channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;

    bool projects() const { return stride != 1 || in_channels != channels; }
    /// Same-stage blocks are the only replaceable ones.
    bool same_stage() const { return !projects(); }
};

struct BottleneckShape {
    std::size_t in_channels = 0;
    std::size_t channels = 0;  // C: block output width
    std::size_t mid = 0;       // B: reduced width
    std::size_t kernel = 3;
    std::size_t stride = 1;

    bool projects() const { return stride != 1 || in_channels != channels; }
    bool same_stage() const { return !projects(); }
};

struct ViTBlockShape {
    std::size_t dim = 0;
    std::size_t heads = 1;
    std::size_t mlp_dim = 0;
};

template <typename T>
struct BasicBlockParams {
    Tensor<T> conv1, conv2;
    BatchNormParams<T> bn1, bn2;
    std::optional<Tensor<T>> shortcut;
    std::optional<BatchNormParams<T>> shortcut_bn;
};

template <typename T>
struct BottleneckParams {
    Tensor<T> conv_red, conv_mid, conv_exp;
    BatchNormParams<T> bn1, bn2, bn3;
    std::optional<Tensor<T>> shortcut;
    std::optional<BatchNormParams<T>> shortcut_bn;
};

template <typename T>
struct ViTBlockParams {
    LayerNormParams<T> ln1, ln2;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

namespace detail {

inline void check_odd(std::size_t q) {
    if (q % 2 == 0) throw Error(ErrorKind::shape, "kernel extent q must be odd, got " + std::to_string(q));
}

inline void check_channels(const Shape& x, std::size_t expected, const char* what) {
    if (x.size() != 4 || x[1] != expected) {
        throw Error(ErrorKind::shape, std::string(what) + ": expected " + std::to_string(expected) +
                                          " input channels, got input " + shape_str(x));
    }
}

}  // namespace detail

// ---- init -----------------------------------------------------------------

/// Kaiming-uniform convs, identity BN. `stream` namespaces the RNG streams,
/// so equal (shape, seed, stream) always give bitwise-equal parameters.
template <typename T>
BasicBlockParams<T> init_basic_block(const BasicBlockShape& s, std::uint64_t seed, const std::string& stream) {
    detail::check_odd(s.kernel);
    BasicBlockParams<T> p{conv_init<T>(s.channels, s.in_channels, s.kernel, seed, join_id(stream, "conv1")),
                          conv_init<T>(s.channels, s.channels, s.kernel, seed, join_id(stream, "conv2")),
                          BatchNormParams<T>::identity(s.channels), BatchNormParams<T>::identity(s.channels),
                          std::nullopt, std::nullopt};
    if (s.projects()) {
        p.shortcut = conv_init<T>(s.channels, s.in_channels, 1, seed, join_id(stream, "shortcut.conv"));
        p.shortcut_bn = BatchNormParams<T>::identity(s.channels);
    }
    return p;
}

template <typename T>
BottleneckParams<T> init_bottleneck(const BottleneckShape& s, std::uint64_t seed, const std::string& stream) {
    detail::check_odd(s.kernel);
    BottleneckParams<T> p{conv_init<T>(s.mid, s.in_channels, 1, seed, join_id(stream, "conv_red")),
                          conv_init<T>(s.mid, s.mid, s.kernel, seed, join_id(stream, "conv_mid")),
                          conv_init<T>(s.channels, s.mid, 1, seed, join_id(stream, "conv_exp")),
                          BatchNormParams<T>::identity(s.mid),
                          BatchNormParams<T>::identity(s.mid),
                          BatchNormParams<T>::identity(s.channels),
                          std::nullopt,
                          std::nullopt};
    if (s.projects()) {
        p.shortcut = conv_init<T>(s.channels, s.in_channels, 1, seed, join_id(stream, "shortcut.conv"));
        p.shortcut_bn = BatchNormParams<T>::identity(s.channels);
    }
    return p;
}

template <typename T>
ViTBlockParams<T> init_vit_block(const ViTBlockShape& s, std::uint64_t seed, const std::string& stream) {
    if (s.heads == 0 || s.dim % s.heads != 0) {
        throw Error(ErrorKind::shape, "ViT dim " + std::to_string(s.dim) + " not divisible by heads " +
                                          std::to_string(s.heads));
    }
    const std::size_t d = s.dim, f = s.mlp_dim;
    auto lin = [&](std::size_t o, std::size_t i, const char* role) {
        return linear_init<T>(o, i, seed, join_id(stream, role));
    };
    return ViTBlockParams<T>{LayerNormParams<T>::identity(d),
                             LayerNormParams<T>::identity(d),
                             lin(d, d, "attn.wq"),
                             Tensor<T>({d}),
                             lin(d, d, "attn.wk"),
                             Tensor<T>({d}),
                             lin(d, d, "attn.wv"),
                             Tensor<T>({d}),
                             lin(d, d, "attn.wo"),
                             Tensor<T>({d}),
                             lin(f, d, "mlp.w1"),
                             Tensor<T>({f}),
                             lin(d, f, "mlp.w2"),
                             Tensor<T>({d})};
}

// ---- install into a store ---------------------------------------------------

inline ParamInfo weight_info(ParamGroup g) { return {g, true, false}; }

template <typename T>
void install(ParamStore<T>& store, const std::string& prefix, const BasicBlockParams<T>& p,
             ParamGroup group = ParamGroup::retained) {
    store.add_param(join_id(prefix, "conv1"), p.conv1, weight_info(group));
    store.add_param(join_id(prefix, "conv2"), p.conv2, weight_info(group));
    install_bn(store, join_id(prefix, "bn1"), p.bn1, group);
    install_bn(store, join_id(prefix, "bn2"), p.bn2, group);
    if (p.shortcut) {
        store.add_param(join_id(prefix, "shortcut.conv"), *p.shortcut, weight_info(group));
        install_bn(store, join_id(prefix, "shortcut.bn"), *p.shortcut_bn, group);
    }
}

template <typename T>
void install(ParamStore<T>& store, const std::string& prefix, const BottleneckParams<T>& p,
             ParamGroup group = ParamGroup::retained) {
    store.add_param(join_id(prefix, "conv_red"), p.conv_red, weight_info(group));
    store.add_param(join_id(prefix, "conv_mid"), p.conv_mid, weight_info(group));
    store.add_param(join_id(prefix, "conv_exp"), p.conv_exp, weight_info(group));
    install_bn(store, join_id(prefix, "bn1"), p.bn1, group);
    install_bn(store, join_id(prefix, "bn2"), p.bn2, group);
    install_bn(store, join_id(prefix, "bn3"), p.bn3, group);
    if (p.shortcut) {
        store.add_param(join_id(prefix, "shortcut.conv"), *p.shortcut, weight_info(group));
        install_bn(store, join_id(prefix, "shortcut.bn"), *p.shortcut_bn, group);
    }
}

template <typename T>
void install(ParamStore<T>& store, const std::string& prefix, const ViTBlockParams<T>& p,
             ParamGroup group = ParamGroup::retained) {
    install_ln(store, join_id(prefix, "ln1"), p.ln1, group);
    install_ln(store, join_id(prefix, "ln2"), p.ln2, group);
    const std::pair<const char*, const Tensor<T>*> tensors[] = {
        {"attn.wq", &p.wq}, {"attn.bq", &p.bq}, {"attn.wk", &p.wk},   {"attn.bk", &p.bk},
        {"attn.wv", &p.wv}, {"attn.bv", &p.bv}, {"attn.wo", &p.wo},   {"attn.bo", &p.bo},
        {"mlp.w1", &p.mlp_w1}, {"mlp.b1", &p.mlp_b1}, {"mlp.w2", &p.mlp_w2}, {"mlp.b2", &p.mlp_b2}};
    for (const auto& [role, t] : tensors) store.add_param(join_id(prefix, role), *t, weight_info(group));
}

// ---- forwards --------------------------------------------------------------

/// ReLU(shortcut(x) + BN2(conv2(ReLU(BN1(conv1(x)))))).
template <typename T>
Var<T> basic_block_forward(const Context<T>& ctx, const std::string& prefix, const BasicBlockShape& s, Var<T> x) {
    detail::check_channels(x.shape(), s.in_channels, "basic block");
    const std::size_t pad = s.kernel / 2;
    auto z = ad::relu(bn_forward(ctx, join_id(prefix, "bn1"),
                                 ad::conv2d(x, ctx.param(join_id(prefix, "conv1")), s.stride, pad)));
    auto u = bn_forward(ctx, join_id(prefix, "bn2"), ad::conv2d(z, ctx.param(join_id(prefix, "conv2")), 1, pad));
    Var<T> identity = x;
    if (s.projects()) {
        identity = bn_forward(ctx, join_id(prefix, "shortcut.bn"),
                              ad::conv2d(x, ctx.param(join_id(prefix, "shortcut.conv")), s.stride, 0));
    }
    return ad::relu(ad::add(identity, u));
}

/// ReLU(shortcut(x) + BN3(exp(ReLU(BN2(mid(ReLU(BN1(red(x))))))))).
template <typename T>
Var<T> bottleneck_forward(const Context<T>& ctx, const std::string& prefix, const BottleneckShape& s, Var<T> x) {
    detail::check_channels(x.shape(), s.in_channels, "bottleneck block");
    auto z1 = ad::relu(
        bn_forward(ctx, join_id(prefix, "bn1"), ad::conv2d(x, ctx.param(join_id(prefix, "conv_red")), 1, 0)));
    auto z2 = ad::relu(bn_forward(ctx, join_id(prefix, "bn2"),
                                  ad::conv2d(z1, ctx.param(join_id(prefix, "conv_mid")), s.stride, s.kernel / 2)));
    auto u = bn_forward(ctx, join_id(prefix, "bn3"), ad::conv2d(z2, ctx.param(join_id(prefix, "conv_exp")), 1, 0));
    Var<T> identity = x;
    if (s.projects()) {
        identity = bn_forward(ctx, join_id(prefix, "shortcut.bn"),
                              ad::conv2d(x, ctx.param(join_id(prefix, "shortcut.conv")), s.stride, 0));
    }
    return ad::relu(ad::add(identity, u));
}

/// U = X + MSA(LN1(X)); out = U + MLP(LN2(U)), GELU inside the MLP.
template <typename T>
Var<T> vit_block_forward(const Context<T>& ctx, const std::string& prefix, const ViTBlockShape& s, Var<T> x) {
    if (x.shape().size() != 3 || x.shape()[2] != s.dim) {
        throw Error(ErrorKind::shape, "ViT block: expected [B,T," + std::to_string(s.dim) + "], got " +
                                          shape_str(x.shape()));
    }
    auto p = [&](const char* role) { return ctx.param(join_id(prefix, role)); };
    auto h = ln_forward(ctx, join_id(prefix, "ln1"), x);
    auto u = ad::add(x, ad::msa(h, p("attn.wq"), p("attn.bq"), p("attn.wk"), p("attn.bk"), p("attn.wv"),
                                p("attn.bv"), p("attn.wo"), p("attn.bo"), s.heads));
    auto m = ln_forward(ctx, join_id(prefix, "ln2"), u);
    auto mlp = ad::linear(ad::gelu(ad::linear(m, p("mlp.w1"), p("mlp.b1"))), p("mlp.w2"), p("mlp.b2"));
    return ad::add(u, mlp);
}

// ---- standalone conveniences (own a temporary store + tape) -----------------

template <typename T>
Tensor<T> basic_block_forward(const BasicBlockParams<T>& params, const BasicBlockShape& s, const Tensor<T>& x,
                              Mode mode) {
    ParamStore<T> store;
    install(store, "b", params);
    Tape<T> tape;
    auto ctx = make_context(tape, store, mode);
    return basic_block_forward(ctx, "b", s, tape.constant(x)).value();
}

template <typename T>
Tensor<T> bottleneck_forward(const BottleneckParams<T>& params, const BottleneckShape& s, const Tensor<T>& x,
                             Mode mode) {
    ParamStore<T> store;
    install(store, "b", params);
    Tape<T> tape;
    auto ctx = make_context(tape, store, mode);
    return bottleneck_forward(ctx, "b", s, tape.constant(x)).value();
}

template <typename T>
Tensor<T> vit_block_forward(const ViTBlockParams<T>& params, const ViTBlockShape& s, const Tensor<T>& x) {
    ParamStore<T> store;
    install(store, "b", params);
    Tape<T> tape;
    auto ctx = make_eval_context(tape, store);
    return vit_block_forward(ctx, "b", s, tape.constant(x)).value();
}

}  // namespace repl
