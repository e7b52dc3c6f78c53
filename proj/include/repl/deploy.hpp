#pragma once

// Deploy-time re-parameterization. Every computing layer is synthesized one
// last time, conv+BN pairs are folded into biased convolutions, and the
// result is a static register program that runs without a tape.

#include <cmath>
#include <concepts>
#include <map>
#include <string>
#include <vector>

#include "repl/builder.hpp"

namespace repl {

template <typename T>
struct FoldedWeights {
    Tensor<T> weight, bias;
};

/// W' = s * W per output channel and b' = s * (b - mu) + beta, with
/// s = gamma / sqrt(var + eps). An empty `bias` is treated as zero.
template <typename T>
FoldedWeights<T> fold_bn_conv(const Tensor<T>& weight, const Tensor<T>& bias, const BatchNormParams<T>& bn, T eps) {
    const std::size_t cout = weight.dim(0), per = weight.numel() / cout;
    if (bn.gamma.numel() != cout) {
        throw Error(ErrorKind::shape, "fold_bn_conv: BN over " + std::to_string(bn.gamma.numel()) +
                                          " channels, kernel has " + std::to_string(cout));
    }
    FoldedWeights<T> out{Tensor<T>(weight.shape()), Tensor<T>({cout})};
    for (std::size_t c = 0; c < cout; ++c) {
        if (bn.var[c] < T{0}) throw Error(ErrorKind::value, "fold_bn_conv: negative running variance");
        const T s = bn.gamma[c] / std::sqrt(bn.var[c] + eps);
        for (std::size_t i = 0; i < per; ++i) out.weight[c * per + i] = s * weight[c * per + i];
        const T b = bias.numel() == cout ? bias[c] : T{0};
        out.bias[c] = s * (b - bn.mean[c]) + bn.beta[c];
    }
    return out;
}

/// W' = c * W, b' = c * b.
template <typename T>
FoldedWeights<T> fold_linear(const Tensor<T>& weight, const Tensor<T>& bias, T c) {
    if (!(c > T{0})) throw Error(ErrorKind::value, "fold_linear: scale must be positive");
    return {kernels::scale(weight, c), kernels::scale(bias, c)};
}

// ---- static program -----------------------------------------------------------

enum class OpKind { conv, linear, relu, gelu, add, layer_norm, msa, patchify, add_positional, avg_pool, token_pool };

inline const char* to_string(OpKind k) {
    switch (k) {
        case OpKind::conv: return "conv";
        case OpKind::linear: return "linear";
        case OpKind::relu: return "relu";
        case OpKind::gelu: return "gelu";
        case OpKind::add: return "add";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::msa: return "msa";
        case OpKind::patchify: return "patchify";
        case OpKind::add_positional: return "add_positional";
        case OpKind::avg_pool: return "avg_pool";
        case OpKind::token_pool: return "token_pool";
    }
    return "?";
}

inline OpKind op_kind_from_string(const std::string& s) {
    for (int k = 0; k <= static_cast<int>(OpKind::token_pool); ++k)
        if (s == to_string(static_cast<OpKind>(k))) return static_cast<OpKind>(k);
    throw Error(ErrorKind::format, "unknown deploy op kind '" + s + "'");
}

/// One static operator. Register 0 holds the input. `tensors` are frozen
/// weights in a kind-specific order (conv/linear: weight, bias; layer_norm:
/// gamma, beta; msa: wq bq wk bk wv bv wo bo; add_positional: table).
template <typename T>
struct DeployOp {
    OpKind kind = OpKind::relu;
    std::vector<std::size_t> inputs;
    std::size_t output = 0;
    std::vector<Tensor<T>> tensors;
    std::size_t stride = 1, pad = 0, heads = 1, patch = 1;
    double eps = 0;
    std::string provenance;  // dynamic unit / tensor the op was derived from

    bool operator==(const DeployOp&) const = default;
};

template <typename T>
class DeployModel {
   public:
    std::vector<DeployOp<T>> ops;
    std::size_t registers = 1;
    std::size_t output = 0;
    Shape sample_shape;  // [C,H,W]

    std::size_t op_count() const noexcept { return ops.size(); }

    /// Provenance for every op, keyed by op index.
    std::map<std::size_t, std::string> provenance() const {
        std::map<std::size_t, std::string> m;
        for (std::size_t i = 0; i < ops.size(); ++i) m.emplace(i, ops[i].provenance);
        return m;
    }

    Tensor<T> run(const Tensor<T>& x) const {
        if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != sample_shape) {
            throw Error(ErrorKind::shape, "deploy input must be [B," + shape_str(sample_shape) + "], got " +
                                              shape_str(x.shape()));
        }
        std::vector<Tensor<T>> reg(registers, Tensor<T>({1}));
        reg[0] = x;
        for (const auto& op : ops) reg.at(op.output) = execute(op, reg);
        return reg.at(output);
    }

    bool operator==(const DeployModel&) const = default;

   private:
    static Tensor<T> execute(const DeployOp<T>& op, const std::vector<Tensor<T>>& reg) {
        const auto& x = reg.at(op.inputs.at(0));
        const auto& w = op.tensors;
        switch (op.kind) {
            case OpKind::conv: {
                auto y = kernels::conv2d(x, w.at(0), op.stride, op.pad);
                if (w.size() > 1) kernels::add_channel_bias(y, w[1]);
                return y;
            }
            case OpKind::linear: return kernels::linear(x, w.at(0), w.size() > 1 ? w[1] : Tensor<T>{});
            case OpKind::relu: return kernels::relu(x);
            case OpKind::gelu: return kernels::gelu(x);
            case OpKind::add: return kernels::add(x, reg.at(op.inputs.at(1)));
            case OpKind::layer_norm: return kernels::layer_norm(x, w.at(0), w.at(1), static_cast<T>(op.eps));
            case OpKind::msa:
                return kernels::msa(x, w.at(0), w.at(1), w.at(2), w.at(3), w.at(4), w.at(5), w.at(6), w.at(7),
                                    op.heads);
            case OpKind::patchify: return kernels::patchify(x, op.patch);
            case OpKind::add_positional: return kernels::add_positional(x, w.at(0));
            case OpKind::avg_pool: return kernels::global_avg_pool(x);
            case OpKind::token_pool: return kernels::token_mean_pool(x);
        }
        throw Error(ErrorKind::internal, "unhandled deploy op");
    }
};

/// Things export_deploy accepts. A DeployModel is terminal and does not qualify.
template <typename N>
concept Exportable = requires(const N& n) {
    n.units;
    n.store;
    n.spec;
};

// ---- export -------------------------------------------------------------------

namespace detail {

template <typename T>
class DeployEmitter {
   public:
    DeployEmitter(const Network<T>& net, DeployModel<T>& out) : net_(net), out_(out) {}

    std::size_t emit(OpKind kind, std::vector<std::size_t> in, std::vector<Tensor<T>> tensors, std::string prov,
                     std::size_t stride = 1, std::size_t pad = 0) {
        DeployOp<T> op;
        op.kind = kind;
        op.inputs = std::move(in);
        op.output = out_.registers++;
        op.tensors = std::move(tensors);
        op.stride = stride;
        op.pad = pad;
        op.provenance = std::move(prov);
        out_.ops.push_back(std::move(op));
        return out_.ops.back().output;
    }

    const Tensor<T>& p(const std::string& id) const { return net_.store.value(id); }

    BatchNormParams<T> bn(const std::string& prefix) const {
        return {p(join_id(prefix, "gamma")), p(join_id(prefix, "beta")), net_.store.buffer(join_id(prefix, "mean")),
                net_.store.buffer(join_id(prefix, "var"))};
    }

    std::size_t conv_bn(std::size_t x, const Tensor<T>& w, const std::string& bn_prefix, std::size_t stride,
                        std::size_t pad, const std::string& prov) {
        auto f = fold_bn_conv(w, Tensor<T>({w.dim(0)}), bn(bn_prefix), static_cast<T>(ad::kDefaultBnEps));
        return emit(OpKind::conv, {x}, std::vector<Tensor<T>>{f.weight, f.bias}, prov + " + " + bn_prefix, stride, pad);
    }

    std::size_t layer_norm(std::size_t x, const Tensor<T>& g, const Tensor<T>& b, const std::string& prov) {
        auto r = emit(OpKind::layer_norm, {x}, {g, b}, prov);
        out_.ops.back().eps = ad::kDefaultLnEps;
        return r;
    }

   private:
    const Network<T>& net_;
    DeployModel<T>& out_;
};

}  // namespace detail

/// Static deploy program equivalent to `net` in eval mode.
template <typename T>
DeployModel<T> export_deploy(const Network<T>& net) {
    if (net.mode() != Mode::eval) throw Error(ErrorKind::config, "export_deploy requires an eval-mode network");
    DeployModel<T> out;
    out.sample_shape = {net.spec.in_channels, net.spec.height, net.spec.width};
    detail::DeployEmitter<T> em(net, out);
    auto P = [&](const std::string& id) -> const Tensor<T>& { return em.p(id); };
    std::size_t x = 0;

    for (const auto& unit : net.units) {
        std::visit(
            overloaded{
                [&](const StemUnit& u) {
                    x = em.conv_bn(x, P(join_id(u.prefix, "conv")), join_id(u.prefix, "bn"), 1, u.kernel / 2,
                                   join_id(u.prefix, "conv"));
                    x = em.emit(OpKind::relu, {x}, {}, u.prefix);
                },
                [&](const BasicUnit& u) {
                    const auto& s = u.shape;
                    const auto pf = [&](const char* r) { return join_id(u.prefix, r); };
                    auto h = em.conv_bn(x, P(pf("conv1")), pf("bn1"), s.stride, s.kernel / 2, pf("conv1"));
                    h = em.emit(OpKind::relu, {h}, {}, u.prefix);
                    h = em.conv_bn(h, P(pf("conv2")), pf("bn2"), 1, s.kernel / 2, pf("conv2"));
                    std::size_t id = x;
                    if (s.projects())
                        id = em.conv_bn(x, P(pf("shortcut.conv")), pf("shortcut.bn"), s.stride, 0, pf("shortcut.conv"));
                    x = em.emit(OpKind::relu, {em.emit(OpKind::add, {id, h}, {}, u.prefix)}, {}, u.prefix);
                },
                [&](const BottleneckUnit& u) {
                    const auto& s = u.shape;
                    const auto pf = [&](const char* r) { return join_id(u.prefix, r); };
                    auto h = em.emit(OpKind::relu, {em.conv_bn(x, P(pf("conv_red")), pf("bn1"), 1, 0, pf("conv_red"))},
                                     {}, u.prefix);
                    h = em.emit(OpKind::relu,
                                {em.conv_bn(h, P(pf("conv_mid")), pf("bn2"), s.stride, s.kernel / 2, pf("conv_mid"))},
                                {}, u.prefix);
                    h = em.conv_bn(h, P(pf("conv_exp")), pf("bn3"), 1, 0, pf("conv_exp"));
                    std::size_t id = x;
                    if (s.projects())
                        id = em.conv_bn(x, P(pf("shortcut.conv")), pf("shortcut.bn"), s.stride, 0, pf("shortcut.conv"));
                    x = em.emit(OpKind::relu, {em.emit(OpKind::add, {id, h}, {}, u.prefix)}, {}, u.prefix);
                },
                [&](const EmbedUnit& u) {
                    auto h = em.emit(OpKind::patchify, {x}, {}, u.prefix);
                    out.ops.back().patch = u.patch;
                    h = em.emit(OpKind::linear, {h}, {P("embed.w"), P("embed.b")}, "embed.w");
                    x = em.emit(OpKind::add_positional, {h}, {P("embed.pos")}, "embed.pos");
                },
                [&](const VitBlockUnit& u) {
                    const auto pf = [&](const char* r) { return join_id(u.prefix, r); };
                    auto h = em.layer_norm(x, P(pf("ln1.gamma")), P(pf("ln1.beta")), pf("ln1"));
                    h = em.emit(OpKind::msa, {h},
                                {P(pf("attn.wq")), P(pf("attn.bq")), P(pf("attn.wk")), P(pf("attn.bk")),
                                 P(pf("attn.wv")), P(pf("attn.bv")), P(pf("attn.wo")), P(pf("attn.bo"))},
                                pf("attn"));
                    out.ops.back().heads = u.shape.heads;
                    x = em.emit(OpKind::add, {x, h}, {}, u.prefix);
                    h = em.layer_norm(x, P(pf("ln2.gamma")), P(pf("ln2.beta")), pf("ln2"));
                    h = em.emit(OpKind::linear, {h}, {P(pf("mlp.w1")), P(pf("mlp.b1"))}, pf("mlp.w1"));
                    h = em.emit(OpKind::gelu, {h}, {}, u.prefix);
                    h = em.emit(OpKind::linear, {h}, {P(pf("mlp.w2")), P(pf("mlp.b2"))}, pf("mlp.w2"));
                    x = em.emit(OpKind::add, {x, h}, {}, u.prefix);
                },
                [&](const CnnComputeUnit& u) {
                    const auto& l = u.layer;
                    Tape<T> tape;
                    auto ctx = make_eval_context(tape, net.store);
                    const Tensor<T> w = synthesize_kernel(ctx, l).value();
                    const std::string prov = l.prefix + " (synthesized from " + l.prev_block + ", " + l.next_block + ")";
                    std::size_t h = x;
                    if (l.kind == CnnKind::basic) {
                        h = em.conv_bn(h, w, join_id(l.prefix, "bn"), 1, l.kernel / 2, prov);
                    } else {
                        h = em.emit(OpKind::relu,
                                    {em.emit(OpKind::conv, {h}, {P(l.reduce_anchor().key)}, l.reduce_anchor().key)}, {},
                                    l.prefix);
                        h = em.emit(OpKind::relu, {em.emit(OpKind::conv, {h}, {w}, prov, 1, l.kernel / 2)}, {},
                                    l.prefix);
                        h = em.conv_bn(h, P(l.expand_anchor().key), join_id(l.prefix, "bn"), 1, 0,
                                       l.expand_anchor().key);
                    }
                    x = em.emit(OpKind::relu, {em.emit(OpKind::add, {x, h}, {}, l.prefix)}, {}, l.prefix);
                },
                [&](const VitComputeUnit& u) {
                    const auto& l = u.layer;
                    Tape<T> tape;
                    auto ctx = make_eval_context(tape, net.store);
                    const std::string prov = l.prefix + " (synthesized from " + l.prev_block + ", " + l.next_block + ")";
                    if (l.use_attn) {
                        auto op = synthesize_attn(ctx, l);
                        std::size_t in = x;
                        if (op.norm) {
                            in = em.layer_norm(x, op.norm->first.value(), op.norm->second.value(),
                                               l.prev("ln1").key);
                        }
                        // the output scale is already folded into op.weight; the bias stays unscaled
                        auto h = em.emit(OpKind::linear, {in}, {op.weight.value(), op.bias.value()}, prov + " attn");
                        x = em.emit(OpKind::add, {x, h}, {}, l.prefix);
                    }
                    if (l.use_mlp) {
                        auto m = synthesize_mlp(ctx, l);
                        auto h = em.layer_norm(x, P(l.prev("ln2.gamma").key), P(l.prev("ln2.beta").key),
                                               l.prev("ln2").key);
                        h = em.emit(OpKind::linear, {h}, {m.w1.value(), m.b1.value()}, prov + " mlp.w1");
                        h = em.emit(OpKind::gelu, {h}, {}, l.prefix);
                        h = em.emit(OpKind::linear, {h}, {m.w2.value(), m.b2.value()}, prov + " mlp.w2");
                        x = em.emit(OpKind::add, {x, h}, {}, l.prefix);
                    }
                },
                [&](const HeadUnit& u) {
                    std::size_t h = x;
                    if (u.tokens) {
                        h = em.layer_norm(h, P("head.ln.gamma"), P("head.ln.beta"), "head.ln");
                        h = em.emit(OpKind::token_pool, {h}, {}, "head");
                    } else {
                        h = em.emit(OpKind::avg_pool, {h}, {}, "head");
                    }
                    x = em.emit(OpKind::linear, {h}, {P("head.w"), P("head.b")}, "head.w");
                },
            },
            unit);
    }
    out.output = x;
    return out;
}

/// Operator count of the dynamic eval-mode graph for a batch of `batch`.
template <typename T>
std::size_t dynamic_op_count(const Network<T>& net, std::size_t batch = 1) {
    Tape<T> tape;
    net.run_eval(tape, tape.constant(Tensor<T>(net.input_shape(batch))), 0, net.units.size());
    return tape.op_count();
}

/// max |dynamic - deploy| over every input batch and output coordinate.
template <typename T>
T equivalence_check(const Network<T>& net, const DeployModel<T>& deploy, const std::vector<Tensor<T>>& inputs) {
    if (net.mode() != Mode::eval) throw Error(ErrorKind::config, "equivalence_check requires an eval-mode network");
    T worst{0};
    for (const auto& x : inputs) {
        const auto a = net.predict(x);
        const auto b = deploy.run(x);
        if (a.shape() != b.shape()) {
            throw Error(ErrorKind::shape, "equivalence_check: outputs " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
        }
        worst = std::max(worst, max_abs_diff(a, b));
    }
    return worst;
}

}  // namespace repl
