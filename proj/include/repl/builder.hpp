#pragma once

// Removal planning and network assembly for the three training methods:
// full-depth (e2e), removed blocks deleted (remove_only), and removed blocks
// replaced by computing layers (repl).

#include <algorithm>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "repl/blocks.hpp"
#include "repl/replacement.hpp"

namespace repl {

enum class Family { resnet_basic, resnet_bottleneck, vit };
enum class Method { e2e, remove_only, repl };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::resnet_basic: return "resnet_basic";
        case Family::resnet_bottleneck: return "resnet_bottleneck";
        case Family::vit: return "vit";
    }
    return "?";
}

inline const char* to_string(Method m) {
    switch (m) {
        case Method::e2e: return "e2e";
        case Method::remove_only: return "remove_only";
        case Method::repl: return "repl";
    }
    return "?";
}

struct StageSpec {
    std::size_t blocks = 1;
    std::size_t channels = 8;
    std::size_t mid = 0;     // bottleneck width; 0 means channels / 4
    std::size_t stride = 1;  // stride of the stage's first block
};

struct NetworkSpec {
    Family family = Family::resnet_basic;
    Method method = Method::e2e;
    std::size_t K = 4;
    std::size_t in_channels = 1, height = 8, width = 8;
    std::size_t classes = 4;

    // CNN families
    std::size_t stem_channels = 8;
    std::size_t kernel = 3;
    std::vector<StageSpec> stages{StageSpec{}};

    // ViT family (a single stage of `depth` blocks)
    std::size_t patch = 4, dim = 16, heads = 2, mlp_dim = 32, depth = 5;

    // replacement variants
    NeighborUse neighbors = NeighborUse::both;
    bool per_group_coeffs = true;  // per channel (CNN) / per head (ViT headwise); false = one scalar pair
    bool tied_coeffs = false;      // beta = 1 - alpha
    VitSynth vit_synth = VitSynth::headwise;
    bool vit_use_attn = true;
    bool vit_use_mlp = true;

    bool is_cnn() const { return family != Family::vit; }
    std::size_t tokens() const { return (height / patch) * (width / patch); }

    std::vector<std::size_t> stage_lengths() const {
        if (!is_cnn()) return {depth};
        std::vector<std::size_t> out;
        for (const auto& s : stages) out.push_back(s.blocks);
        return out;
    }

    std::size_t stage_mid(std::size_t s) const { return stages[s].mid ? stages[s].mid : stages[s].channels / 4; }
};

inline void validate(const NetworkSpec& spec) {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::config, m); };
    if (spec.K < 2) fail("model.K must be >= 2, got " + std::to_string(spec.K));
    if (spec.classes < 1) fail("model.classes must be >= 1");
    if (spec.in_channels == 0 || spec.height == 0 || spec.width == 0) fail("input extents must be positive");
    if (spec.is_cnn()) {
        if (spec.stages.empty()) fail("model.stages must contain at least one stage");
        if (spec.kernel % 2 == 0) fail("model.kernel must be odd, got " + std::to_string(spec.kernel));
        for (std::size_t s = 0; s < spec.stages.size(); ++s) {
            const auto& st = spec.stages[s];
            if (st.blocks < 1) fail("stage " + std::to_string(s + 1) + " must contain at least one block");
            if (st.channels == 0 || st.stride == 0) fail("stage " + std::to_string(s + 1) + " has a zero extent");
            if (spec.family == Family::resnet_bottleneck && spec.stage_mid(s) == 0) {
                fail("stage " + std::to_string(s + 1) + " bottleneck width is zero");
            }
        }
    } else {
        if (spec.depth < 1) fail("model.depth must be >= 1");
        if (spec.patch == 0 || spec.height % spec.patch || spec.width % spec.patch) {
            fail("model.patch must divide the input extent");
        }
        if (spec.heads == 0 || spec.dim % spec.heads) fail("model.dim must be divisible by model.heads");
        if (spec.mlp_dim < spec.dim) fail("model.mlp_dim must be >= model.dim");
    }
}

// ---- removal plans --------------------------------------------------------

/// { mK : m >= 1, mK < L }, 1-based; the last block is always kept.
inline std::vector<std::size_t> removal_set(std::size_t blocks, std::size_t interval) {
    if (interval < 2) throw Error(ErrorKind::config, "replacement interval K must be >= 2, got " + std::to_string(interval));
    std::vector<std::size_t> out;
    for (std::size_t r = interval; r < blocks; r += interval) out.push_back(r);
    return out;
}

struct StagePlan {
    std::size_t blocks = 0;
    std::vector<std::size_t> removed;  // 1-based, ascending
};

struct RemovalPlan {
    std::vector<StagePlan> stages;

    std::size_t removed_count() const {
        std::size_t n = 0;
        for (const auto& s : stages) n += s.removed.size();
        return n;
    }
    std::size_t block_count() const {
        std::size_t n = 0;
        for (const auto& s : stages) n += s.blocks;
        return n;
    }
    double removed_fraction() const {
        return block_count() ? double(removed_count()) / double(block_count()) : 0.0;
    }
    bool is_removed(std::size_t stage, std::size_t block) const {
        const auto& r = stages.at(stage).removed;
        return std::binary_search(r.begin(), r.end(), block);
    }
};

/// Plans each stage independently; a ViT is a single stage. The plan names
/// the same sites for every method; only repl and remove_only act on it.
inline RemovalPlan stage_removal_plan(const NetworkSpec& spec) {
    RemovalPlan plan;
    for (std::size_t len : spec.stage_lengths()) plan.stages.push_back({len, removal_set(len, spec.K)});
    return plan;
}

// ---- units ------------------------------------------------------------------

struct StemUnit {
    std::string prefix;
    std::size_t in_channels, out_channels, kernel;
};
struct BasicUnit {
    std::string prefix;
    BasicBlockShape shape;
};
struct BottleneckUnit {
    std::string prefix;
    BottleneckShape shape;
};
struct EmbedUnit {
    std::string prefix;
    std::size_t in_channels, patch, dim, tokens;
};
struct VitBlockUnit {
    std::string prefix;
    ViTBlockShape shape;
};
struct CnnComputeUnit {
    CnnComputingLayer layer;
};
struct VitComputeUnit {
    VitComputingLayer layer;
};
struct HeadUnit {
    std::string prefix;
    std::size_t features, classes;
    bool tokens;  // ViT: final LN + token mean; CNN: global average pool
};

using Unit = std::variant<StemUnit, BasicUnit, BottleneckUnit, EmbedUnit, VitBlockUnit, CnnComputeUnit,
                          VitComputeUnit, HeadUnit>;

inline std::string unit_name(const Unit& u) {
    return std::visit(
        [](const auto& x) -> std::string {
            using U = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<U, CnnComputeUnit> || std::is_same_v<U, VitComputeUnit>) {
                return x.layer.prefix;
            } else {
                return x.prefix;
            }
        },
        u);
}

inline bool is_computing(const Unit& u) {
    return std::holds_alternative<CnnComputeUnit>(u) || std::holds_alternative<VitComputeUnit>(u);
}

/// A position planned for replacement: stage/block are 1-based in the plan,
/// `unit` indexes the network's unit list (absent for remove_only).
struct Site {
    std::size_t stage = 0;  // 0-based
    std::size_t block = 0;  // 1-based within the stage
    std::size_t unit = 0;
};

inline std::string block_prefix(std::size_t stage, std::size_t block) {
    return "s" + std::to_string(stage + 1) + ".b" + std::to_string(block);
}

template <typename... F>
struct overloaded : F... {
    using F::operator()...;
};
template <typename... F>
overloaded(F...) -> overloaded<F...>;

// ---- network --------------------------------------------------------------

template <typename T>
class Network {
   public:
    NetworkSpec spec;
    RemovalPlan plan;
    std::vector<Unit> units;
    std::vector<Site> sites;
    ParamStore<T> store;
    std::uint64_t seed = 0;

    Mode mode() const noexcept { return mode_; }
    void train() noexcept { mode_ = Mode::train; }
    void eval() noexcept { mode_ = Mode::eval; }

    Shape input_shape(std::size_t batch) const { return {batch, spec.in_channels, spec.height, spec.width}; }

    /// Executes units [first, last) in the network's current mode.
    Var<T> run(Tape<T>& tape, Var<T> x, std::size_t first, std::size_t last,
               std::vector<FlopStats>* per_unit = nullptr) {
        auto ctx = make_context(tape, store, mode_);
        return run_units(ctx, x, first, last, per_unit);
    }

    /// Read-only eval-mode execution of units [first, last).
    Var<T> run_eval(Tape<T>& tape, Var<T> x, std::size_t first, std::size_t last,
                    std::vector<FlopStats>* per_unit = nullptr) const {
        auto ctx = make_eval_context(tape, store);
        return run_units(ctx, x, first, last, per_unit);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, std::vector<FlopStats>* per_unit = nullptr) {
        check_input(x.shape());
        return run(tape, x, 0, units.size(), per_unit);
    }

    Var<T> forward(Tape<T>& tape, const Tensor<T>& x) { return forward(tape, tape.constant(x)); }

    /// Eval-mode logits; never touches running statistics.
    Tensor<T> predict(const Tensor<T>& x) const {
        check_input(x.shape());
        Tape<T> tape;
        return run_eval(tape, tape.constant(x), 0, units.size()).value();
    }

    /// Gradients of mean cross-entropy for one batch in the current mode.
    GradMap<T> gradients(const Tensor<T>& x, std::span<const int> labels) {
        Tape<T> tape;
        auto loss = ad::cross_entropy(forward(tape, x), labels);
        tape.backward(loss);
        auto g = tape.param_grads();
        for (const auto& [id, e] : store.params())  // unreachable trainables map to zeros
            if (e.info.trainable && !g.contains(id)) g.emplace(id, Tensor<T>(e.value.shape()));
        return g;
    }

    void check_input(const Shape& s) const {
        if (s.size() != 4 || s[1] != spec.in_channels || s[2] != spec.height || s[3] != spec.width) {
            throw Error(ErrorKind::shape, "network input must be [B," + std::to_string(spec.in_channels) + "," +
                                              std::to_string(spec.height) + "," + std::to_string(spec.width) +
                                              "], got " + shape_str(s));
        }
    }

   private:
    Var<T> run_units(const Context<T>& ctx, Var<T> x, std::size_t first, std::size_t last,
                     std::vector<FlopStats>* per_unit) const {
        if (first > last || last > units.size()) throw Error(ErrorKind::internal, "unit range out of bounds");
        for (std::size_t i = first; i < last; ++i) {
            const FlopStats before = ctx.tape.flops();
            x = apply(ctx, units[i], x);
            if (per_unit) {
                const FlopStats& now = ctx.tape.flops();
                per_unit->push_back(
                    {now.mac - before.mac, now.elementwise - before.elementwise, now.synth - before.synth});
            }
        }
        return x;
    }

    static Var<T> apply(const Context<T>& ctx, const Unit& unit, Var<T> x) {
        return std::visit(
            overloaded{
                [&](const StemUnit& u) {
                    auto y = ad::conv2d(x, ctx.param(join_id(u.prefix, "conv")), 1, u.kernel / 2);
                    return ad::relu(bn_forward(ctx, join_id(u.prefix, "bn"), y));
                },
                [&](const BasicUnit& u) { return basic_block_forward(ctx, u.prefix, u.shape, x); },
                [&](const BottleneckUnit& u) { return bottleneck_forward(ctx, u.prefix, u.shape, x); },
                [&](const EmbedUnit& u) {
                    auto p = ad::patchify(x, u.patch);
                    auto e = ad::linear(p, ctx.param(join_id(u.prefix, "w")), ctx.param(join_id(u.prefix, "b")));
                    return ad::add_positional(e, ctx.param(join_id(u.prefix, "pos")));
                },
                [&](const VitBlockUnit& u) { return vit_block_forward(ctx, u.prefix, u.shape, x); },
                [&](const CnnComputeUnit& u) { return computing_cnn_forward(ctx, u.layer, x); },
                [&](const VitComputeUnit& u) { return computing_vit_forward(ctx, u.layer, x); },
                [&](const HeadUnit& u) {
                    Var<T> pooled = u.tokens ? ad::token_mean_pool(ln_forward(ctx, join_id(u.prefix, "ln"), x))
                                             : ad::global_avg_pool(x);
                    return ad::linear(pooled, ctx.param(join_id(u.prefix, "w")), ctx.param(join_id(u.prefix, "b")));
                },
            },
            unit);
    }

    Mode mode_ = Mode::train;
};

// ---- assembly ---------------------------------------------------------------

namespace detail {

inline CoeffSpec coeff_spec(const NetworkSpec& spec, std::size_t per_group) {
    return CoeffSpec{spec.per_group_coeffs ? per_group : 1, spec.neighbors, spec.tied_coeffs};
}

template <typename T>
void add_head(Network<T>& net, std::size_t features) {
    const auto& spec = net.spec;
    HeadUnit head{"head", features, spec.classes, !spec.is_cnn()};
    if (head.tokens) install_ln(net.store, "head.ln", LayerNormParams<T>::identity(features), ParamGroup::head);
    net.store.add_param("head.w", linear_init<T>(spec.classes, features, net.seed, "head.w"),
                        {ParamGroup::head, true, false});
    net.store.add_param("head.b", Tensor<T>({spec.classes}), {ParamGroup::head, true, false});
    net.units.emplace_back(std::move(head));
}

template <typename T>
void build_cnn(Network<T>& net) {
    const auto& spec = net.spec;
    const std::uint64_t seed = net.seed;
    net.store.add_param("stem.conv", conv_init<T>(spec.stem_channels, spec.in_channels, spec.kernel, seed, "stem.conv"),
                        {ParamGroup::retained, true, false});
    install_bn(net.store, "stem.bn", BatchNormParams<T>::identity(spec.stem_channels), ParamGroup::retained);
    net.units.emplace_back(StemUnit{"stem", spec.in_channels, spec.stem_channels, spec.kernel});

    std::size_t width = spec.stem_channels;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        const auto& st = spec.stages[s];
        const std::size_t mid = spec.stage_mid(s);
        for (std::size_t b = 1; b <= st.blocks; ++b) {
            const std::string prefix = block_prefix(s, b);
            const std::size_t in = b == 1 ? width : st.channels;
            const std::size_t stride = b == 1 ? st.stride : 1;
            if (net.plan.is_removed(s, b)) {
                if (spec.method == Method::remove_only) continue;
                if (spec.method == Method::repl) {
                    CnnComputingLayer layer;
                    layer.kind = spec.family == Family::resnet_basic ? CnnKind::basic : CnnKind::bottleneck;
                    layer.channels = st.channels;
                    layer.mid = layer.kind == CnnKind::bottleneck ? mid : 0;
                    layer.kernel = spec.kernel;
                    layer.prefix = prefix;
                    layer.prev_block = block_prefix(s, b - 1);
                    layer.next_block = block_prefix(s, b + 1);
                    layer.coeffs = coeff_spec(spec, layer.synth_rows());
                    if (layer.kind == CnnKind::bottleneck && b - 1 == 1 && (width != st.channels || st.stride != 1)) {
                        throw Error(ErrorKind::config, "site " + prefix +
                                                           ": reduction anchor of a width-changing block is "
                                                           "incompatible; use K >= 3");
                    }
                    install(net.store, layer);
                    net.sites.push_back({s, b, net.units.size()});
                    net.units.emplace_back(CnnComputeUnit{std::move(layer)});
                    continue;
                }
                net.sites.push_back({s, b, net.units.size()});
            }
            if (spec.family == Family::resnet_basic) {
                BasicBlockShape shape{in, st.channels, spec.kernel, stride};
                install(net.store, prefix, init_basic_block<T>(shape, seed, prefix));
                net.units.emplace_back(BasicUnit{prefix, shape});
            } else {
                BottleneckShape shape{in, st.channels, mid, spec.kernel, stride};
                install(net.store, prefix, init_bottleneck<T>(shape, seed, prefix));
                net.units.emplace_back(BottleneckUnit{prefix, shape});
            }
        }
        width = st.channels;
    }
    add_head(net, width);
}

template <typename T>
void build_vit(Network<T>& net) {
    const auto& spec = net.spec;
    const std::uint64_t seed = net.seed;
    const std::size_t patch_dim = spec.in_channels * spec.patch * spec.patch, tokens = spec.tokens();
    net.store.add_param("embed.w", linear_init<T>(spec.dim, patch_dim, seed, "embed.w"),
                        {ParamGroup::retained, true, false});
    net.store.add_param("embed.b", Tensor<T>({spec.dim}), {ParamGroup::retained, true, false});
    {
        Rng rng(seed, std::string("embed.pos"));
        Tensor<T> pos({tokens, spec.dim});
        for (auto& v : pos.data()) v = static_cast<T>(0.02 * rng.normal());
        net.store.add_param("embed.pos", std::move(pos), {ParamGroup::retained, true, false});
    }
    net.units.emplace_back(EmbedUnit{"embed", spec.in_channels, spec.patch, spec.dim, tokens});

    const ViTBlockShape shape{spec.dim, spec.heads, spec.mlp_dim};
    for (std::size_t b = 1; b <= spec.depth; ++b) {
        const std::string prefix = block_prefix(0, b);
        if (net.plan.is_removed(0, b)) {
            if (spec.method == Method::remove_only) continue;
            if (spec.method == Method::repl) {
                VitComputingLayer layer;
                layer.dim = spec.dim;
                layer.heads = spec.heads;
                layer.mlp_dim = spec.mlp_dim;
                layer.prefix = prefix;
                layer.prev_block = block_prefix(0, b - 1);
                layer.next_block = block_prefix(0, b + 1);
                layer.synth = spec.vit_synth;
                layer.use_attn = spec.vit_use_attn;
                layer.use_mlp = spec.vit_use_mlp;
                layer.coeffs =
                    coeff_spec(spec, spec.vit_synth == VitSynth::headwise ? spec.heads : std::size_t{1});
                install(net.store, layer);
                net.sites.push_back({0, b, net.units.size()});
                net.units.emplace_back(VitComputeUnit{std::move(layer)});
                continue;
            }
            net.sites.push_back({0, b, net.units.size()});
        }
        install(net.store, prefix, init_vit_block<T>(shape, seed, prefix));
        net.units.emplace_back(VitBlockUnit{prefix, shape});
    }
    add_head(net, spec.dim);
}

}  // namespace detail

/// Parameters are drawn from per-id streams of `seed`, so networks built
/// from the same seed share every retained parameter bitwise.
template <typename T>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
    validate(spec);
    Network<T> net;
    net.spec = spec;
    net.seed = seed;
    net.plan = stage_removal_plan(spec);
    if (spec.is_cnn()) {
        detail::build_cnn(net);
    } else {
        detail::build_vit(net);
    }
    return net;
}

/// Anchor ids read by the computing layer at `site` (empty for other units).
template <typename T>
std::vector<ParamId> site_anchors(const Network<T>& net, const Site& site) {
    return std::visit(overloaded{[](const CnnComputeUnit& u) { return u.layer.anchors(); },
                                 [](const VitComputeUnit& u) { return u.layer.anchors(); },
                                 [](const auto&) { return std::vector<ParamId>{}; }},
                      net.units.at(site.unit));
}

/// Copy of `net` whose computing layers read non-trainable frozen copies of
/// their anchors instead of the live retained parameters.
template <typename T>
Network<T> frozen_anchor_twin(const Network<T>& net) {
    Network<T> twin = net;
    const std::string ns = "frozen.";
    for (auto& unit : twin.units) {
        auto rewire = [&](auto& layer) {
            for (const auto& id : layer.anchors()) {
                const ParamId frozen = ns + id.key;
                if (!twin.store.contains(frozen))
                    twin.store.add_param(frozen, net.store.value(id), {ParamGroup::frozen, false, true});
            }
            layer.anchor_namespace = ns;
        };
        if (auto* c = std::get_if<CnnComputeUnit>(&unit)) rewire(c->layer);
        if (auto* v = std::get_if<VitComputeUnit>(&unit)) rewire(v->layer);
    }
    return twin;
}

/// The e2e network with its first `count` sites replaced by the computing
/// layers of `repl` (coefficients and own BN copied). Retained parameters
/// are those of `e2e`.
template <typename T>
Network<T> hybrid_network(const Network<T>& e2e, const Network<T>& repl, std::size_t count) {
    if (e2e.spec.method != Method::e2e || repl.spec.method != Method::repl) {
        throw Error(ErrorKind::config, "hybrid_network needs an e2e and a repl network");
    }
    if (e2e.sites.size() != repl.sites.size() || count > repl.sites.size()) {
        throw Error(ErrorKind::config, "hybrid_network: removal plans differ");
    }
    Network<T> h = e2e;
    for (std::size_t j = 0; j < count; ++j) {
        const auto& src = repl.units.at(repl.sites[j].unit);
        h.units.at(h.sites[j].unit) = src;
        const std::string prefix = unit_name(src) + ".";
        for (const auto& [id, e] : repl.store.params())
            if (id.key.rfind(prefix, 0) == 0 && e.info.group == ParamGroup::computing)
                h.store.add_param(id, e.value, e.info);
        for (const auto& [id, b] : repl.store.buffers())
            if (id.key.rfind(prefix + "bn.", 0) == 0) h.store.add_buffer(id, b);
    }
    return h;
}

}  // namespace repl
