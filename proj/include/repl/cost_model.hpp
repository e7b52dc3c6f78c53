#pragma once

// Parameter, FLOP and activation-memory accounting for e2e vs replacement
// networks. FLOPs follow the MAC convention: one multiply-accumulate is two
// FLOPs; conv, linear and attention matmuls are counted, elementwise and
// normalization work only when the convention asks for it.
//
// Activation-memory model (elements stored for backward, per op):
//   conv, linear, batch/layer norm, gelu : input
//   relu, softmax                        : output
//   batched matmul                       : both inputs
//   add, pooling, patchify               : nothing
// A tensor consumed by several ops is stored once.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "repl/builder.hpp"

namespace repl {

struct ParamPair {
    std::uint64_t P = 0;  // original block
    std::uint64_t a = 0;  // computing layer
    std::uint64_t saving() const { return P - a; }
};

/// BasicBlock: P = 2C^2q^2 + 4C; a = coefficients + 2C (own BN affine).
inline ParamPair param_count_basic(std::uint64_t C, std::uint64_t q, const CoeffSpec& coeffs) {
    return {2 * C * C * q * q + 4 * C, coeffs.trainable_count() + 2 * C};
}
inline ParamPair param_count_basic(std::uint64_t C, std::uint64_t q) {
    return param_count_basic(C, q, CoeffSpec{C});
}

/// Bottleneck: P = 2CB + B^2q^2 + 4B + 2C; a = coefficients + 2C.
inline ParamPair param_count_bottleneck(std::uint64_t C, std::uint64_t B, std::uint64_t q, const CoeffSpec& coeffs) {
    return {2 * C * B + B * B * q * q + 4 * B + 2 * C, coeffs.trainable_count() + 2 * C};
}
inline ParamPair param_count_bottleneck(std::uint64_t C, std::uint64_t B, std::uint64_t q) {
    return param_count_bottleneck(C, B, q, CoeffSpec{B});
}

/// ViT block with every instantiated tensor enumerated: four d x d
/// projections with biases, two MLP layers with biases, two LN affines.
/// The computing layer's only learnables are its attention coefficients.
inline ParamPair param_count_vit(std::uint64_t d, std::uint64_t dff, const CoeffSpec& coeffs, bool use_attn) {
    const std::uint64_t attn = 4 * d * d + 4 * d;
    const std::uint64_t mlp = dff * d + dff + d * dff + d;
    const std::uint64_t norms = 4 * d;
    return {attn + mlp + norms, use_attn ? coeffs.trainable_count() : 0};
}

// ---- per-unit analytic accounting ----------------------------------------

struct UnitCost {
    std::uint64_t params = 0;       // trainable elements
    std::uint64_t mac_flops = 0;    // 2 x multiply-accumulates
    std::uint64_t activations = 0;  // stored elements
    std::uint64_t aux = 0;          // synthesized weights, coefficients, own statistics
    Shape out;
};

namespace detail {

inline std::uint64_t conv_out(std::uint64_t n, std::uint64_t q, std::uint64_t stride) {
    return (n + 2 * (q / 2) - q) / stride + 1;
}

}  // namespace detail

/// Analytic cost of one unit for input shape `in` ([B,C,H,W] or [B,T,d]).
inline UnitCost unit_cost(const Unit& unit, const Shape& in) {
    return std::visit(
        overloaded{
            [&](const StemUnit& u) {
                const std::uint64_t B = in[0], H = in[2], W = in[3], C = u.out_channels, q = u.kernel;
                const std::uint64_t plane = B * C * H * W;
                return UnitCost{C * u.in_channels * q * q + 2 * C, 2 * plane * u.in_channels * q * q,
                                B * u.in_channels * H * W + 2 * plane, 0, {B, C, H, W}};
            },
            [&](const BasicUnit& u) {
                const auto& s = u.shape;
                const std::uint64_t B = in[0], Ci = s.in_channels, C = s.channels, q = s.kernel;
                const std::uint64_t H = detail::conv_out(in[2], q, s.stride), W = detail::conv_out(in[3], q, s.stride);
                const std::uint64_t o = B * C * H * W;
                UnitCost c{C * Ci * q * q + C * C * q * q + 4 * C, 2 * o * Ci * q * q + 2 * o * C * q * q,
                           B * Ci * in[2] * in[3] + 4 * o, 0, {B, C, H, W}};
                if (s.projects()) {
                    c.params += C * Ci + 2 * C;
                    c.mac_flops += 2 * o * Ci;
                    c.activations += o;
                }
                return c;
            },
            [&](const BottleneckUnit& u) {
                const auto& s = u.shape;
                const std::uint64_t B = in[0], Ci = s.in_channels, C = s.channels, M = s.mid, q = s.kernel;
                const std::uint64_t H = detail::conv_out(in[2], q, s.stride), W = detail::conv_out(in[3], q, s.stride);
                const std::uint64_t pin = B * in[2] * in[3], pout = B * H * W;
                UnitCost c{M * Ci + M * M * q * q + C * M + 4 * M + 2 * C,
                           2 * pin * M * Ci + 2 * pout * M * M * q * q + 2 * pout * C * M,
                           pin * Ci + 2 * pin * M + 2 * pout * M + 2 * pout * C, 0, {B, C, H, W}};
                if (s.projects()) {
                    c.params += C * Ci + 2 * C;
                    c.mac_flops += 2 * pout * C * Ci;
                    c.activations += pout * C;
                }
                return c;
            },
            [&](const EmbedUnit& u) {
                const std::uint64_t B = in[0], T = u.tokens, d = u.dim, pd = u.in_channels * u.patch * u.patch;
                return UnitCost{d * pd + d + T * d, 2 * B * T * pd * d, B * T * pd, 0, {B, T, d}};
            },
            [&](const VitBlockUnit& u) {
                const std::uint64_t B = in[0], T = in[1], d = u.shape.dim, H = u.shape.heads, f = u.shape.mlp_dim;
                const std::uint64_t tok = B * T;
                return UnitCost{param_count_vit(d, f, {}, false).P,
                                2 * tok * 4 * d * d + 2 * 2 * B * T * T * d + 2 * 2 * tok * d * f,
                                8 * tok * d + B * H * T * T + 2 * tok * f, 0, Shape(in)};
            },
            [&](const CnnComputeUnit& u) {
                const auto& l = u.layer;
                const std::uint64_t B = in[0], C = l.channels, q = l.kernel, o = B * C * in[2] * in[3];
                const std::uint64_t n = l.synth_rows(), plane = B * in[2] * in[3];
                UnitCost c{l.coeffs.trainable_count() + 2 * C, 0, 0, 0, Shape(in)};
                // synthesized kernel plus both normalized anchors; coefficients; own BN statistics
                c.aux = 3 * n * n * q * q + 2 * l.coeffs.groups + 2 * C;
                if (l.kind == CnnKind::basic) {
                    c.mac_flops = 2 * o * C * q * q;
                    c.activations = 3 * o;
                } else {
                    const std::uint64_t M = l.mid;
                    c.mac_flops = 2 * plane * (M * C + M * M * q * q + C * M);
                    c.activations = 3 * o + 2 * plane * M;
                }
                return c;
            },
            [&](const VitComputeUnit& u) {
                const auto& l = u.layer;
                const std::uint64_t tok = in[0] * in[1], d = l.dim, f = l.mlp_dim;
                UnitCost c{l.use_attn ? l.coeffs.trainable_count() : 0, 0, 0, 0, Shape(in)};
                if (l.use_attn) {
                    c.mac_flops += 2 * tok * d * d;
                    c.activations += l.synth == VitSynth::headwise ? 2 * tok * d : tok * d;
                    c.aux += (l.synth == VitSynth::headwise ? 3 * d * d : d * d) + d + 2 * l.coeffs.groups;
                }
                if (l.use_mlp) {
                    c.mac_flops += 2 * 2 * tok * d * f;
                    c.activations += 2 * tok * d + 2 * tok * f;
                    c.aux += 2 * 3 * d * f + f + d;
                }
                return c;
            },
            [&](const HeadUnit& u) {
                const std::uint64_t B = in[0], F = u.features, K = u.classes;
                UnitCost c{F * K + K, 2 * B * F * K, B * F, 0, {B, K}};
                if (u.tokens) {
                    c.params += 2 * F;
                    c.activations += in[0] * in[1] * F;
                }
                return c;
            },
        },
        unit);
}

template <typename T>
std::vector<UnitCost> unit_costs(const Network<T>& net, std::size_t batch) {
    std::vector<UnitCost> out;
    Shape s = net.input_shape(batch);
    for (const auto& u : net.units) {
        out.push_back(unit_cost(u, s));
        s = out.back().out;
    }
    return out;
}

template <typename T>
std::uint64_t analytic_param_count(const Network<T>& net) {
    std::uint64_t n = 0;
    for (const auto& c : unit_costs(net, 1)) n += c.params;
    return n;
}

/// Trainable-parameter count by walking the parameter registry.
template <typename T>
std::uint64_t registry_param_count(const Network<T>& net) {
    return net.store.trainable_count();
}

/// (P, a) for the planned sites of `spec` from the closed-form block formulas.
inline std::vector<ParamPair> site_param_pairs(const NetworkSpec& spec) {
    std::vector<ParamPair> out;
    const auto plan = stage_removal_plan(spec);
    for (std::size_t s = 0; s < plan.stages.size(); ++s) {
        for (std::size_t r : plan.stages[s].removed) {
            (void)r;
            switch (spec.family) {
                case Family::resnet_basic: {
                    const auto C = spec.stages[s].channels;
                    out.push_back(param_count_basic(C, spec.kernel,
                                                    CoeffSpec{spec.per_group_coeffs ? C : 1, spec.neighbors,
                                                              spec.tied_coeffs}));
                    break;
                }
                case Family::resnet_bottleneck: {
                    const auto M = spec.stage_mid(s);
                    out.push_back(param_count_bottleneck(spec.stages[s].channels, M, spec.kernel,
                                                         CoeffSpec{spec.per_group_coeffs ? M : 1, spec.neighbors,
                                                                   spec.tied_coeffs}));
                    break;
                }
                case Family::vit: {
                    const std::size_t g =
                        spec.per_group_coeffs && spec.vit_synth == VitSynth::headwise ? spec.heads : 1;
                    out.push_back(param_count_vit(spec.dim, spec.mlp_dim, CoeffSpec{g, spec.neighbors, spec.tied_coeffs},
                                                  spec.vit_use_attn));
                    break;
                }
            }
        }
    }
    return out;
}

// ---- measured FLOPs ---------------------------------------------------------

struct FlopConvention {
    bool include_elementwise = false;

    std::uint64_t count(const FlopStats& s) const { return s.mac + (include_elementwise ? s.elementwise : 0); }
};

/// Per-unit FLOP tallies from an eval-mode forward on a zero batch.
template <typename T>
std::vector<FlopStats> measure_unit_flops(const Network<T>& net, std::size_t batch) {
    std::vector<FlopStats> per_unit;
    Tape<T> tape;
    net.run_eval(tape, tape.constant(Tensor<T>(net.input_shape(batch))), 0, net.units.size(), &per_unit);
    return per_unit;
}

// ---- report -----------------------------------------------------------------

struct SiteCost {
    std::string prefix;
    ParamPair params;
    std::uint64_t block_flops = 0, layer_flops = 0, synth_flops = 0;
    double eta = 0;
    std::uint64_t block_act = 0, layer_act = 0;  // bytes
};

struct CostReport {
    std::uint64_t params_e2e = 0, params_repl = 0, params_remove_only = 0;
    std::uint64_t registry_e2e = 0, registry_repl = 0;  // brute-force counts
    std::vector<SiteCost> sites;
    std::uint64_t flops_e2e = 0, flops_repl = 0, flops_synth = 0;  // per batch
    std::uint64_t act_mem_e2e = 0, act_mem_repl = 0, mem_aux = 0;  // bytes, model estimate
    std::uint64_t act_mem_bound = 0;  // M_e2e - sum(S_r - S~_r) + M_aux
    double ratio_params = 1, ratio_flops = 1;
    std::size_t batch = 1;
};

namespace detail {

inline void require_consistent(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorKind::internal, "cost accounting inconsistency: " + what);
}

}  // namespace detail

/// Builds the e2e and repl networks of `spec` (same seed) and compares them.
/// Throws if the analytic and registry counts disagree.
template <typename T = double>
CostReport cost_report(NetworkSpec spec, std::size_t batch = 1, FlopConvention conv = {}, std::uint64_t seed = 0) {
    spec.method = Method::e2e;
    const auto e2e = build_network<T>(spec, seed);
    spec.method = Method::repl;
    const auto repl = build_network<T>(spec, seed);

    CostReport r;
    r.batch = batch;
    const auto ce = unit_costs(e2e, batch), cr = unit_costs(repl, batch);
    r.registry_e2e = registry_param_count(e2e);
    r.registry_repl = registry_param_count(repl);
    const auto sum_params = [](const std::vector<UnitCost>& v) {
        return std::accumulate(v.begin(), v.end(), std::uint64_t{0},
                               [](std::uint64_t a, const UnitCost& c) { return a + c.params; });
    };
    r.params_e2e = sum_params(ce);

    const auto pairs = site_param_pairs(spec);
    detail::require_consistent(pairs.size() == e2e.sites.size(), "site count");
    std::uint64_t saving = 0, removed = 0;
    for (const auto& p : pairs) {
        saving += p.saving();
        removed += p.P;
    }
    r.params_repl = r.params_e2e - saving;
    r.params_remove_only = r.params_e2e - removed;
    detail::require_consistent(r.registry_e2e == r.params_e2e, "e2e registry " + std::to_string(r.registry_e2e) +
                                                                   " vs analytic " + std::to_string(r.params_e2e));
    detail::require_consistent(r.registry_repl == r.params_repl, "repl registry " + std::to_string(r.registry_repl) +
                                                                     " vs analytic " + std::to_string(r.params_repl));
    detail::require_consistent(sum_params(cr) == r.params_repl, "repl unit enumeration");

    const auto fe = measure_unit_flops(e2e, batch), fr = measure_unit_flops(repl, batch);
    for (const auto& s : fe) r.flops_e2e += conv.count(s);
    for (const auto& s : fr) {
        r.flops_repl += conv.count(s) + s.synth;
        r.flops_synth += s.synth;
    }

    const std::uint64_t bytes = sizeof(T);
    for (const auto& c : ce) r.act_mem_e2e += c.activations * bytes;
    for (const auto& c : cr) {
        r.act_mem_repl += c.activations * bytes;
        r.mem_aux += c.aux * bytes;
    }
    std::uint64_t delta = 0;
    for (std::size_t i = 0; i < e2e.sites.size(); ++i) {
        const auto ue = e2e.sites[i].unit, ur = repl.sites[i].unit;
        SiteCost sc;
        sc.prefix = unit_name(repl.units[ur]);
        sc.params = pairs[i];
        sc.block_flops = conv.count(fe[ue]);
        sc.layer_flops = conv.count(fr[ur]);
        sc.synth_flops = fr[ur].synth;
        sc.eta = sc.block_flops ? double(sc.layer_flops) / double(sc.block_flops) : 0.0;
        sc.block_act = ce[ue].activations * bytes;
        sc.layer_act = cr[ur].activations * bytes;
        delta += sc.block_act - sc.layer_act;
        r.sites.push_back(sc);
    }
    r.act_mem_bound = r.act_mem_e2e - delta + r.mem_aux;
    r.act_mem_repl += r.mem_aux;
    r.ratio_params = double(r.params_repl) / double(r.params_e2e);
    r.ratio_flops = double(r.flops_repl) / double(r.flops_e2e);
    return r;
}

// ---- interval trade-off -------------------------------------------------------

struct TradeoffRow {
    std::size_t K = 0;
    double cost_ratio = 1;       // C(K) / C0 = 1 - (1 - eta) / K
    double planned_ratio = 1;    // same with the exact removed fraction of the plan
    double bias_proxy = 0;       // Pi_max * max(H_max, 1) * (N / K) * eps_bar, gradient constant omitted
    std::size_t removed = 0;
};

struct TradeoffInputs {
    double eta_bar = 0.5;
    double eps_bar = 0;
    double pi_max = 1;
    double h_max = 1;
};

inline std::vector<TradeoffRow> interval_tradeoff(NetworkSpec spec, const std::vector<std::size_t>& ks,
                                                  const TradeoffInputs& in) {
    std::vector<TradeoffRow> rows;
    for (std::size_t k : ks) {
        if (k < 2) throw Error(ErrorKind::config, "interval_tradeoff: K must be >= 2, got " + std::to_string(k));
        spec.K = k;
        const auto plan = stage_removal_plan(spec);
        const double n = double(plan.block_count());
        TradeoffRow row;
        row.K = k;
        row.removed = plan.removed_count();
        row.cost_ratio = 1.0 - (1.0 - in.eta_bar) / double(k);
        row.planned_ratio = 1.0 - (1.0 - in.eta_bar) * double(row.removed) / n;
        row.bias_proxy = in.pi_max * std::max(in.h_max, 1.0) * (n / double(k)) * in.eps_bar;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace repl
