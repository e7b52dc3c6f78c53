#include <gtest/gtest.h>

#include <cmath>

#include "repl/cost_model.hpp"
#include "support.hpp"

using namespace repl;
using T = double;

namespace {

NetworkSpec basic_spec(std::size_t blocks, std::size_t C, std::size_t hw) {
    NetworkSpec s = repl::testing::tiny_basic(blocks, C, hw);
    s.stem_channels = C;
    return s;
}

NetworkSpec resnet110_shape() {
    NetworkSpec s = repl::testing::tiny_basic();
    s.in_channels = 3;
    s.height = s.width = 8;
    s.classes = 10;
    s.stem_channels = 16;
    s.stages = {StageSpec{18, 16, 0, 1}, StageSpec{18, 32, 0, 2}, StageSpec{18, 64, 0, 2}};
    return s;
}

NetworkSpec vit_eta_spec(VitSynth synth, bool mlp) {
    NetworkSpec s;
    s.family = Family::vit;
    s.in_channels = 3;
    s.height = s.width = 32;
    s.patch = 4;  // T = 64
    s.dim = 32;
    s.heads = 4;
    s.mlp_dim = 128;
    s.depth = 5;
    s.classes = 10;
    s.vit_synth = synth;
    s.vit_use_mlp = mlp;
    return s;
}

}  // namespace

// ---- closed-form block counts ----------------------------------------------------------

TEST(BlockParams, BasicExample) {
    const auto p = param_count_basic(16, 3);
    EXPECT_EQ(p.P, 4672u);
    EXPECT_EQ(p.a, 64u);
    EXPECT_LE(double(p.a) / double(p.P), 2.0 / (16.0 * 9.0));
}

TEST(BlockParams, BottleneckExample) {
    const auto p = param_count_bottleneck(256, 64, 3);
    EXPECT_EQ(p.P, 70400u);
    EXPECT_EQ(p.a, 640u);
    EXPECT_EQ(p.saving(), 69760u);
    EXPECT_EQ(p.saving(), 2u * 256 * 64 + 64u * 64 * 9 + 2u * 64);
}

TEST(BlockParams, VitHeadwiseWithMlpFusion) {
    const auto p = param_count_vit(192, 768, CoeffSpec{3}, true);
    EXPECT_EQ(p.a, 6u);
    EXPECT_EQ(p.P, 12u * 192 * 192 + 13u * 192);
    EXPECT_EQ(param_count_vit(192, 768, CoeffSpec{1}, true).a, 2u);
    EXPECT_EQ(param_count_vit(192, 768, CoeffSpec{1, NeighborUse::both, true}, true).a, 1u);
    EXPECT_EQ(param_count_vit(192, 768, CoeffSpec{3}, false).a, 0u);
}

TEST(BlockParams, SavingAlwaysPositive) {
    for (std::uint64_t C : {1u, 2u, 4u, 16u, 64u})
        for (std::uint64_t q : {1u, 3u, 5u}) {
            EXPECT_GT(param_count_basic(C, q).P, param_count_basic(C, q).a) << C << "," << q;
            for (std::uint64_t B : {std::uint64_t{1}, C / 4 + 1, C})
                EXPECT_GT(param_count_bottleneck(C, B, q).P, param_count_bottleneck(C, B, q).a);
        }
    for (std::uint64_t d : {4u, 16u, 64u}) EXPECT_GT(param_count_vit(d, 4 * d, CoeffSpec{4}, true).saving(), 0u);
}

// ---- network counts ------------------------------------------------------------------------

TEST(NetworkParams, RegistryEqualsAnalytic) {
    std::vector<NetworkSpec> specs{resnet110_shape(), repl::testing::tiny_bottleneck(9), repl::testing::tiny_vit(9),
                                   vit_eta_spec(VitSynth::scalar, false)};
    auto three = repl::testing::tiny_bottleneck(6, 8, 2);
    three.stages = {StageSpec{6, 8, 2, 1}, StageSpec{6, 16, 4, 2}};
    specs.push_back(three);
    for (auto spec : specs) {
        for (Method m : {Method::e2e, Method::remove_only, Method::repl}) {
            spec.method = m;
            spec.K = 3;
            const auto net = build_network<T>(spec, 1);
            EXPECT_EQ(analytic_param_count(net), registry_param_count(net)) << to_string(spec.family) << " "
                                                                            << to_string(m);
        }
        const auto r = cost_report<T>(spec);
        EXPECT_EQ(r.registry_e2e, r.params_e2e);
        EXPECT_EQ(r.registry_repl, r.params_repl);
        EXPECT_LT(r.params_repl, r.params_e2e);
        EXPECT_LT(r.params_remove_only, r.params_repl);
    }
}

TEST(NetworkParams, ResNet110ShapeSites) {
    const auto r = cost_report<T>(resnet110_shape());
    ASSERT_EQ(r.sites.size(), 12u);
    EXPECT_EQ(r.sites[0].params.P, param_count_basic(16, 3).P);
    EXPECT_EQ(r.sites[11].params.P, param_count_basic(64, 3).P);
    std::uint64_t saving = 0;
    for (const auto& s : r.sites) saving += s.params.saving();
    EXPECT_EQ(r.params_e2e - r.params_repl, saving);
}

TEST(NetworkParams, EmptyPlanGivesEqualCounts) {
    const auto r = cost_report<T>(basic_spec(3, 4, 6));
    EXPECT_TRUE(r.sites.empty());
    EXPECT_EQ(r.params_repl, r.params_e2e);
    EXPECT_EQ(r.flops_repl, r.flops_e2e);
    EXPECT_EQ(r.act_mem_repl, r.act_mem_e2e);
}

// Twelve identical blocks with K = 4: two sites.
TEST(NetworkParams, HomogeneousRatio) {
    const std::size_t C = 8;
    const auto r = cost_report<T>(basic_spec(12, C, 6));
    ASSERT_EQ(r.sites.size(), 2u);
    const auto pair = param_count_basic(C, 3);
    const double blocks = 12.0 * double(pair.P);
    const double exact_blocks = (blocks - 2.0 * double(pair.saving())) / blocks;
    EXPECT_NEAR(exact_blocks, 1.0 - (2.0 / 12.0) * (1.0 - double(pair.a) / double(pair.P)), 1e-15);
    // stem and head only dilute the saving
    const double approx = 1.0 - 0.25 * (1.0 - double(pair.a) / double(pair.P));
    EXPECT_GT(r.ratio_params, exact_blocks);
    EXPECT_GT(r.ratio_params, approx);
    EXPECT_LT(r.ratio_params, 1.0);
}

// ---- FLOPs ------------------------------------------------------------------------------------

TEST(Flops, BasicEtaIsExactlyHalf) {
    for (std::size_t hw : {4u, 6u, 9u}) {
        const auto r = cost_report<T>(basic_spec(5, 6, hw), 2);
        ASSERT_EQ(r.sites.size(), 1u);
        EXPECT_EQ(r.sites[0].block_flops, 2 * r.sites[0].layer_flops);
        EXPECT_EQ(r.sites[0].eta, 0.5);
    }
}

TEST(Flops, VitEtaNearClosedForm) {
    const double tokens = 64, d = 32, eta = 1.0 / (12.0 + 2.0 * tokens / d);
    EXPECT_DOUBLE_EQ(eta, 0.0625);
    for (VitSynth synth : {VitSynth::scalar, VitSynth::headwise}) {
        const auto r = cost_report<T>(vit_eta_spec(synth, false));
        ASSERT_EQ(r.sites.size(), 1u);
        EXPECT_LE(std::abs(r.sites[0].eta - eta) / eta, 0.05) << r.sites[0].eta;
    }
}

TEST(Flops, VitEtaNearClosedFormAcrossShapes) {
    for (std::size_t d : {16u, 32u, 64u}) {
        for (std::size_t side : {16u, 32u}) {
            auto spec = vit_eta_spec(VitSynth::scalar, false);
            spec.dim = d;
            spec.mlp_dim = 4 * d;
            spec.height = spec.width = side;
            const double tokens = double(spec.tokens()), eta = 1.0 / (12.0 + 2.0 * tokens / double(d));
            const auto r = cost_report<T>(spec);
            EXPECT_LE(std::abs(r.sites[0].eta - eta) / eta, 0.05) << d << "," << tokens;
        }
    }
}

TEST(Flops, SynthesisCostIndependentOfResolution) {
    const auto small = cost_report<T>(basic_spec(5, 16, 8)), large = cost_report<T>(basic_spec(5, 16, 32));
    EXPECT_GT(small.flops_synth, 0u);
    EXPECT_EQ(small.flops_synth, large.flops_synth);
    EXPECT_GE(small.flops_synth, 16u * 16u * 9u);
    const auto narrow = cost_report<T>(basic_spec(5, 8, 8));
    EXPECT_GT(double(small.flops_synth) / double(narrow.flops_synth), 3.5);
    EXPECT_LT(small.flops_e2e, large.flops_e2e);
}

TEST(Flops, ReplacementCountsFewerFlops) {
    for (auto spec : {basic_spec(9, 4, 6), repl::testing::tiny_vit(9)}) {
        const auto r = cost_report<T>(spec, 2);
        EXPECT_LT(r.flops_repl, r.flops_e2e) << to_string(spec.family);
        EXPECT_LT(r.ratio_flops, 1.0);
    }
}

// The bottleneck computing layer still runs the borrowed reduction and
// expansion; only the middle kernel is synthesized.
TEST(Flops, BottleneckKeepsAllThreeConvolutions) {
    const auto r = cost_report<T>(repl::testing::tiny_bottleneck(9), 2);
    for (const auto& s : r.sites) {
        EXPECT_EQ(s.eta, 1.0);
        EXPECT_GT(s.synth_flops, 0u);
    }
    EXPECT_EQ(r.flops_repl, r.flops_e2e + r.flops_synth);
}

// The tape's counter and the closed-form per-unit table are independent.
TEST(Flops, MeasuredMatchesAnalyticPerUnit) {
    for (auto spec : {basic_spec(9, 4, 6), repl::testing::tiny_bottleneck(9), repl::testing::tiny_vit(9)}) {
        for (Method m : {Method::e2e, Method::remove_only, Method::repl}) {
            spec.method = m;
            const auto net = build_network<T>(spec, 2);
            const auto measured = measure_unit_flops(net, 3);
            const auto analytic = unit_costs(net, 3);
            ASSERT_EQ(measured.size(), analytic.size());
            for (std::size_t i = 0; i < measured.size(); ++i)
                EXPECT_EQ(measured[i].mac, analytic[i].mac_flops) << unit_name(net.units[i]);
        }
    }
}

TEST(Flops, Additivity) {
    for (auto spec : {basic_spec(9, 4, 6), repl::testing::tiny_vit(9)}) {
        for (bool elem : {false, true}) {
            const FlopConvention conv{elem};
            const auto r = cost_report<T>(spec, 2, conv);
            spec.method = Method::repl;
            const auto units = measure_unit_flops(build_network<T>(spec, 0), 2);
            std::uint64_t sum = 0, synth = 0;
            for (const auto& u : units) {
                sum += conv.count(u);
                synth += u.synth;
            }
            EXPECT_EQ(r.flops_repl, sum + synth);
            EXPECT_EQ(r.flops_synth, synth);
        }
    }
}

TEST(Flops, ElementwiseSwitchOnlyAdds) {
    const auto a = cost_report<T>(basic_spec(5, 4, 6), 2, {false}), b = cost_report<T>(basic_spec(5, 4, 6), 2, {true});
    EXPECT_GT(b.flops_e2e, a.flops_e2e);
    EXPECT_EQ(a.sites[0].eta, 0.5);
}

// ---- activation memory -----------------------------------------------------------------------

TEST(Memory, AttentionScoresScaleQuadratically) {
    const ViTBlockShape shape{32, 4, 128};
    VitComputingLayer layer;
    layer.dim = 32;
    layer.heads = 4;
    layer.mlp_dim = 128;
    layer.use_mlp = false;
    layer.coeffs = CoeffSpec{1};
    layer.synth = VitSynth::scalar;
    const std::uint64_t B = 2, T = 16;
    const auto block = [&](std::uint64_t t) { return unit_cost(Unit{VitBlockUnit{"b", shape}}, {B, t, 32}).activations; };
    const auto repl = [&](std::uint64_t t) { return unit_cost(Unit{VitComputeUnit{layer}}, {B, t, 32}).activations; };
    // block: linear-in-T terms plus B*H*T^2 scores
    const std::uint64_t scores = B * 4 * T * T;
    EXPECT_EQ(block(2 * T) - 2 * block(T), 2 * scores);
    EXPECT_EQ(repl(2 * T), 2 * repl(T));
}

TEST(Memory, BoundHoldsAndSavingsArePositive) {
    for (auto spec : {basic_spec(9, 4, 6), repl::testing::tiny_bottleneck(9), repl::testing::tiny_vit(9)}) {
        // large enough batch that activations outweigh the synthesized weights
        const auto r = cost_report<T>(spec, 64);
        EXPECT_LE(r.act_mem_repl, r.act_mem_bound);
        if (spec.family != Family::resnet_bottleneck) {
            EXPECT_LT(r.act_mem_repl, r.act_mem_e2e) << to_string(spec.family);
        }
        for (const auto& s : r.sites) EXPECT_LT(s.layer_act, s.block_act);
    }
}

TEST(Memory, LinearInBatch) {
    const auto one = cost_report<T>(repl::testing::tiny_vit(9), 1), four = cost_report<T>(repl::testing::tiny_vit(9), 4);
    EXPECT_EQ(four.act_mem_e2e, 4 * one.act_mem_e2e);
    EXPECT_EQ(four.mem_aux, one.mem_aux);
}

// ---- interval trade-off ------------------------------------------------------------------------

TEST(Tradeoff, ClosedFormValue) {
    const auto rows = interval_tradeoff(resnet110_shape(), {4}, {});
    EXPECT_DOUBLE_EQ(rows[0].cost_ratio, 0.875);
    EXPECT_EQ(rows[0].removed, 12u);
    EXPECT_NEAR(rows[0].planned_ratio, 1.0 - 0.5 * 12.0 / 54.0, 1e-15);
}

TEST(Tradeoff, Monotone) {
    TradeoffInputs in;
    in.eps_bar = 0.01;
    in.pi_max = 2;
    in.h_max = 3;
    const auto rows = interval_tradeoff(resnet110_shape(), {2, 3, 4, 6, 9, 17, 1000}, in);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        EXPECT_GT(rows[i].cost_ratio, rows[i - 1].cost_ratio);
        EXPECT_LT(rows[i].bias_proxy, rows[i - 1].bias_proxy);
        EXPECT_LE(rows[i].removed, rows[i - 1].removed);
    }
    EXPECT_NEAR(rows.back().cost_ratio, 1.0, 1e-3);
    EXPECT_EQ(rows.back().removed, 0u);
    EXPECT_EQ(rows.back().planned_ratio, 1.0);
}

TEST(Tradeoff, IntervalBelowTwoRejected) {
    EXPECT_THROW(interval_tradeoff(resnet110_shape(), {4, 1}, {}), Error);
}
