#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "repl/builder.hpp"
#include "repl/grad_check.hpp"
#include "support.hpp"

using namespace repl;
using repl::testing::random_labels;
using repl::testing::random_tensor;
using T = double;

namespace {

using Sizes = std::vector<std::size_t>;

NetworkSpec with_method(NetworkSpec s, Method m, std::size_t K = 4) {
    s.method = m;
    s.K = K;
    return s;
}

NetworkSpec three_stage_basic(std::size_t blocks) {
    NetworkSpec s = repl::testing::tiny_basic();
    s.stem_channels = 4;
    s.stages = {StageSpec{blocks, 4, 0, 1}, StageSpec{blocks, 6, 0, 2}, StageSpec{blocks, 8, 0, 2}};
    return s;
}

double loss_at(const Network<T>& net, const Tensor<T>& x, const std::vector<int>& y) {
    Tape<T> tape;
    return ad::cross_entropy(tape.constant(net.predict(x)), std::span<const int>(y)).value().item();
}

}  // namespace

// ---- removal plans ------------------------------------------------------------------

TEST(RemovalSet, Examples) {
    EXPECT_EQ(removal_set(12, 4), (Sizes{4, 8}));
    EXPECT_EQ(removal_set(3, 4), Sizes{});
    EXPECT_EQ(removal_set(16, 4), (Sizes{4, 8, 12}));
    EXPECT_EQ(removal_set(5, 2), (Sizes{2, 4}));
    EXPECT_EQ(removal_set(18, 4), (Sizes{4, 8, 12, 16}));
}

TEST(RemovalSet, IntervalBelowTwoRejected) {
    try {
        removal_set(10, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
    EXPECT_THROW(removal_set(10, 0), Error);
}

// Property: sites are multiples of K, the last block is kept and no two
// removed blocks are adjacent.
TEST(RemovalSet, StructuralProperties) {
    for (std::size_t L = 1; L <= 40; ++L) {
        for (std::size_t K = 2; K <= 9; ++K) {
            const auto r = removal_set(L, K);
            EXPECT_EQ(r.size(), (L - 1) / K) << L << "," << K;
            for (std::size_t i = 0; i < r.size(); ++i) {
                EXPECT_EQ(r[i] % K, 0u);
                EXPECT_LT(r[i], L);
                EXPECT_GE(r[i], 2u);
                if (i) {
                    EXPECT_GE(r[i] - r[i - 1], 2u);
                }
            }
        }
    }
}

TEST(StagePlan, ThreeStagesOfEighteen) {
    NetworkSpec s = three_stage_basic(18);
    const auto plan = stage_removal_plan(s);
    EXPECT_EQ(plan.removed_count(), 12u);
    EXPECT_EQ(plan.block_count(), 54u);
    EXPECT_DOUBLE_EQ(plan.removed_fraction(), 12.0 / 54.0);
    for (std::size_t st = 0; st < 3; ++st) EXPECT_EQ(plan.stages[st].removed, (Sizes{4, 8, 12, 16}));
    EXPECT_TRUE(plan.is_removed(1, 8));
    EXPECT_FALSE(plan.is_removed(1, 9));
}

TEST(StagePlan, VitIsOneStage) {
    NetworkSpec s = repl::testing::tiny_vit(12);
    const auto plan = stage_removal_plan(s);
    ASSERT_EQ(plan.stages.size(), 1u);
    EXPECT_EQ(plan.stages[0].removed, (Sizes{4, 8}));
}

// ---- assembly ----------------------------------------------------------------------

TEST(Build, SmokeSiteAndAnchors) {
    auto net = build_network<T>(with_method(repl::testing::tiny_basic(5), Method::repl), 1);
    ASSERT_EQ(net.sites.size(), 1u);
    const auto& site = net.sites[0];
    EXPECT_EQ(site.stage, 0u);
    EXPECT_EQ(site.block, 4u);
    EXPECT_EQ(unit_name(net.units[site.unit]), "s1.b4");
    EXPECT_TRUE(is_computing(net.units[site.unit]));
    const auto anchors = site_anchors(net, site);
    ASSERT_EQ(anchors.size(), 2u);
    EXPECT_EQ(anchors[0].key, "s1.b3.conv2");
    EXPECT_EQ(anchors[1].key, "s1.b5.conv1");
    for (const auto& a : anchors) EXPECT_EQ(net.store.info(a).group, ParamGroup::retained);
    EXPECT_FALSE(net.store.contains(ParamId("s1.b4.conv1")));
}

TEST(Build, UnitSequence) {
    auto e2e = build_network<T>(with_method(repl::testing::tiny_basic(5), Method::e2e), 1);
    auto rem = build_network<T>(with_method(repl::testing::tiny_basic(5), Method::remove_only), 1);
    auto rep = build_network<T>(with_method(repl::testing::tiny_basic(5), Method::repl), 1);
    EXPECT_EQ(e2e.units.size(), 7u);  // stem, 5 blocks, head
    EXPECT_EQ(rem.units.size(), 6u);
    EXPECT_EQ(rep.units.size(), 7u);
    EXPECT_EQ(unit_name(rem.units[4]), "s1.b5");
    EXPECT_EQ(rem.plan.removed_count(), 1u);
}

TEST(Build, ReplacementShrinksParameterCount) {
    for (auto spec : {repl::testing::tiny_basic(9), repl::testing::tiny_bottleneck(9), repl::testing::tiny_vit(9)}) {
        auto e2e = build_network<T>(with_method(spec, Method::e2e), 2);
        auto rep = build_network<T>(with_method(spec, Method::repl), 2);
        auto rem = build_network<T>(with_method(spec, Method::remove_only), 2);
        EXPECT_LT(rep.store.trainable_count(), e2e.store.trainable_count()) << to_string(spec.family);
        EXPECT_LT(rem.store.trainable_count(), rep.store.trainable_count()) << to_string(spec.family);
    }
}

TEST(Build, EmptyPlanIsIdentity) {
    for (auto spec : {repl::testing::tiny_basic(3), repl::testing::tiny_bottleneck(3), repl::testing::tiny_vit(3)}) {
        auto e2e = build_network<T>(with_method(spec, Method::e2e), 3);
        auto rep = build_network<T>(with_method(spec, Method::repl), 3);
        EXPECT_EQ(rep.plan.removed_count(), 0u);
        EXPECT_TRUE(rep.sites.empty());
        EXPECT_EQ(rep.store.trainable_count(), e2e.store.trainable_count());
        const auto x = random_tensor(e2e.input_shape(2), 4);
        EXPECT_EQ(rep.predict(x), e2e.predict(x));
    }
}

// An interval longer than every stage removes nothing.
TEST(Build, HugeIntervalMatchesEndToEnd) {
    auto spec = three_stage_basic(4);
    auto e2e = build_network<T>(with_method(spec, Method::e2e, 4), 5);
    auto rep = build_network<T>(with_method(spec, Method::repl, 1000), 5);
    EXPECT_EQ(rep.store.params().size(), e2e.store.params().size());
    for (const auto& [id, e] : e2e.store.params()) EXPECT_EQ(rep.store.value(id), e.value) << id.key;
    const auto x = random_tensor(e2e.input_shape(3), 6);
    EXPECT_EQ(rep.predict(x), e2e.predict(x));
}

TEST(Build, SameSeedSameNetwork) {
    auto a = build_network<T>(with_method(repl::testing::tiny_vit(), Method::repl), 9);
    auto b = build_network<T>(with_method(repl::testing::tiny_vit(), Method::repl), 9);
    auto c = build_network<T>(with_method(repl::testing::tiny_vit(), Method::repl), 10);
    const auto x = random_tensor(a.input_shape(2), 11);
    EXPECT_EQ(a.predict(x), b.predict(x));
    EXPECT_NE(a.predict(x), c.predict(x));
}

TEST(Build, ZeroParametersGiveHeadBias) {
    for (auto spec : {repl::testing::tiny_basic(), repl::testing::tiny_bottleneck(), repl::testing::tiny_vit()}) {
        auto net = build_network<T>(with_method(spec, Method::repl), 12);
        for (const auto& [id, e] : net.store.params()) net.store.mutable_value(id).fill(0);
        const auto bias = Tensor<T>({spec.classes}, std::vector<T>{0.3, -1.2, 2.5});
        net.store.mutable_value("head.b") = bias;
        const auto logits = net.predict(random_tensor(net.input_shape(4), 13));
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t k = 0; k < spec.classes; ++k)
                EXPECT_NEAR(logits[b * spec.classes + k], bias[k], 1e-12) << to_string(spec.family);
    }
}

TEST(Build, EvalOutputIsPermutationEquivariant) {
    for (auto spec : {repl::testing::tiny_basic(), repl::testing::tiny_bottleneck(), repl::testing::tiny_vit()}) {
        auto net = build_network<T>(with_method(spec, Method::repl), 14);
        repl::testing::jitter_params(net, 15, 0.05);
        repl::testing::randomize_running_stats(net, 16);
        const std::size_t B = 5;
        const auto x = random_tensor(net.input_shape(B), 17);
        const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
        Tensor<T> xp(x.shape());
        const std::size_t per = x.numel() / B;
        for (std::size_t i = 0; i < B; ++i)
            std::copy_n(x.data().begin() + perm[i] * per, per, xp.data().begin() + i * per);
        const auto y = net.predict(x), yp = net.predict(xp);
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t k = 0; k < spec.classes; ++k)
                EXPECT_NEAR(yp[i * spec.classes + k], y[perm[i] * spec.classes + k], 1e-12);
    }
}

TEST(Build, PredictLeavesRunningStatsUntouched) {
    auto net = build_network<T>(with_method(repl::testing::tiny_basic(), Method::repl), 18);
    repl::testing::randomize_running_stats(net, 19);
    const auto before = net.store.buffers();
    net.predict(random_tensor(net.input_shape(3), 20));
    for (const auto& [id, b] : before) EXPECT_EQ(net.store.buffer(id), b);
}

TEST(Build, InputShapeChecked) {
    auto net = build_network<T>(repl::testing::tiny_basic(), 21);
    try {
        net.predict(Tensor<T>({2, 3, 6, 6}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
}

// ---- gradients ----------------------------------------------------------------------

class NetworkGradient : public ::testing::TestWithParam<int> {};

// Eval mode keeps the loss a fixed function of the parameters. Differences
// are taken on the frozen twin: anchors enter the computing layers through a
// stop-gradient, so the live anchors must only be seen by their own blocks.
TEST_P(NetworkGradient, MatchesFiniteDifferences) {
    NetworkSpec spec = GetParam() == 0   ? repl::testing::tiny_basic(5, 3, 4)
                       : GetParam() == 1 ? repl::testing::tiny_bottleneck(5, 4, 2)
                                         : repl::testing::tiny_vit();
    auto net = build_network<T>(with_method(spec, Method::repl), 22);
    repl::testing::jitter_params(net, 23, 0.05);
    repl::testing::randomize_running_stats(net, 24);
    net.eval();
    const auto x = random_tensor(net.input_shape(2), 25);
    const auto y = random_labels(2, spec.classes, 25);
    const auto grads = net.gradients(x, y);
    auto twin = frozen_anchor_twin(net);
    const double h = 1e-6;
    std::size_t bad = 0, checked = 0;
    for (const auto& [id, e] : net.store.params()) {
        if (!e.info.trainable || is_key_bias(id)) continue;
        auto& w = twin.store.mutable_value(id);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double fp = loss_at(twin, x, y);
            w[i] = orig - h;
            const double fm = loss_at(twin, x, y);
            w[i] = orig;
            const double n = (fp - fm) / (2 * h), a = grads.at(id)[i];
            const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-7});
            ++checked;
            if (rel > 1e-4) ++bad;
        }
    }
    EXPECT_GT(checked, 100u);
    EXPECT_EQ(bad, 0u);
}

INSTANTIATE_TEST_SUITE_P(Families, NetworkGradient, ::testing::Values(0, 1, 2));

// ---- parameter partition --------------------------------------------------------------

TEST(Partition, GroupsMatchRoles) {
    for (auto spec : {repl::testing::tiny_basic(9), repl::testing::tiny_bottleneck(9), repl::testing::tiny_vit(9)}) {
        auto net = build_network<T>(with_method(spec, Method::repl), 26);
        std::vector<std::string> site_prefixes;
        for (const auto& s : net.sites) site_prefixes.push_back(unit_name(net.units[s.unit]) + ".");
        auto at_site = [&](const std::string& k) {
            return std::any_of(site_prefixes.begin(), site_prefixes.end(),
                               [&](const std::string& p) { return k.rfind(p, 0) == 0; });
        };
        std::size_t total = 0;
        for (const auto& [id, e] : net.store.params()) {
            total += e.value.numel();
            if (id.key.rfind("head.", 0) == 0) {
                EXPECT_EQ(e.info.group, ParamGroup::head) << id.key;
            } else if (at_site(id.key)) {
                EXPECT_EQ(e.info.group, ParamGroup::computing) << id.key;
            } else {
                EXPECT_EQ(e.info.group, ParamGroup::retained) << id.key;
            }
        }
        EXPECT_EQ(net.store.count_in_group(ParamGroup::frozen), 0u);
        EXPECT_EQ(net.store.count_in_group(ParamGroup::head) + net.store.count_in_group(ParamGroup::computing) +
                      net.store.count_in_group(ParamGroup::retained),
                  total);
    }
}

TEST(Partition, SitesNeverCrossStages) {
    auto spec = with_method(three_stage_basic(9), Method::repl);
    auto net = build_network<T>(spec, 27);
    EXPECT_EQ(net.sites.size(), 6u);
    for (const auto& site : net.sites) {
        const std::string stage = "s" + std::to_string(site.stage + 1) + ".";
        for (const auto& a : site_anchors(net, site)) EXPECT_EQ(a.key.rfind(stage, 0), 0u) << a.key;
    }
}

TEST(Partition, IntervalOneRejected) {
    try {
        build_network<T>(with_method(repl::testing::tiny_basic(), Method::repl, 1), 28);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
}

TEST(Partition, EvenKernelRejected) {
    auto spec = repl::testing::tiny_basic();
    spec.kernel = 2;
    EXPECT_THROW(build_network<T>(spec, 29), Error);
}

TEST(Partition, BottleneckWidthChangeNeedsLongerInterval) {
    NetworkSpec spec = repl::testing::tiny_bottleneck(5, 8, 4);
    spec.stages = {StageSpec{3, 8, 4, 1}, StageSpec{3, 16, 4, 1}};
    EXPECT_THROW(build_network<T>(with_method(spec, Method::repl, 2), 30), Error);
    EXPECT_NO_THROW(build_network<T>(with_method(spec, Method::repl, 3), 30));
}

// ---- variants -------------------------------------------------------------------------

TEST(Variants, FrozenTwinMatchesForward) {
    auto net = build_network<T>(with_method(repl::testing::tiny_vit(), Method::repl), 31);
    auto twin = frozen_anchor_twin(net);
    const auto x = random_tensor(net.input_shape(2), 32);
    EXPECT_EQ(twin.predict(x), net.predict(x));
    std::size_t frozen = 0;
    for (const auto& [id, e] : twin.store.params())
        if (e.info.group == ParamGroup::frozen) {
            ++frozen;
            EXPECT_FALSE(e.info.trainable);
        }
    std::size_t anchors = 0;
    for (const auto& site : net.sites) anchors += site_anchors(net, site).size();
    EXPECT_EQ(frozen, anchors);
    EXPECT_EQ(twin.store.trainable_count(), net.store.trainable_count());
}

TEST(Variants, HybridWithZeroSitesIsEndToEnd) {
    auto spec = repl::testing::tiny_basic(9);
    auto e2e = build_network<T>(with_method(spec, Method::e2e), 33);
    auto rep = build_network<T>(with_method(spec, Method::repl), 34);
    const auto x = random_tensor(e2e.input_shape(2), 35);
    EXPECT_EQ(hybrid_network(e2e, rep, 0).predict(x), e2e.predict(x));
    auto h = hybrid_network(e2e, rep, 2);
    for (const auto& s : h.sites) EXPECT_TRUE(is_computing(h.units[s.unit]));
    EXPECT_THROW(hybrid_network(rep, e2e, 1), Error);
}
