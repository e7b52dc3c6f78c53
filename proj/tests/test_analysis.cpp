#include <gtest/gtest.h>

#include <cmath>

#include "repl/analysis.hpp"
#include "support.hpp"

using namespace repl;
using repl::testing::jitter_params;
using repl::testing::random_tensor;
using repl::testing::uniform_tensor;
using T = double;

namespace {

double frob(const Tensor<T>& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.numel(); ++i) s += double(t[i]) * double(t[i]);
    return std::sqrt(s);
}

Tensor<T> affine(const Tensor<T>& a, const Tensor<T>& b, double x, double y) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x * a[i] + y * b[i];
    return out;
}

// e2e and repl pair on the same plan; repl coefficients moved off init.
std::pair<Network<T>, Network<T>> plan_pair(NetworkSpec spec, std::uint64_t seed) {
    spec.method = Method::e2e;
    auto e2e = build_network<T>(spec, seed);
    jitter_params(e2e, seed + 1, 0.2);
    spec.method = Method::repl;
    auto rep = build_network<T>(spec, seed);
    jitter_params(rep, seed + 2, 0.3);
    e2e.eval();
    rep.eval();
    return {std::move(e2e), std::move(rep)};
}

}  // namespace

// ---- local replacement error ----------------------------------------------

TEST(LocalError, SameMapIsZero) {
    auto net = build_network<T>(repl::testing::tiny_basic(), 3);
    jitter_params(net, 4);
    net.eval();
    const auto h = site_activations(net, 2, random_tensor<T>({6, 2, 6, 6}, 5));
    auto f = [&](const Tensor<T>& x) { return run_units(net, x, 2, 3); };
    const auto r = local_replacement_error<T>(f, f, h);
    EXPECT_EQ(r.eps_hat, 0.0);
    EXPECT_GT(r.H_hat, 0.0);
    EXPECT_EQ(r.samples, 6u);
}

TEST(LocalError, ZeroBranchBlockMatchesIdentity) {
    auto net = build_network<T>(repl::testing::tiny_basic(3, 4, 6), 7);
    for (const char* k : {"s1.b2.conv2", "s1.b2.bn2.beta"}) {
        auto& w = net.store.mutable_value(ParamId(k));
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 0;
    }
    net.eval();
    const auto h = uniform_tensor<T>({5, 4, 6, 6}, 8, 0.0, 2.0);  // nonnegative: relu(h) == h
    auto block = [&](const Tensor<T>& x) { return run_units(net, x, 2, 3); };
    auto ident = [](const Tensor<T>& x) { return x; };
    EXPECT_EQ(local_replacement_error<T>(block, ident, h).eps_hat, 0.0);
}

TEST(LocalError, PlantedOffsetBruteForce) {
    const double c = 0.25;
    auto h = random_tensor<T>({8, 5}, 9, 2.0);
    for (std::size_t i = 0; i < 5; ++i) h[i] = 2.0 + i;  // every row has norm >= 1
    Tensor<T> u({5});
    u[3] = 1.0;
    auto f = [](const Tensor<T>& x) { return x; };
    auto g = [&](const Tensor<T>& x) {
        Tensor<T> y = x;
        for (std::size_t n = 0; n < x.dim(0); ++n)
            for (std::size_t j = 0; j < 5; ++j) y[n * 5 + j] += c * u[j];
        return y;
    };
    double min_norm = 1e300, max_norm = 0;
    for (std::size_t n = 0; n < 8; ++n) {
        double s = 0;
        for (std::size_t j = 0; j < 5; ++j) s += h[n * 5 + j] * h[n * 5 + j];
        min_norm = std::min(min_norm, std::sqrt(s));
        max_norm = std::max(max_norm, std::sqrt(s));
    }
    ASSERT_GE(min_norm, 1.0);
    const auto r = local_replacement_error<T>(f, g, h);
    EXPECT_NEAR(r.eps_hat, c / min_norm, 1e-15);
    EXPECT_NEAR(r.H_hat, max_norm, 1e-12);
}

// ---- telescoped deviation --------------------------------------------------

TEST(Telescoping, EmptyPlanHasNoTerms) {
    auto [e2e, rep] = plan_pair(repl::testing::tiny_basic(3), 11);
    ASSERT_TRUE(e2e.sites.empty());
    const auto r = telescoped_deviation(e2e, rep, random_tensor<T>({4, 2, 6, 6}, 12));
    EXPECT_TRUE(r.sites.empty());
    EXPECT_EQ(r.max_deviation, 0.0);
    EXPECT_EQ(r.bound, 0.0);
}

TEST(Telescoping, SingleSiteTermIsTheDeviation) {
    auto [e2e, rep] = plan_pair(repl::testing::tiny_basic(5), 13);
    ASSERT_EQ(e2e.sites.size(), 1u);
    const auto r = telescoped_deviation(e2e, rep, random_tensor<T>({6, 2, 6, 6}, 14));
    EXPECT_GT(r.max_deviation, 0.0);
    for (std::size_t i = 0; i < r.deviation.size(); ++i) EXPECT_DOUBLE_EQ(r.terms[i][0], r.deviation[i]);
}

TEST(Telescoping, TriangleAndBoundOnHundredInputs) {
    for (auto spec : {repl::testing::tiny_basic(5), repl::testing::tiny_vit(5)}) {
        spec.K = 2;
        auto [e2e, rep] = plan_pair(spec, 15);
        ASSERT_EQ(e2e.sites.size(), 2u);
        auto shape = e2e.input_shape(100);
        const auto x = random_tensor<T>(shape, 16);
        const auto r = telescoped_deviation(e2e, rep, x);
        ASSERT_EQ(r.deviation.size(), 100u);
        for (std::size_t i = 0; i < 100; ++i) {
            EXPECT_LE(r.deviation[i], (r.terms[i][0] + r.terms[i][1]) * (1 + 1e-12));
        }
        EXPECT_TRUE(r.triangle_holds);
        EXPECT_LE(r.max_deviation, r.bound * (1 + 1e-12));
        for (const auto& s : r.sites) {
            EXPECT_GE(s.eps_hat, 0.0);
            EXPECT_GE(s.H_hat, 0.0);
            EXPECT_GE(s.Pi_hat, 0.0);
        }
    }
}

TEST(Telescoping, MismatchedPlansRejected) {
    auto [e2e, rep] = plan_pair(repl::testing::tiny_basic(5), 17);
    auto spec = repl::testing::tiny_basic(9);
    spec.method = Method::repl;
    const auto other = build_network<T>(spec, 17);
    const auto x = random_tensor<T>({2, 2, 6, 6}, 18);
    EXPECT_THROW(telescoped_deviation(e2e, other, x), Error);
    EXPECT_THROW(telescoped_deviation(rep, e2e, x), Error);
}

// ---- suffix amplification --------------------------------------------------

TEST(SuffixAmplification, EmptySuffixIsIdentity) {
    auto net = build_network<T>(repl::testing::tiny_basic(), 19);
    const auto a = random_tensor<T>({5, 3}, 20), b = random_tensor<T>({5, 3}, 21);
    EXPECT_NEAR(suffix_amplification(net, net.units.size(), a, b), 1.0, 1e-15);
}

TEST(SuffixAmplification, ScaledHeadGivesThree) {
    // 1x1 spatial: pooling is the identity, so the head is the whole map.
    auto net = build_network<T>(repl::testing::tiny_basic(3, 3, 1), 22);
    auto& w = net.store.mutable_value(ParamId("head.w"));
    auto& b = net.store.mutable_value(ParamId("head.b"));
    for (std::size_t i = 0; i < 9; ++i) w[i] = (i % 4 == 0) ? 3.0 : 0.0;
    for (std::size_t i = 0; i < 3; ++i) b[i] = 0.7;
    net.eval();
    const std::size_t head = net.units.size() - 1;
    const auto a = random_tensor<T>({7, 3, 1, 1}, 23), c = random_tensor<T>({7, 3, 1, 1}, 24);
    EXPECT_NEAR(suffix_amplification(net, head, a, c), 3.0, 1e-12);
}

TEST(SuffixAmplification, ZeroDistancePairRejected) {
    auto net = build_network<T>(repl::testing::tiny_basic(), 25);
    const auto a = random_tensor<T>({2, 4, 6, 6}, 26);
    EXPECT_THROW(suffix_amplification(net, 1, a, a), Error);
}

TEST(SuffixAmplification, EmpiricalRatioBelowJacobianProxy) {
    auto net = build_network<T>(repl::testing::tiny_basic(3, 2, 4), 27);
    jitter_params(net, 28, 0.2);
    net.eval();
    for (std::uint64_t p = 0; p < 8; ++p) {
        const auto a = site_activations(net, 1, random_tensor<T>({1, 2, 4, 4}, 100 + p));
        const auto b = site_activations(net, 1, random_tensor<T>({1, 2, 4, 4}, 200 + p));
        const double emp = suffix_amplification(net, 1, a, b);
        const double proxy = jacobian_product_proxy(net, 1, a, b);
        EXPECT_GE(emp, 0.0);
        EXPECT_LE(emp, proxy * (1 + 1e-9)) << "pair " << p;
    }
}

TEST(SpectralNorm, DiagonalMatrix) {
    const std::vector<double> j{2, 0, 0, 0, -5, 0};  // [2, 3]
    EXPECT_NEAR(spectral_norm(j, 2, 3), 5.0, 1e-10);
}

// ---- coefficient recoverability --------------------------------------------

TEST(BestFit, PlantedCombinationRecovered) {
    const auto A = random_tensor<T>({4, 3, 3, 3}, 30), B = random_tensor<T>({4, 3, 3, 3}, 31);
    const auto r = best_fit_coeffs(affine(A, B, 0.3, 0.7), A, B, false);
    ASSERT_EQ(r.alpha.size(), 1u);
    EXPECT_NEAR(r.alpha[0], 0.3, 1e-8);
    EXPECT_NEAR(r.beta[0], 0.7, 1e-8);
    EXPECT_LE(r.residual, 1e-10);
    EXPECT_FALSE(r.rank_deficient);
}

TEST(BestFit, IdenticalAnchorsGiveMinimumNorm) {
    const auto W = random_tensor<T>({6, 5}, 32);
    const auto r = best_fit_coeffs(W, W, W, false);
    EXPECT_TRUE(r.rank_deficient);
    EXPECT_NEAR(r.alpha[0], 0.5, 1e-12);
    EXPECT_NEAR(r.beta[0], 0.5, 1e-12);
    EXPECT_LE(r.residual, 1e-12);
}

TEST(BestFit, OrthogonalTargetLeavesFullResidual) {
    Tensor<T> A({3, 2}), B({3, 2}), t({3, 2});
    A[0] = 1.5;
    B[2] = -2.0;
    t[4] = 0.8;
    t[5] = 0.6;
    const auto r = best_fit_coeffs(t, A, B, false);
    EXPECT_EQ(r.alpha[0], 0.0);
    EXPECT_EQ(r.beta[0], 0.0);
    EXPECT_NEAR(r.residual, frob(t), 1e-15);
}

TEST(BestFit, NeverWorseThanInitialization) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const bool normalized = s % 2 == 0;
        const Shape shape{8, 8};
        const auto A = random_tensor<T>(shape, 40 + s), B = random_tensor<T>(shape, 60 + s);
        const auto target = random_tensor<T>(shape, 80 + s);
        const auto lay = (s % 4 < 2) ? GroupLayout::whole(64) : GroupLayout::heads(shape, 2);
        const auto r = best_fit_coeffs(target, A, B, normalized, lay);
        const auto An = normalized ? normalize_linear_rows(A) : A;
        const auto Bn = normalized ? normalize_linear_rows(B) : B;
        const std::vector<double> half(lay.groups, 0.5);
        EXPECT_GE(r.residual, 0.0);
        EXPECT_LE(r.residual, fit_residual(target, An, Bn, lay, half, half) + 1e-12) << "instance " << s;
    }
}

TEST(BestFit, ShapeMismatchRejected) {
    EXPECT_THROW(best_fit_coeffs(Tensor<T>({2, 2}), Tensor<T>({2, 2}), Tensor<T>({4}), false), Error);
}

TEST(BestFit, HeadwiseProjectionReproducesOutput) {
    const std::size_t d = 8, heads = 2, tokens = 5;
    const Shape shape{d, d};
    const auto Wp = random_tensor<T>(shape, 90), Wn = random_tensor<T>(shape, 91);
    const auto bp = random_tensor<T>({d}, 92), bn = random_tensor<T>({d}, 93);
    const auto lay = GroupLayout::heads(shape, heads);
    // Planted target inside the span of the normalized anchors.
    const auto Ap = normalize_linear_rows(Wp), An = normalize_linear_rows(Wn);
    const double alpha[] = {0.2, -0.6}, beta[] = {1.1, 0.4};
    Tensor<T> target(shape);
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const auto g = lay.group_of(i);
        target[i] = alpha[g] * Ap[i] + beta[g] * An[i];
    }
    const auto fit = best_fit_coeffs(target, Wp, Wn, true, lay);
    EXPECT_LE(fit.residual, 1e-10);

    SynthCoeffs<T> c{Tensor<T>({heads}), Tensor<T>({heads})};
    for (std::size_t h = 0; h < heads; ++h) {
        c.alpha[h] = fit.alpha[h];
        c.beta[h] = fit.beta[h];
    }
    const auto [W, b] = synth_vit_proj(Wp, Wn, bp, bn, c, VitSynth::headwise, heads);
    const auto X = random_tensor<T>({tokens, d}, 94, 3.0);
    double worst = 0;
    for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t o = 0; o < d; ++o) {
            double y = 0, y_star = 0;
            for (std::size_t i = 0; i < d; ++i) {
                y += X[t * d + i] * W[o * d + i];
                y_star += X[t * d + i] * target[o * d + i];
            }
            worst = std::max(worst, std::abs(y - y_star));
        }
    EXPECT_LE(worst, 1e-10);
}
