#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "repl/grad_check.hpp"
#include "repl/ops.hpp"
#include "support.hpp"

using namespace repl;
using repl::testing::random_tensor;
using T = double;

namespace {

Tensor<T> vec(Shape s, std::vector<T> v) { return Tensor<T>(std::move(s), std::move(v)); }

/// Weighted sum against a fixed random probe makes any op a scalar with a
/// generic upstream gradient.
Var<T> probe_sum(Var<T> y, std::uint64_t seed) {
    auto& tape = *y.tape();
    auto w = tape.constant(random_tensor(y.shape(), seed, 1.0, "probe"));
    return ad::sum(ad::mul(y, w));
}

}  // namespace

// ---- conv2d ----------------------------------------------------------------

TEST(Conv2d, IdentityKernelPassesInputThrough) {
    auto y = kernels::conv2d(Tensor<T>::ones({1, 1, 3, 3}), Tensor<T>::ones({1, 1, 1, 1}), 1, 0);
    EXPECT_EQ(y, Tensor<T>::ones({1, 1, 3, 3}));
}

TEST(Conv2d, HandComputedDiagonalKernel) {
    auto y = kernels::conv2d(vec({1, 1, 2, 2}, {1, 2, 3, 4}), vec({1, 1, 2, 2}, {1, 0, 0, 1}), 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y[0], 5.0);
}

TEST(Conv2d, ZeroKernelAnnihilates) {
    auto x = random_tensor({2, 3, 5, 5}, 1);
    auto y = kernels::conv2d(x, Tensor<T>({4, 3, 3, 3}), 1, 1);
    EXPECT_EQ(y, Tensor<T>({2, 4, 5, 5}));
}

TEST(Conv2d, OutputExtentFollowsStrideAndPadding) {
    auto y = kernels::conv2d(random_tensor({1, 2, 7, 7}, 2), random_tensor({3, 2, 3, 3}, 3), 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
    try {
        kernels::conv2d(Tensor<T>({1, 2, 4, 4}), Tensor<T>({1, 3, 3, 3}), 1, 1);
        FAIL() << "expected a shape error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
}

// ---- linear ----------------------------------------------------------------

TEST(Linear, IdentityWeight) {
    auto y = kernels::linear(vec({2}, {1, 0}), vec({2, 2}, {1, 0, 0, 1}), Tensor<T>({2}));
    EXPECT_EQ(y, vec({2}, {1, 0}));
}

TEST(Linear, HandMatmul) {
    auto y = kernels::linear(vec({2}, {1, 2}), vec({2, 2}, {1, 1, 0, 1}), vec({2}, {1, 0}));
    EXPECT_EQ(y, vec({2}, {4, 2}));
}

TEST(Linear, BiasOnlyWhenInputIsZero) {
    auto y = kernels::linear(Tensor<T>({1, 3}), random_tensor({1, 3}, 4), vec({1}, {3}));
    EXPECT_EQ(y[0], 3.0);
}

TEST(Linear, TrailingExtentMismatchThrows) {
    EXPECT_THROW(kernels::linear(Tensor<T>({2, 3}), Tensor<T>({2, 4}), Tensor<T>({2})), Error);
}

// ---- batch norm -------------------------------------------------------------

namespace {

Tensor<T> bn_eval(const Tensor<T>& x, T gamma, T beta, T mu, T var, T eps) {
    Tape<T> tape;
    const std::size_t c = x.dim(1);
    Tensor<T> m({c}, mu), v({c}, var);
    return ad::batch_norm<T>(tape.constant(x), tape.constant(Tensor<T>({c}, gamma)),
                             tape.constant(Tensor<T>({c}, beta)), nullptr, nullptr, &m, &v, Mode::eval, 0.1, eps)
        .value();
}

}  // namespace

TEST(BatchNorm, EvalIdentityStatistics) {
    auto x = random_tensor({2, 3, 2, 2}, 5);
    auto y = bn_eval(x, 1, 0, 0, 1 - 1e-5, 1e-5);
    EXPECT_LE(max_abs_diff(x, y), 1e-15);
}

TEST(BatchNorm, TrainConstantChannelGivesBeta) {
    Tape<T> tape;
    Tensor<T> x({4, 2, 3, 3}, 2.5);
    Tensor<T> rm({2}), rv({2}, 1.0);
    auto y = ad::batch_norm<T>(tape.constant(x), tape.constant(Tensor<T>({2}, 1.7)),
                               tape.constant(vec({2}, {0.25, -0.5})), &rm, &rv, nullptr, nullptr, Mode::train);
    for (std::size_t i = 0; i < y.value().numel(); ++i) {
        const std::size_t c = (i / 9) % 2;
        EXPECT_DOUBLE_EQ(y.value()[i], c == 0 ? 0.25 : -0.5);
    }
    // running statistics move toward the batch statistics by the momentum
    EXPECT_NEAR(rm[0], 0.25, 1e-15);
    EXPECT_NEAR(rv[0], 0.9, 1e-15);
}

TEST(BatchNorm, EvalHandArithmetic) {
    auto y = bn_eval(Tensor<T>({1, 1, 1, 1}, 1.0), 2, 0.5, 1, 3, 1);
    EXPECT_DOUBLE_EQ(y[0], 0.5);
}

TEST(BatchNorm, EmptyBatchInTrainModeRejected) {
    // zero extents are unrepresentable; a rank mismatch is the nearest structural error
    Tape<T> tape;
    Tensor<T> rm({2}), rv({2});
    EXPECT_THROW(ad::batch_norm<T>(tape.constant(Tensor<T>({2, 2})), tape.constant(Tensor<T>({2})),
                                   tape.constant(Tensor<T>({2})), &rm, &rv, nullptr, nullptr, Mode::train),
                 Error);
}

// ---- layer norm -------------------------------------------------------------

TEST(LayerNorm, ConstantTokenGivesBeta) {
    auto y = kernels::layer_norm(Tensor<T>({2, 3, 4}, 7.0), Tensor<T>({4}, 3.0), vec({4}, {1, 2, 3, 4}), 1e-5);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], double(i % 4 + 1));
}

TEST(LayerNorm, UnitVarianceOnTwoValues) {
    auto y = kernels::layer_norm(vec({2}, {1, -1}), Tensor<T>::ones({2}), Tensor<T>({2}), 1e-5);
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(y[0], expect, 1e-15);
    EXPECT_NEAR(y[1], -expect, 1e-15);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
    auto y = kernels::layer_norm(random_tensor({3, 5}, 6), Tensor<T>({5}), Tensor<T>({5}, -0.75), 1e-5);
    for (auto v : y.data()) EXPECT_EQ(v, -0.75);
}

// ---- attention --------------------------------------------------------------

namespace {

struct AttnWeights {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

AttnWeights random_attn(std::size_t d, std::uint64_t seed) {
    return {random_tensor({d, d}, seed, 0.5, "wq"), random_tensor({d}, seed, 0.1, "bq"),
            random_tensor({d, d}, seed, 0.5, "wk"), random_tensor({d}, seed, 0.1, "bk"),
            random_tensor({d, d}, seed, 0.5, "wv"), random_tensor({d}, seed, 0.1, "bv"),
            random_tensor({d, d}, seed, 0.5, "wo"), random_tensor({d}, seed, 0.1, "bo")};
}

Tensor<T> run_msa(const Tensor<T>& x, const AttnWeights& w, std::size_t heads) {
    Tape<T> tape;
    auto c = [&](const Tensor<T>& t) { return tape.constant(t); };
    return ad::msa(c(x), c(w.wq), c(w.bq), c(w.wk), c(w.bk), c(w.wv), c(w.bv), c(w.wo), c(w.bo), heads).value();
}

}  // namespace

TEST(Msa, SingleTokenIsLinearMap) {
    const auto w = random_attn(4, 7);
    auto x = random_tensor({2, 1, 4}, 8);
    auto y = run_msa(x, w, 2);
    auto expect = kernels::linear(kernels::linear(x, w.wv, w.bv), w.wo, w.bo);
    EXPECT_LE(max_abs_diff(y, expect), 1e-14);
}

TEST(Msa, ZeroValuePathGivesZeros) {
    auto w = random_attn(4, 9);
    w.wv.fill(0);
    w.bv.fill(0);
    w.bo.fill(0);
    auto y = run_msa(random_tensor({1, 3, 4}, 10), w, 2);
    EXPECT_EQ(y, Tensor<T>({1, 3, 4}));
}

TEST(Msa, TwoTokenIdentityWeightsByHand) {
    AttnWeights w;
    const auto eye = vec({2, 2}, {1, 0, 0, 1});
    w.wq = w.wk = w.wv = w.wo = eye;
    w.bq = w.bk = w.bv = w.bo = Tensor<T>({2});
    auto y = run_msa(vec({1, 2, 2}, {1, 0, 0, 1}), w, 1);
    // scores x x^T / sqrt(2) = [[1,0],[0,1]] / sqrt(2); each row softmax-mixes the two tokens
    const double s = 1.0 / std::sqrt(2.0);
    const double p = std::exp(s) / (std::exp(s) + 1.0);
    const double expect[] = {p, 1 - p, 1 - p, p};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expect[i], 1e-15);
}

TEST(Msa, HeadsMustDivideDim) {
    EXPECT_THROW(run_msa(random_tensor({1, 2, 6}, 11), random_attn(6, 12), 4), Error);
}

// ---- activations ------------------------------------------------------------

TEST(Activation, Relu) {
    auto y = kernels::relu(vec({2}, {-1, 2}));
    EXPECT_EQ(y, vec({2}, {0, 2}));
}

TEST(Activation, GeluTanhApproximation) {
    EXPECT_EQ(kernels::gelu_scalar(0.0), 0.0);
    const double c = std::sqrt(2.0 / std::numbers::pi);
    const double expect = 0.5 * (1 + std::tanh(c * (1 + 0.044715)));
    EXPECT_NEAR(kernels::gelu_scalar(1.0), expect, 1e-15);
    EXPECT_NEAR(kernels::gelu_scalar(1.0), 0.8412, 5e-5);
}

// ---- cross entropy -------------------------------------------------------------

namespace {

double ce(const Tensor<T>& logits, std::vector<int> labels) {
    Tape<T> tape;
    return ad::cross_entropy(tape.constant(logits), std::span<const int>(labels)).value().item();
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogC) { EXPECT_NEAR(ce(Tensor<T>({3, 10}), {0, 4, 9}), std::log(10.0), 1e-15); }

TEST(CrossEntropy, ConfidentCorrectLogit) {
    const double expect = std::log1p(2 * std::exp(-20.0));
    EXPECT_NEAR(ce(vec({1, 3}, {20, 0, 0}), {0}), expect, 1e-14);
    EXPECT_NEAR(ce(vec({1, 3}, {20, 0, 0}), {0}), 4.1e-9, 0.05e-9);
}

TEST(CrossEntropy, SingleClassIsZero) { EXPECT_EQ(ce(vec({2, 1}, {-3, 17}), {0, 0}), 0.0); }

TEST(CrossEntropy, OutOfRangeLabelRejected) {
    try {
        ce(Tensor<T>({1, 3}), {3});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::value);
    }
}

// ---- stop gradient and backward ---------------------------------------------------

TEST(StopGradient, ValueTransparent) {
    Tape<T> tape;
    auto x = tape.leaf(random_tensor({3, 4}, 13));
    EXPECT_EQ(ad::stop_gradient(x).value(), x.value());
}

TEST(StopGradient, GradientOpaque) {
    Tape<T> tape;
    auto x = tape.leaf(random_tensor({3, 4}, 14));
    tape.backward(ad::sum(ad::stop_gradient(x)));
    EXPECT_EQ(tape.grad_or_zeros(x), Tensor<T>({3, 4}));
}

TEST(StopGradient, OnlyLivePathCounts) {
    Tape<T> tape;
    auto x = tape.leaf(random_tensor({5}, 15));
    tape.backward(ad::sum(ad::add(x, ad::stop_gradient(x))));
    EXPECT_EQ(tape.grad_or_zeros(x), Tensor<T>::ones({5}));
}

TEST(Backward, Square) {
    Tape<T> tape;
    auto x = tape.leaf(Tensor<T>::scalar(3));
    tape.backward(ad::mul(x, x));
    EXPECT_EQ(tape.grad_or_zeros(x).item(), 6.0);
}

TEST(Backward, Product) {
    Tape<T> tape;
    auto x = tape.leaf(Tensor<T>::scalar(2));
    auto y = tape.leaf(Tensor<T>::scalar(5));
    tape.backward(ad::mul(x, y));
    EXPECT_EQ(tape.grad_or_zeros(x).item(), 5.0);
    EXPECT_EQ(tape.grad_or_zeros(y).item(), 2.0);
}

TEST(Backward, NonScalarLossRejected) {
    Tape<T> tape;
    auto x = tape.leaf(Tensor<T>({2}));
    EXPECT_THROW(tape.backward(x), Error);
}

TEST(Backward, UnreachableParamsMapToZero) {
    Tape<T> tape;
    auto a = tape.param("a", Tensor<T>::scalar(2), true);
    auto b = tape.param("b", Tensor<T>({3}, 1.0), true);
    (void)b;
    tape.backward(ad::mul(a, a));
    const auto g = tape.param_grads();
    EXPECT_EQ(g.at("a").item(), 4.0);
    EXPECT_EQ(g.at("b"), Tensor<T>({3}));
}

TEST(Backward, ComposedPipelineMatchesFiniteDifferences) {
    const auto w = random_tensor({3, 2, 3, 3}, 16, 0.4);
    const auto gamma = random_tensor({3}, 17, 0.2), beta = random_tensor({3}, 18, 0.2);
    const auto lw = random_tensor({4, 3}, 19, 0.5), lb = random_tensor({4}, 20, 0.1);
    const std::vector<int> labels{1, 3};
    ScalarFn<T> f = [&](Tape<T>& tape, Var<T> x) {
        Tensor<T> rm({3}), rv({3}, 1.0);
        auto g1 = ad::add(tape.constant(Tensor<T>::ones({3})), tape.constant(gamma));
        auto h = ad::batch_norm<T>(ad::conv2d(x, tape.constant(w), 1, 1), g1, tape.constant(beta), &rm, &rv, nullptr,
                                   nullptr, Mode::train);
        auto pooled = ad::global_avg_pool(ad::relu(h));
        return ad::cross_entropy(ad::linear(pooled, tape.constant(lw), tape.constant(lb)), labels);
    };
    EXPECT_LT(grad_check(f, random_tensor({2, 2, 4, 4}, 21), 1e-5), 1e-5);
}

// ---- gradient checker -------------------------------------------------------------

TEST(GradCheck, Quadratic) {
    ScalarFn<T> f = [](Tape<T>&, Var<T> x) { return ad::sum(ad::mul(x, x)); };
    EXPECT_LT(grad_check(f, random_tensor({6}, 22), 1e-5), 1e-9);
}

TEST(GradCheck, ReluAwayFromKink) {
    auto x = random_tensor({8}, 23);
    for (auto& v : x.data()) v = v >= 0 ? v + 0.1 : v - 0.1;
    ScalarFn<T> f = [](Tape<T>& tape, Var<T> x) {
        auto w = tape.constant(random_tensor({8}, 24));
        return ad::sum(ad::mul(ad::relu(x), w));
    };
    EXPECT_LT(grad_check(f, x, 1e-5), 1e-6);
}

TEST(GradCheck, ConstantFunctionIsZero) {
    ScalarFn<T> f = [](Tape<T>& tape, Var<T>) { return tape.constant(Tensor<T>::scalar(4)); };
    EXPECT_EQ(grad_check(f, random_tensor({3}, 25), 1e-5), 0.0);
}

// Every primitive with a smooth neighborhood, five seeds each.
class PrimitiveGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveGradients, AllPrimitivesBelowTolerance) {
    const std::uint64_t seed = GetParam();
    const double tol = 1e-5, h = 1e-5;
    auto check = [&](const char* name, ScalarFn<T> f, const Tensor<T>& x) {
        const double err = grad_check(f, x, h);
        EXPECT_LT(err, tol) << name << " seed " << seed;
    };
    const auto conv_w = random_tensor({3, 2, 3, 3}, seed, 0.5, "cw");
    check("conv2d.x", [&](Tape<T>& t, Var<T> x) { return probe_sum(ad::conv2d(x, t.constant(conv_w), 2, 1), seed); },
          random_tensor({2, 2, 5, 5}, seed, 1.0, "cx"));
    const auto conv_x = random_tensor({2, 2, 5, 5}, seed, 1.0, "cx");
    check("conv2d.w", [&](Tape<T>& t, Var<T> w) { return probe_sum(ad::conv2d(t.constant(conv_x), w, 1, 1), seed); },
          conv_w);
    const auto lin_w = random_tensor({4, 6}, seed, 0.5, "lw");
    const auto lin_b = random_tensor({4}, seed, 0.5, "lb");
    const auto lin_x = random_tensor({2, 3, 6}, seed, 1.0, "lx");
    check("linear.x",
          [&](Tape<T>& t, Var<T> x) { return probe_sum(ad::linear(x, t.constant(lin_w), t.constant(lin_b)), seed); },
          lin_x);
    check("linear.w",
          [&](Tape<T>& t, Var<T> w) { return probe_sum(ad::linear(t.constant(lin_x), w, t.constant(lin_b)), seed); },
          lin_w);
    check("linear.b",
          [&](Tape<T>& t, Var<T> b) { return probe_sum(ad::linear(t.constant(lin_x), t.constant(lin_w), b), seed); },
          lin_b);
    const auto bn_x = random_tensor({3, 2, 3, 3}, seed, 1.0, "bx");
    auto bn = [&](Tape<T>&, Var<T> x, Var<T> g, Var<T> b) {
        Tensor<T> rm({2}), rv({2}, 1.0);
        return probe_sum(ad::batch_norm<T>(x, g, b, &rm, &rv, nullptr, nullptr, Mode::train), seed);
    };
    const auto bn_g = random_tensor({2}, seed, 0.3, "bg"), bn_b = random_tensor({2}, seed, 0.3, "bb");
    check("batch_norm.x", [&](Tape<T>& t, Var<T> x) { return bn(t, x, t.constant(bn_g), t.constant(bn_b)); }, bn_x);
    check("batch_norm.gamma", [&](Tape<T>& t, Var<T> g) { return bn(t, t.constant(bn_x), g, t.constant(bn_b)); },
          bn_g);
    check("batch_norm.beta", [&](Tape<T>& t, Var<T> b) { return bn(t, t.constant(bn_x), t.constant(bn_g), b); },
          bn_b);
    const auto ln_g = random_tensor({6}, seed, 1.0, "lg"), ln_b = random_tensor({6}, seed, 0.3, "lnb");
    check("layer_norm.x",
          [&](Tape<T>& t, Var<T> x) {
              return probe_sum(ad::layer_norm(x, t.constant(ln_g), t.constant(ln_b)), seed);
          },
          lin_x);
    check("layer_norm.gamma",
          [&](Tape<T>& t, Var<T> g) { return probe_sum(ad::layer_norm(t.constant(lin_x), g, t.constant(ln_b)), seed); },
          ln_g);
    const auto aw = random_attn(4, seed);
    auto attn = [&](Tape<T>& t, Var<T> x, Var<T> wq, Var<T> wo) {
        auto c = [&](const Tensor<T>& v) { return t.constant(v); };
        return probe_sum(ad::msa(x, wq, c(aw.bq), c(aw.wk), c(aw.bk), c(aw.wv), c(aw.bv), wo, c(aw.bo), 2), seed);
    };
    const auto attn_x = random_tensor({2, 3, 4}, seed, 1.0, "ax");
    check("msa.x", [&](Tape<T>& t, Var<T> x) { return attn(t, x, t.constant(aw.wq), t.constant(aw.wo)); }, attn_x);
    check("msa.wq", [&](Tape<T>& t, Var<T> w) { return attn(t, t.constant(attn_x), w, t.constant(aw.wo)); }, aw.wq);
    check("msa.wo", [&](Tape<T>& t, Var<T> w) { return attn(t, t.constant(attn_x), t.constant(aw.wq), w); }, aw.wo);
    check("gelu", [&](Tape<T>&, Var<T> x) { return probe_sum(ad::gelu(x), seed); }, lin_x);
    auto relu_x = random_tensor({10}, seed, 1.0, "rx");
    for (auto& v : relu_x.data()) v += v >= 0 ? 0.05 : -0.05;
    check("relu", [&](Tape<T>&, Var<T> x) { return probe_sum(ad::relu(x), seed); }, relu_x);
    const auto labels = repl::testing::random_labels(3, 5, seed);
    check("cross_entropy", [&](Tape<T>&, Var<T> x) { return ad::cross_entropy(x, labels); },
          random_tensor({3, 5}, seed, 1.0, "ce"));
    check("normalize_rows", [&](Tape<T>&, Var<T> x) { return probe_sum(ad::normalize_rows(x, 3, 1e-5), seed); },
          random_tensor({3, 4}, seed, 1.0, "nr"));
    const auto gs_s = random_tensor({3}, seed, 1.0, "gs");
    check("group_scale.s",
          [&](Tape<T>& t, Var<T> s) {
              return probe_sum(ad::group_scale(t.constant(random_tensor({2, 3, 4}, seed)), s, 2, 3, 4), seed);
          },
          gs_s);
    check("softmax", [&](Tape<T>&, Var<T> x) { return probe_sum(ad::softmax(x), seed); },
          random_tensor({2, 5}, seed, 1.0, "sm"));
    check("pools",
          [&](Tape<T>&, Var<T> x) {
              return ad::add(probe_sum(ad::global_avg_pool(x), seed),
                             probe_sum(ad::token_mean_pool(ad::reshape(x, {2, 6, 3})), seed));
          },
          random_tensor({2, 2, 3, 3}, seed, 1.0, "pool"));
    check("patchify",
          [&](Tape<T>&, Var<T> x) { return probe_sum(ad::patchify(x, 2), seed); },
          random_tensor({1, 2, 4, 4}, seed, 1.0, "pt"));
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Values(0, 1, 2, 3, 4));

TEST(Determinism, IdenticalTapesGiveBitwiseIdenticalGradients) {
    auto run = [] {
        Tape<T> tape;
        auto w = tape.param("w", random_tensor({3, 2, 3, 3}, 30), true);
        auto x = tape.constant(random_tensor({2, 2, 4, 4}, 31));
        tape.backward(probe_sum(ad::gelu(ad::conv2d(x, w, 1, 1)), 32));
        return tape.param_grads();
    };
    EXPECT_EQ(run(), run());
}

TEST(Invariants, ZeroConvAndIdentityLinear) {
    const auto x = random_tensor({1, 2, 3, 3}, 33);
    EXPECT_EQ(kernels::conv2d(x, Tensor<T>({2, 2, 1, 1}), 1, 0), Tensor<T>({1, 2, 3, 3}));
    const auto v = random_tensor({4, 3}, 34);
    EXPECT_EQ(kernels::linear(v, vec({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor<T>({3})), v);
}

TEST(Tensor, ShapeContracts) {
    EXPECT_THROW(Tensor<T>({2, 0}), Error);
    EXPECT_THROW(Tensor<T>({2, 2}, std::vector<T>{1, 2, 3}), Error);
    Tensor<T> t({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_THROW(t.item(), Error);
    EXPECT_THROW(t.reshaped({4}), Error);
}
