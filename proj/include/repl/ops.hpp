#pragma once

// Differentiable primitives recorded on a Tape.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "repl/autodiff.hpp"
#include "repl/kernels.hpp"

namespace repl::ad {

using repl::detail::accumulate;

enum class Activation { relu, gelu };

inline constexpr double kDefaultBnMomentum = 0.1;
inline constexpr double kDefaultBnEps = 1e-5;
inline constexpr double kDefaultLnEps = 1e-5;

namespace detail {

template <typename T>
Tape<T>& tape_of(Var<T> v) {
    if (!v.valid()) throw Error(ErrorKind::internal, "operation on an unbound Var");
    return *v.tape();
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw Error(ErrorKind::shape, msg);
}

}  // namespace detail

/// Value-transparent, gradient-opaque copy.
template <typename T>
Var<T> stop_gradient(Var<T> x) {
    return detail::tape_of(x).constant(x.value());
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    auto& tape = detail::tape_of(a);
    auto y = kernels::add(a.value(), b.value());
    tape.count_elementwise_flops(y.numel());
    const auto ia = a.id(), ib = b.id();
    return tape.record(std::move(y), {a, b},
                       [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                           accumulate(t.grad_slot(ia), g);
                           accumulate(t.grad_slot(ib), g);
                       },
                       "add");
}

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    auto& tape = detail::tape_of(a);
    detail::require(a.shape() == b.shape(), "mul of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
    tape.count_elementwise_flops(y.numel());
    const auto ia = a.id(), ib = b.id();
    return tape.record(std::move(y), {a, b},
                       [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                           const auto& av = t.value(ia);
                           const auto& bv = t.value(ib);
                           if (auto* ga = t.grad_slot(ia))
                               for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
                           if (auto* gb = t.grad_slot(ib))
                               for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
                       },
                       "mul");
}

/// c * x
template <typename T>
Var<T> scale(Var<T> x, T c) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::scale(x.value(), c);
    tape.count_elementwise_flops(y.numel());
    const auto ix = x.id();
    return tape.record(std::move(y), {x},
                       [ix, c](Tape<T>& t, const Tensor<T>& g) {
                           if (auto* gx = t.grad_slot(ix))
                               for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += c * g[i];
                       },
                       "scale");
}

/// m * x + c
template <typename T>
Var<T> affine(Var<T> x, T m, T c) {
    auto& tape = detail::tape_of(x);
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = m * x.value()[i] + c;
    tape.count_elementwise_flops(2 * y.numel());
    const auto ix = x.id();
    return tape.record(std::move(y), {x},
                       [ix, m](Tape<T>& t, const Tensor<T>& g) {
                           if (auto* gx = t.grad_slot(ix))
                               for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += m * g[i];
                       },
                       "affine");
}

/// 1 - x
template <typename T>
Var<T> one_minus(Var<T> x) {
    return affine(x, T{-1}, T{1});
}

template <typename T>
Var<T> sum(Var<T> x) {
    auto& tape = detail::tape_of(x);
    T s{0};
    for (T v : x.value().data()) s += v;
    tape.count_elementwise_flops(x.value().numel());
    const auto ix = x.id();
    return tape.record(Tensor<T>::scalar(s), {x},
                       [ix](Tape<T>& t, const Tensor<T>& g) {
                           if (auto* gx = t.grad_slot(ix))
                               for (auto& v : gx->data()) v += g[0];
                       },
                       "sum");
}

template <typename T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    auto& tape = detail::tape_of(x);
    auto y = x.value().reshaped(std::move(shape));
    const auto ix = x.id();
    return tape.record(std::move(y), {x},
                       [ix](Tape<T>& t, const Tensor<T>& g) { accumulate(t.grad_slot(ix), g); }, "reshape");
}

template <typename T>
Var<T> relu(Var<T> x) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::relu(x.value());
    tape.count_elementwise_flops(y.numel());
    const auto ix = x.id();
    return tape.record(std::move(y), {x},
                       [ix](Tape<T>& t, const Tensor<T>& g) {
                           const auto& xv = t.value(ix);
                           if (auto* gx = t.grad_slot(ix))
                               for (std::size_t i = 0; i < g.numel(); ++i)
                                   if (xv[i] > T{0}) (*gx)[i] += g[i];
                       },
                       "relu");
}

/// GELU, tanh approximation.
template <typename T>
Var<T> gelu(Var<T> x) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::gelu(x.value());
    tape.count_elementwise_flops(8 * y.numel());
    const auto ix = x.id();
    return tape.record(std::move(y), {x},
                       [ix](Tape<T>& t, const Tensor<T>& g) {
                           const auto& xv = t.value(ix);
                           if (auto* gx = t.grad_slot(ix))
                               for (std::size_t i = 0; i < g.numel(); ++i)
                                   (*gx)[i] += g[i] * kernels::gelu_derivative(xv[i]);
                       },
                       "gelu");
}

template <typename T>
Var<T> activation(Var<T> x, Activation kind) {
    return kind == Activation::relu ? relu(x) : gelu(x);
}

/// Bias-free 2-D convolution, weight [Cout,Cin,q,q] with q odd.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, std::size_t pad) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::conv2d(x.value(), w.value(), stride, pad);
    const auto& ws = w.shape();
    tape.count_mac_flops(2ull * y.numel() * ws[1] * ws[2] * ws[3]);
    const auto ix = x.id(), iw = w.id();
    return tape.record(std::move(y), {x, w},
                       [ix, iw, stride, pad](Tape<T>& t, const Tensor<T>& g) {
                           const auto& xv = t.value(ix);
                           const auto& wv = t.value(iw);
                           if (auto* gx = t.grad_slot(ix))
                               accumulate(gx, kernels::conv2d_grad_input(g, wv, xv.shape(), stride, pad));
                           if (auto* gw = t.grad_slot(iw))
                               accumulate(gw, kernels::conv2d_grad_weight(g, xv, wv.shape(), stride, pad));
                       },
                       "conv2d");
}

/// y = x w^T + b over the trailing axis. Pass an unbound Var for no bias.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b = {}) {
    auto& tape = detail::tape_of(x);
    const Tensor<T> none;
    auto y = kernels::linear(x.value(), w.value(), b.valid() ? b.value() : none);
    tape.count_mac_flops(2ull * (y.numel() / w.shape()[0]) * w.shape()[0] * w.shape()[1]);
    const auto ix = x.id(), iw = w.id();
    const bool has_b = b.valid();
    const auto ib = has_b ? b.id() : 0;
    auto fn = [ix, iw, ib, has_b](Tape<T>& t, const Tensor<T>& g) {
        auto grads = kernels::linear_grad(g, t.value(ix), t.value(iw));
        accumulate(t.grad_slot(ix), grads.gx);
        accumulate(t.grad_slot(iw), grads.gw);
        if (has_b) accumulate(t.grad_slot(ib), grads.gb);
    };
    if (has_b) return tape.record(std::move(y), {x, w, b}, std::move(fn), "linear");
    return tape.record(std::move(y), {x, w}, std::move(fn), "linear");
}

/// Batch normalization over [B,C,H,W]. Train mode normalizes with batch
/// statistics and, when running stats are supplied, updates them by EMA
/// (unbiased variance). Eval mode uses the running statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>* running_mean, Tensor<T>* running_var,
                  const Tensor<T>* eval_mean, const Tensor<T>* eval_var, Mode mode,
                  T momentum = static_cast<T>(kDefaultBnMomentum), T eps = static_cast<T>(kDefaultBnEps)) {
    auto& tape = detail::tape_of(x);
    const auto& xv = x.value();
    detail::require(xv.rank() == 4, "batch_norm input must be [B,C,H,W], got " + shape_str(xv.shape()));
    const std::size_t bsz = xv.dim(0), cext = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
    detail::require(gamma.value().numel() == cext && beta.value().numel() == cext,
                    "batch_norm affine length must equal channel extent " + std::to_string(cext));
    tape.count_elementwise_flops(4 * xv.numel());
    const auto ix = x.id(), ig = gamma.id(), ib = beta.id();

    if (mode == Mode::eval) {
        if (!eval_mean || !eval_var) throw Error(ErrorKind::value, "batch_norm eval mode requires running statistics");
        auto y = kernels::batch_norm_eval(xv, gamma.value(), beta.value(), *eval_mean, *eval_var, eps);
        Tensor<T> inv({cext});
        for (std::size_t c = 0; c < cext; ++c) inv[c] = T{1} / std::sqrt((*eval_var)[c] + eps);
        Tensor<T> mu = *eval_mean;
        return tape.record(std::move(y), {x, gamma, beta},
                           [ix, ig, ib, inv, mu, bsz, cext, plane](Tape<T>& t, const Tensor<T>& g) {
                               const auto& xv2 = t.value(ix);
                               const auto& gm = t.value(ig);
                               auto* gx = t.grad_slot(ix);
                               auto* gg = t.grad_slot(ig);
                               auto* gb = t.grad_slot(ib);
                               for (std::size_t b = 0; b < bsz; ++b)
                                   for (std::size_t c = 0; c < cext; ++c)
                                       for (std::size_t i = 0; i < plane; ++i) {
                                           const std::size_t k = (b * cext + c) * plane + i;
                                           if (gx) (*gx)[k] += g[k] * gm[c] * inv[c];
                                           if (gg) (*gg)[c] += g[k] * (xv2[k] - mu[c]) * inv[c];
                                           if (gb) (*gb)[c] += g[k];
                                       }
                           },
                           "batch_norm");
    }

    const std::size_t m = bsz * plane;
    Tensor<T> xhat(xv.shape());
    Tensor<T> inv({cext});
    Tensor<T> y(xv.shape());
    for (std::size_t c = 0; c < cext; ++c) {
        T mean{0};
        for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t i = 0; i < plane; ++i) mean += xv[(b * cext + c) * plane + i];
        mean /= static_cast<T>(m);
        T var{0};
        for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t i = 0; i < plane; ++i) {
                const T dlt = xv[(b * cext + c) * plane + i] - mean;
                var += dlt * dlt;
            }
        var /= static_cast<T>(m);
        inv[c] = T{1} / std::sqrt(var + eps);
        for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t k = (b * cext + c) * plane + i;
                xhat[k] = (xv[k] - mean) * inv[c];
                y[k] = gamma.value()[c] * xhat[k] + beta.value()[c];
            }
        if (running_mean && running_var) {
            const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
            (*running_mean)[c] = (T{1} - momentum) * (*running_mean)[c] + momentum * mean;
            (*running_var)[c] = (T{1} - momentum) * (*running_var)[c] + momentum * unbiased;
        }
    }
    return tape.record(
        std::move(y), {x, gamma, beta},
        [ix, ig, ib, xhat = std::move(xhat), inv, bsz, cext, plane, m](Tape<T>& t, const Tensor<T>& g) {
            const auto& gm = t.value(ig);
            auto* gx = t.grad_slot(ix);
            auto* gg = t.grad_slot(ig);
            auto* gb = t.grad_slot(ib);
            for (std::size_t c = 0; c < cext; ++c) {
                T sum_g{0}, sum_gx{0};
                for (std::size_t b = 0; b < bsz; ++b)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const std::size_t k = (b * cext + c) * plane + i;
                        sum_g += g[k];
                        sum_gx += g[k] * xhat[k];
                    }
                if (gg) (*gg)[c] += sum_gx;
                if (gb) (*gb)[c] += sum_g;
                if (gx) {
                    const T coef = gm[c] * inv[c] / static_cast<T>(m);
                    for (std::size_t b = 0; b < bsz; ++b)
                        for (std::size_t i = 0; i < plane; ++i) {
                            const std::size_t k = (b * cext + c) * plane + i;
                            (*gx)[k] += coef * (static_cast<T>(m) * g[k] - sum_g - xhat[k] * sum_gx);
                        }
                }
            }
        },
        "batch_norm");
}

/// Layer normalization over the trailing axis.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = static_cast<T>(kDefaultLnEps)) {
    auto& tape = detail::tape_of(x);
    const auto& xv = x.value();
    auto y = kernels::layer_norm(xv, gamma.value(), beta.value(), eps);
    tape.count_elementwise_flops(5 * xv.numel());
    const std::size_t d = xv.shape().back();
    const std::size_t rows = xv.numel() / d;
    const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
    return tape.record(std::move(y), {x, gamma, beta},
                       [ix, ig, ib, d, rows, eps](Tape<T>& t, const Tensor<T>& g) {
                           const auto& xv2 = t.value(ix);
                           const auto& gm = t.value(ig);
                           auto* gx = t.grad_slot(ix);
                           auto* gg = t.grad_slot(ig);
                           auto* gb = t.grad_slot(ib);
                           std::vector<T> xhat(d), dxhat(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const T* xr = xv2.data().data() + r * d;
                               const T* gr = g.data().data() + r * d;
                               T mean{0};
                               for (std::size_t i = 0; i < d; ++i) mean += xr[i];
                               mean /= static_cast<T>(d);
                               T var{0};
                               for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
                               var /= static_cast<T>(d);
                               const T inv = T{1} / std::sqrt(var + eps);
                               T s1{0}, s2{0};
                               for (std::size_t i = 0; i < d; ++i) {
                                   xhat[i] = (xr[i] - mean) * inv;
                                   dxhat[i] = gr[i] * gm[i];
                                   s1 += dxhat[i];
                                   s2 += dxhat[i] * xhat[i];
                                   if (gg) (*gg)[i] += gr[i] * xhat[i];
                                   if (gb) (*gb)[i] += gr[i];
                               }
                               if (gx) {
                                   T* gxr = gx->data().data() + r * d;
                                   for (std::size_t i = 0; i < d; ++i)
                                       gxr[i] += inv / static_cast<T>(d) *
                                                 (static_cast<T>(d) * dxhat[i] - s1 - xhat[i] * s2);
                               }
                           }
                       },
                       "layer_norm");
}

/// Softmax over the trailing axis.
template <typename T>
Var<T> softmax(Var<T> x) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::softmax(x.value());
    tape.count_elementwise_flops(3 * y.numel());
    const std::size_t d = y.shape().back();
    const auto ix = x.id();
    Tensor<T> saved = y;
    return tape.record(std::move(y), {x},
                       [ix, d, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                           auto* gx = t.grad_slot(ix);
                           if (!gx) return;
                           const std::size_t rows = g.numel() / d;
                           for (std::size_t r = 0; r < rows; ++r) {
                               T dot{0};
                               for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * saved[r * d + i];
                               for (std::size_t i = 0; i < d; ++i)
                                   (*gx)[r * d + i] += saved[r * d + i] * (g[r * d + i] - dot);
                           }
                       },
                       "softmax");
}

/// Batched matmul: a [G,m,k] times b [G,k,n], or b^T for b [G,n,k].
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b) {
    auto& tape = detail::tape_of(a);
    auto y = kernels::bmm(a.value(), b.value(), transpose_b);
    tape.count_mac_flops(2ull * y.numel() * a.shape()[2]);
    const auto ia = a.id(), ib = b.id();
    return tape.record(std::move(y), {a, b},
                       [ia, ib, transpose_b](Tape<T>& t, const Tensor<T>& g) {
                           const auto& av = t.value(ia);
                           const auto& bv = t.value(ib);
                           if (auto* ga = t.grad_slot(ia)) {
                               // y = a b   -> ga = g b^T ; y = a b^T -> ga = g b
                               accumulate(ga, kernels::bmm(g, bv, !transpose_b));
                           }
                           if (auto* gb = t.grad_slot(ib)) {
                               // y = a b   -> gb = a^T g ; y = a b^T -> gb = g^T a
                               accumulate(gb, transpose_b ? kernels::bmm_at(g, av) : kernels::bmm_at(av, g));
                           }
                       },
                       "bmm");
}

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::split_heads(x.value(), heads);
    const auto ix = x.id();
    return tape.record(std::move(y), {x},
                       [ix, heads](Tape<T>& t, const Tensor<T>& g) {
                           accumulate(t.grad_slot(ix), kernels::merge_heads(g, heads));
                       },
                       "split_heads");
}

template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t heads) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::merge_heads(x.value(), heads);
    const auto ix = x.id();
    return tape.record(std::move(y), {x},
                       [ix, heads](Tape<T>& t, const Tensor<T>& g) {
                           accumulate(t.grad_slot(ix), kernels::split_heads(g, heads));
                       },
                       "merge_heads");
}

/// Multi-head softmax self-attention, scaling 1/sqrt(d/H).
template <typename T>
Var<T> msa(Var<T> x, Var<T> wq, Var<T> bq, Var<T> wk, Var<T> bk, Var<T> wv, Var<T> bv, Var<T> wo, Var<T> bo,
           std::size_t heads) {
    detail::require(x.value().rank() == 3, "msa input must be [B,T,d], got " + shape_str(x.shape()));
    const std::size_t d = x.shape()[2];
    if (heads == 0 || d % heads != 0) {
        throw Error(ErrorKind::shape,
                    "msa embedding dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    }
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(d / heads));
    auto q = split_heads(linear(x, wq, bq), heads);
    auto k = split_heads(linear(x, wk, bk), heads);
    auto v = split_heads(linear(x, wv, bv), heads);
    auto p = softmax(scale(bmm(q, k, true), inv_sqrt));
    return linear(merge_heads(bmm(p, v, false), heads), wo, bo);
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
    auto& tape = detail::tape_of(logits);
    const auto& lv = logits.value();
    detail::require(lv.rank() == 2, "cross_entropy logits must be [B,C], got " + shape_str(lv.shape()));
    const std::size_t bsz = lv.dim(0), classes = lv.dim(1);
    detail::require(labels.size() == bsz, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                                              std::to_string(bsz));
    auto probs = kernels::softmax(lv);
    T loss{0};
    for (std::size_t b = 0; b < bsz; ++b) {
        const int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw Error(ErrorKind::value, "cross_entropy label " + std::to_string(y) + " at row " + std::to_string(b) +
                                              " outside [0," + std::to_string(classes) + ")");
        }
        const T* row = lv.data().data() + b * classes;
        T m = row[0];
        for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
        T s{0};
        for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - m);
        loss += (m + std::log(s)) - row[y];
    }
    loss /= static_cast<T>(bsz);
    tape.count_elementwise_flops(4 * lv.numel());
    std::vector<int> lab(labels.begin(), labels.end());
    const auto il = logits.id();
    return tape.record(Tensor<T>::scalar(loss), {logits},
                       [il, probs = std::move(probs), lab = std::move(lab), bsz, classes](Tape<T>& t,
                                                                                         const Tensor<T>& g) {
                           auto* gl = t.grad_slot(il);
                           if (!gl) return;
                           const T s = g[0] / static_cast<T>(bsz);
                           for (std::size_t b = 0; b < bsz; ++b)
                               for (std::size_t c = 0; c < classes; ++c) {
                                   const T onehot = static_cast<std::size_t>(lab[b]) == c ? T{1} : T{0};
                                   (*gl)[b * classes + c] += s * (probs[b * classes + c] - onehot);
                               }
                       },
                       "cross_entropy");
}

/// Divides each of `rows` leading slices by sqrt(sum of squares + eps).
template <typename T>
Var<T> normalize_rows(Var<T> x, std::size_t rows, T eps) {
    auto& tape = detail::tape_of(x);
    const auto& xv = x.value();
    detail::require(rows > 0 && xv.numel() % rows == 0,
                    "normalize_rows: " + std::to_string(rows) + " rows do not tile " + shape_str(xv.shape()));
    if (!(eps > T{0})) throw Error(ErrorKind::value, "normalization eps must be positive");
    const std::size_t cols = xv.numel() / rows;
    Tensor<T> y(xv.shape());
    Tensor<T> inv({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        T ss{0};
        for (std::size_t j = 0; j < cols; ++j) ss += xv[r * cols + j] * xv[r * cols + j];
        inv[r] = T{1} / std::sqrt(ss + eps);
        for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = xv[r * cols + j] * inv[r];
    }
    tape.count_elementwise_flops(3 * xv.numel() + 2 * rows);
    const auto ix = x.id();
    Tensor<T> saved = y;
    return tape.record(std::move(y), {x},
                       [ix, rows, cols, inv, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                           auto* gx = t.grad_slot(ix);
                           if (!gx) return;
                           // d(w_i/s)/dw_j = delta_ij/s - w_i w_j/s^3 = (delta_ij - y_i y_j)/s
                           for (std::size_t r = 0; r < rows; ++r) {
                               T dot{0};
                               for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * saved[r * cols + j];
                               for (std::size_t j = 0; j < cols; ++j)
                                   (*gx)[r * cols + j] += inv[r] * (g[r * cols + j] - saved[r * cols + j] * dot);
                           }
                       },
                       "normalize_rows");
}

/// x viewed as [outer, groups, inner]; y[o,g,i] = x[o,g,i] * s[g].
template <typename T>
Var<T> group_scale(Var<T> x, Var<T> s, std::size_t outer, std::size_t groups, std::size_t inner) {
    auto& tape = detail::tape_of(x);
    const auto& xv = x.value();
    const auto& sv = s.value();
    detail::require(outer * groups * inner == xv.numel(),
                    "group_scale layout [" + std::to_string(outer) + "," + std::to_string(groups) + "," +
                        std::to_string(inner) + "] does not tile " + shape_str(xv.shape()));
    detail::require(sv.numel() == groups, "group_scale expects " + std::to_string(groups) + " coefficients, got " +
                                              std::to_string(sv.numel()));
    Tensor<T> y(xv.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = (o * groups + g) * inner + i;
                y[k] = xv[k] * sv[g];
            }
    tape.count_elementwise_flops(xv.numel());
    const auto ix = x.id(), is = s.id();
    return tape.record(std::move(y), {x, s},
                       [ix, is, outer, groups, inner](Tape<T>& t, const Tensor<T>& g) {
                           const auto& xv2 = t.value(ix);
                           const auto& sv2 = t.value(is);
                           auto* gx = t.grad_slot(ix);
                           auto* gs = t.grad_slot(is);
                           for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t gi = 0; gi < groups; ++gi)
                                   for (std::size_t i = 0; i < inner; ++i) {
                                       const std::size_t k = (o * groups + gi) * inner + i;
                                       if (gx) (*gx)[k] += g[k] * sv2[gi];
                                       if (gs) (*gs)[gi] += g[k] * xv2[k];
                                   }
                       },
                       "group_scale");
}

template <typename T>
Var<T> patchify(Var<T> x, std::size_t patch) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::patchify(x.value(), patch);
    const auto ix = x.id();
    const Shape xs = x.shape();
    return tape.record(std::move(y), {x},
                       [ix, xs, patch](Tape<T>& t, const Tensor<T>& g) {
                           accumulate(t.grad_slot(ix), kernels::unpatchify(g, xs, patch));
                       },
                       "patchify");
}

template <typename T>
Var<T> add_positional(Var<T> x, Var<T> pos) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::add_positional(x.value(), pos.value());
    tape.count_elementwise_flops(y.numel());
    const auto ix = x.id(), ip = pos.id();
    return tape.record(std::move(y), {x, pos},
                       [ix, ip](Tape<T>& t, const Tensor<T>& g) {
                           accumulate(t.grad_slot(ix), g);
                           if (auto* gp = t.grad_slot(ip)) {
                               const std::size_t td = gp->numel();
                               for (std::size_t i = 0; i < g.numel(); ++i) (*gp)[i % td] += g[i];
                           }
                       },
                       "add_positional");
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::global_avg_pool(x.value());
    tape.count_elementwise_flops(x.value().numel());
    const auto ix = x.id();
    const std::size_t plane = x.shape()[2] * x.shape()[3];
    return tape.record(std::move(y), {x},
                       [ix, plane](Tape<T>& t, const Tensor<T>& g) {
                           if (auto* gx = t.grad_slot(ix))
                               for (std::size_t i = 0; i < gx->numel(); ++i)
                                   (*gx)[i] += g[i / plane] / static_cast<T>(plane);
                       },
                       "global_avg_pool");
}

template <typename T>
Var<T> token_mean_pool(Var<T> x) {
    auto& tape = detail::tape_of(x);
    auto y = kernels::token_mean_pool(x.value());
    tape.count_elementwise_flops(x.value().numel());
    const auto ix = x.id();
    const std::size_t tokens = x.shape()[1], d = x.shape()[2];
    return tape.record(std::move(y), {x},
                       [ix, tokens, d](Tape<T>& t, const Tensor<T>& g) {
                           if (auto* gx = t.grad_slot(ix))
                               for (std::size_t i = 0; i < gx->numel(); ++i) {
                                   const std::size_t b = i / (tokens * d), j = i % d;
                                   (*gx)[i] += g[b * d + j] / static_cast<T>(tokens);
                               }
                       },
                       "token_mean_pool");
}

}  // namespace repl::ad
