#pragma once

// Plain forward/backward kernels over Tensor values. The autodiff ops and the
// deploy executor both call these, so a static deploy graph runs the exact
// arithmetic the dynamic graph runs.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "repl/tensor.hpp"

namespace repl::kernels {

namespace detail {

inline void expect(bool ok, const std::string& msg) {
    if (!ok) throw Error(ErrorKind::shape, msg);
}

inline std::size_t leading(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
    return n;
}

}  // namespace detail

struct ConvGeometry {
    std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
};

template <typename T>
ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
    detail::expect(x.size() == 4, "conv2d input must be [B,Cin,H,W], got " + shape_str(x));
    detail::expect(w.size() == 4, "conv2d weight must be [Cout,Cin,q,q], got " + shape_str(w));
    detail::expect(w[1] == x[1], "conv2d Cin mismatch: input channels " + std::to_string(x[1]) + " vs weight Cin " +
                                     std::to_string(w[1]));
    detail::expect(w[2] == w[3], "conv2d kernel must be square, got " + shape_str(w));
    detail::expect(stride >= 1, "conv2d stride must be >= 1");
    detail::expect(x[2] + 2 * pad >= w[2] && x[3] + 2 * pad >= w[2],
                   "conv2d kernel " + std::to_string(w[2]) + " larger than padded input H/W of " + shape_str(x));
    ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    return g;
}

namespace detail {

// Output column range [lo, hi) such that ow*stride + kw - pad lands inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t kofs, std::size_t pad, std::size_t stride,
                                                       std::size_t in, std::size_t out) {
    const long long kp = static_cast<long long>(kofs) - static_cast<long long>(pad);
    const long long s = static_cast<long long>(stride);
    long long lo = kp >= 0 ? 0 : (-kp + s - 1) / s;
    long long hi_incl = (static_cast<long long>(in) - 1 - kp);
    long long hi = hi_incl < 0 ? 0 : hi_incl / s + 1;
    hi = std::min<long long>(hi, static_cast<long long>(out));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
    const auto g = conv_geometry<T>(x.shape(), w.shape(), stride, pad);
    Tensor<T> y({g.batch, g.cout, g.ho, g.wo});
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* yd = y.data().data();
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t co = 0; co < g.cout; ++co) {
            T* yp = yd + (b * g.cout + co) * g.ho * g.wo;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
                const T* xp = xd + (b * g.cin + ci) * g.h * g.w;
                const T* wp = wd + (co * g.cin + ci) * g.k * g.k;
                for (std::size_t kh = 0; kh < g.k; ++kh) {
                    const auto [oh_lo, oh_hi] = detail::valid_range(kh, g.pad, g.stride, g.h, g.ho);
                    for (std::size_t kw = 0; kw < g.k; ++kw) {
                        const T wv = wp[kh * g.k + kw];
                        const auto [ow_lo, ow_hi] = detail::valid_range(kw, g.pad, g.stride, g.w, g.wo);
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const T* xr = xp + (oh * g.stride + kh - g.pad) * g.w;
                            T* yr = yp + oh * g.wo;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += wv * xr[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& gy, const Tensor<T>& w, const Shape& xshape, std::size_t stride,
                            std::size_t pad) {
    const auto g = conv_geometry<T>(xshape, w.shape(), stride, pad);
    Tensor<T> gx(xshape);
    const T* gyd = gy.data().data();
    const T* wd = w.data().data();
    T* gxd = gx.data().data();
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t co = 0; co < g.cout; ++co) {
            const T* gp = gyd + (b * g.cout + co) * g.ho * g.wo;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
                T* xp = gxd + (b * g.cin + ci) * g.h * g.w;
                const T* wp = wd + (co * g.cin + ci) * g.k * g.k;
                for (std::size_t kh = 0; kh < g.k; ++kh) {
                    const auto [oh_lo, oh_hi] = detail::valid_range(kh, g.pad, g.stride, g.h, g.ho);
                    for (std::size_t kw = 0; kw < g.k; ++kw) {
                        const T wv = wp[kh * g.k + kw];
                        const auto [ow_lo, ow_hi] = detail::valid_range(kw, g.pad, g.stride, g.w, g.wo);
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            T* xr = xp + (oh * g.stride + kh - g.pad) * g.w;
                            const T* gr = gp + oh * g.wo;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) xr[ow * g.stride + kw - g.pad] += wv * gr[ow];
                        }
                    }
                }
            }
        }
    }
    return gx;
}

template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& gy, const Tensor<T>& x, const Shape& wshape, std::size_t stride,
                             std::size_t pad) {
    const auto g = conv_geometry<T>(x.shape(), wshape, stride, pad);
    Tensor<T> gw(wshape);
    const T* gyd = gy.data().data();
    const T* xd = x.data().data();
    T* gwd = gw.data().data();
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t co = 0; co < g.cout; ++co) {
            const T* gp = gyd + (b * g.cout + co) * g.ho * g.wo;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
                const T* xp = xd + (b * g.cin + ci) * g.h * g.w;
                T* wp = gwd + (co * g.cin + ci) * g.k * g.k;
                for (std::size_t kh = 0; kh < g.k; ++kh) {
                    const auto [oh_lo, oh_hi] = detail::valid_range(kh, g.pad, g.stride, g.h, g.ho);
                    for (std::size_t kw = 0; kw < g.k; ++kw) {
                        const auto [ow_lo, ow_hi] = detail::valid_range(kw, g.pad, g.stride, g.w, g.wo);
                        T acc{0};
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const T* xr = xp + (oh * g.stride + kh - g.pad) * g.w;
                            const T* gr = gp + oh * g.wo;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) acc += gr[ow] * xr[ow * g.stride + kw - g.pad];
                        }
                        wp[kh * g.k + kw] += acc;
                    }
                }
            }
        }
    }
    return gw;
}

/// Adds a per-channel bias to [B,C,H,W].
template <typename T>
void add_channel_bias(Tensor<T>& y, const Tensor<T>& bias) {
    detail::expect(y.rank() == 4 && bias.numel() == y.dim(1), "channel bias length must equal channel extent");
    const std::size_t plane = y.dim(2) * y.dim(3);
    for (std::size_t b = 0; b < y.dim(0); ++b)
        for (std::size_t c = 0; c < y.dim(1); ++c) {
            T* p = y.data().data() + (b * y.dim(1) + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
        }
}

/// y = x w^T + b over the trailing axis. `b` may be empty (no bias).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::expect(w.rank() == 2, "linear weight must be [dout,din], got " + shape_str(w.shape()));
    const std::size_t din = w.dim(1), dout = w.dim(0);
    detail::expect(x.shape().back() == din, "linear din mismatch: input trailing extent " +
                                                std::to_string(x.shape().back()) + " vs weight din " +
                                                std::to_string(din));
    detail::expect(b.numel() == 0 || b.numel() == dout,
                   "linear bias length " + std::to_string(b.numel()) + " vs dout " + std::to_string(dout));
    const std::size_t n = detail::leading(x.shape());
    Shape ys = x.shape();
    ys.back() = dout;
    Tensor<T> y(ys);
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* yd = y.data().data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* xr = xd + r * din;
        for (std::size_t o = 0; o < dout; ++o) {
            const T* wr = wd + o * din;
            T acc{0};
            for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
            yd[r * dout + o] = b.numel() ? acc + b[o] : acc;
        }
    }
    return y;
}

template <typename T>
struct LinearGrads {
    Tensor<T> gx, gw, gb;
};

template <typename T>
LinearGrads<T> linear_grad(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>& w) {
    const std::size_t din = w.dim(1), dout = w.dim(0);
    const std::size_t n = detail::leading(x.shape());
    LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({dout})};
    const T* gyd = gy.data().data();
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* gr = gyd + r * dout;
        const T* xr = xd + r * din;
        T* gxr = g.gx.data().data() + r * din;
        for (std::size_t o = 0; o < dout; ++o) {
            const T go = gr[o];
            const T* wr = wd + o * din;
            T* gwr = g.gw.data().data() + o * din;
            for (std::size_t i = 0; i < din; ++i) {
                gxr[i] += go * wr[i];
                gwr[i] += go * xr[i];
            }
            g.gb[o] += go;
        }
    }
    return g;
}

/// Eval-mode batch normalization with given statistics.
template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, const Tensor<T>& mean,
                          const Tensor<T>& var, T eps) {
    detail::expect(x.rank() == 4, "batch_norm input must be [B,C,H,W], got " + shape_str(x.shape()));
    const std::size_t c_ext = x.dim(1);
    detail::expect(gamma.numel() == c_ext && beta.numel() == c_ext && mean.numel() == c_ext && var.numel() == c_ext,
                   "batch_norm parameter length must equal channel extent " + std::to_string(c_ext));
    Tensor<T> y(x.shape());
    const std::size_t plane = x.dim(2) * x.dim(3);
    for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t c = 0; c < c_ext; ++c) {
            const T inv = T{1} / std::sqrt(var[c] + eps);
            const T* xp = x.data().data() + (b * c_ext + c) * plane;
            T* yp = y.data().data() + (b * c_ext + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) yp[i] = gamma[c] * ((xp[i] - mean[c]) * inv) + beta[c];
        }
    return y;
}

/// Normalizes over the trailing axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t d = x.shape().back();
    detail::expect(gamma.numel() == d && beta.numel() == d,
                   "layer_norm parameter length must equal trailing extent " + std::to_string(d));
    const std::size_t n = detail::leading(x.shape());
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const T* xr = x.data().data() + r * d;
        T* yr = y.data().data() + r * d;
        T mean{0};
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<T>(d);
        const T inv = T{1} / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) yr[i] = gamma[i] * ((xr[i] - mean) * inv) + beta[i];
    }
    return y;
}

template <typename T>
T gelu_scalar(T x) {
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T u = k * (x + static_cast<T>(0.044715) * x * x * x);
    return static_cast<T>(0.5) * x * (T{1} + std::tanh(u));
}

template <typename T>
T gelu_derivative(T x) {
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T c = static_cast<T>(0.044715);
    const T t = std::tanh(k * (x + c * x * x * x));
    return static_cast<T>(0.5) * (T{1} + t) + static_cast<T>(0.5) * x * (T{1} - t * t) * k * (T{1} + 3 * c * x * x);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
    return y;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = gelu_scalar(x[i]);
    return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::expect(a.shape() == b.shape(), "add of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
    return y;
}

/// Softmax over the trailing axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::size_t d = x.shape().back();
    const std::size_t n = detail::leading(x.shape());
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const T* xr = x.data().data() + r * d;
        T* yr = y.data().data() + r * d;
        T m = xr[0];
        for (std::size_t i = 1; i < d; ++i) m = std::max(m, xr[i]);
        T s{0};
        for (std::size_t i = 0; i < d; ++i) {
            yr[i] = std::exp(xr[i] - m);
            s += yr[i];
        }
        for (std::size_t i = 0; i < d; ++i) yr[i] /= s;
    }
    return y;
}

/// Batched matmul. a: [G,m,k]; b: [G,k,n] (or [G,n,k] when transpose_b).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
    detail::expect(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
                   "bmm expects matching [G,.,.] operands, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    detail::expect((transpose_b ? b.dim(2) : b.dim(1)) == k, "bmm inner extent mismatch");
    Tensor<T> y({g, m, n});
    for (std::size_t gi = 0; gi < g; ++gi) {
        const T* ap = a.data().data() + gi * m * k;
        const T* bp = b.data().data() + gi * k * n;
        T* yp = y.data().data() + gi * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                T acc{0};
                if (transpose_b) {
                    for (std::size_t t = 0; t < k; ++t) acc += ap[i * k + t] * bp[j * k + t];
                } else {
                    for (std::size_t t = 0; t < k; ++t) acc += ap[i * k + t] * bp[t * n + j];
                }
                yp[i * n + j] = acc;
            }
    }
    return y;
}

/// a^T b for a: [G,k,m], b: [G,k,n] -> [G,m,n].
template <typename T>
Tensor<T> bmm_at(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t g = a.dim(0), k = a.dim(1), m = a.dim(2), n = b.dim(2);
    Tensor<T> y({g, m, n});
    for (std::size_t gi = 0; gi < g; ++gi) {
        const T* ap = a.data().data() + gi * k * m;
        const T* bp = b.data().data() + gi * k * n;
        T* yp = y.data().data() + gi * m * n;
        for (std::size_t t = 0; t < k; ++t)
            for (std::size_t i = 0; i < m; ++i) {
                const T av = ap[t * m + i];
                for (std::size_t j = 0; j < n; ++j) yp[i * n + j] += av * bp[t * n + j];
            }
    }
    return y;
}

/// [B,T,H*dh] -> [B*H,T,dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
    Tensor<T> y({b * heads, t, dh});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ti = 0; ti < t; ++ti)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t j = 0; j < dh; ++j)
                    y[((bi * heads + h) * t + ti) * dh + j] = x[(bi * t + ti) * d + h * dh + j];
    return y;
}

/// [B*H,T,dh] -> [B,T,H*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
    const std::size_t b = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2), d = dh * heads;
    Tensor<T> y({b, t, d});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ti = 0; ti < t; ++ti)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t j = 0; j < dh; ++j)
                    y[(bi * t + ti) * d + h * dh + j] = x[((bi * heads + h) * t + ti) * dh + j];
    return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * c;
    return y;
}

/// Multi-head self-attention with per-head scaling 1/sqrt(d/H). Composed of
/// the same kernels the autodiff graph records, in the same order.
template <typename T>
Tensor<T> msa(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& bq, const Tensor<T>& wk,
              const Tensor<T>& bk, const Tensor<T>& wv, const Tensor<T>& bv, const Tensor<T>& wo,
              const Tensor<T>& bo, std::size_t heads) {
    detail::expect(x.rank() == 3, "msa input must be [B,T,d], got " + shape_str(x.shape()));
    const std::size_t d = x.dim(2);
    if (heads == 0 || d % heads != 0) {
        throw Error(ErrorKind::shape, "msa embedding dim " + std::to_string(d) + " not divisible by heads " +
                                          std::to_string(heads));
    }
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(d / heads));
    auto q = split_heads(linear(x, wq, bq), heads);
    auto k = split_heads(linear(x, wk, bk), heads);
    auto v = split_heads(linear(x, wv, bv), heads);
    auto p = softmax(scale(bmm(q, k, true), inv_sqrt));
    return linear(merge_heads(bmm(p, v, false), heads), wo, bo);
}

/// [B,C,H,W] -> [B,(H/p)(W/p),C*p*p]; patches in row-major grid order,
/// features ordered (channel, row, col).
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t p) {
    detail::expect(x.rank() == 4, "patchify input must be [B,C,H,W]");
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::expect(p >= 1 && h % p == 0 && w % p == 0,
                   "patch size " + std::to_string(p) + " must divide H,W of " + shape_str(x.shape()));
    const std::size_t gh = h / p, gw = w / p, f = c * p * p;
    Tensor<T> y({b, gh * gw, f});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ph = 0; ph < gh; ++ph)
            for (std::size_t pw = 0; pw < gw; ++pw)
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < p; ++j)
                            y[((bi * gh * gw) + ph * gw + pw) * f + (ci * p + i) * p + j] =
                                x[((bi * c + ci) * h + ph * p + i) * w + pw * p + j];
    return y;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& y, const Shape& xshape, std::size_t p) {
    Tensor<T> x(xshape);
    const std::size_t b = xshape[0], c = xshape[1], h = xshape[2], w = xshape[3];
    const std::size_t gh = h / p, gw = w / p, f = c * p * p;
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ph = 0; ph < gh; ++ph)
            for (std::size_t pw = 0; pw < gw; ++pw)
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < p; ++j)
                            x[((bi * c + ci) * h + ph * p + i) * w + pw * p + j] =
                                y[((bi * gh * gw) + ph * gw + pw) * f + (ci * p + i) * p + j];
    return x;
}

/// x[B,T,d] + pos[T,d]
template <typename T>
Tensor<T> add_positional(const Tensor<T>& x, const Tensor<T>& pos) {
    detail::expect(x.rank() == 3 && pos.numel() == x.dim(1) * x.dim(2),
                   "positional table must be [T,d] matching input " + shape_str(x.shape()));
    Tensor<T> y(x.shape());
    const std::size_t td = pos.numel();
    for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t i = 0; i < td; ++i) y[b * td + i] = x[b * td + i] + pos[i];
    return y;
}

/// [B,C,H,W] -> [B,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::expect(x.rank() == 4, "global_avg_pool input must be [B,C,H,W]");
    const std::size_t plane = x.dim(2) * x.dim(3);
    Tensor<T> y({x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < y.numel(); ++i) {
        T s{0};
        for (std::size_t j = 0; j < plane; ++j) s += x[i * plane + j];
        y[i] = s / static_cast<T>(plane);
    }
    return y;
}

/// [B,T,d] -> [B,d]
template <typename T>
Tensor<T> token_mean_pool(const Tensor<T>& x) {
    detail::expect(x.rank() == 3, "token_mean_pool input must be [B,T,d]");
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    Tensor<T> y({b, d});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t j = 0; j < d; ++j) {
            T s{0};
            for (std::size_t ti = 0; ti < t; ++ti) s += x[(bi * t + ti) * d + j];
            y[bi * d + j] = s / static_cast<T>(t);
        }
    return y;
}

}  // namespace repl::kernels
