#pragma once

// Empirical error analysis of replaced networks: local replacement error,
// hybrid-chain (telescoped) output deviation, suffix amplification and the
// least-squares recoverability of synthesis coefficients.
//
// All "hat" quantities are maxima over a finite sample set, so they are
// lower bounds of the corresponding suprema over the activation domain.
// Activations use the l2 norm per sample, weights the Frobenius norm.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include "repl/builder.hpp"

namespace repl {

namespace detail {

/// l2 norm of each leading-axis slice, accumulated in double.
template <typename T>
std::vector<double> sample_norms(const Tensor<T>& x) {
    if (x.rank() == 0 || x.dim(0) == 0) return {};
    const std::size_t n = x.dim(0), per = x.numel() / n;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < per; ++k) s += double(x[i * per + k]) * double(x[i * per + k]);
        out[i] = std::sqrt(s);
    }
    return out;
}

template <typename T>
std::vector<double> sample_distances(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorKind::shape, "sample distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> d(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) d[i] = a[i] - b[i];
    return sample_norms(d);
}

}  // namespace detail

/// Eval-mode application of units [first, last) of `net` to a batch.
template <typename T>
Tensor<T> run_units(const Network<T>& net, const Tensor<T>& x, std::size_t first, std::size_t last) {
    Tape<T> tape;
    return net.run_eval(tape, tape.constant(x), first, last).value();
}

/// Input activations of unit `unit` for a batch of network inputs.
template <typename T>
Tensor<T> site_activations(const Network<T>& net, std::size_t unit, const Tensor<T>& inputs) {
    net.check_input(inputs.shape());
    return run_units(net, inputs, 0, unit);
}

// ---- local replacement error ----------------------------------------------

struct LocalError {
    double eps_hat = 0;  // max ||g(h) - f(h)|| / max(||h||, 1)
    double H_hat = 0;    // max ||h||
    std::size_t samples = 0;
};

/// `f` and `g` map a batch [N, ...] to a batch; each row is one sample.
template <typename T, typename F, typename G>
LocalError local_replacement_error(F&& f, G&& g, const Tensor<T>& samples) {
    if (samples.rank() == 0 || samples.dim(0) == 0) {
        throw Error(ErrorKind::value, "local_replacement_error: empty sample set");
    }
    const Tensor<T> fy = f(samples), gy = g(samples);
    const auto dist = detail::sample_distances(gy, fy);
    const auto norms = detail::sample_norms(samples);
    LocalError r{0, 0, norms.size()};
    for (std::size_t i = 0; i < norms.size(); ++i) {
        r.eps_hat = std::max(r.eps_hat, dist[i] / std::max(norms[i], 1.0));
        r.H_hat = std::max(r.H_hat, norms[i]);
    }
    return r;
}

// ---- suffix amplification ---------------------------------------------------

/// max over pairs of ||S(a) - S(b)|| / ||a - b|| where S runs units
/// [first, end) of `net`. Rows of `a` and `b` are paired.
template <typename T>
double suffix_amplification(const Network<T>& net, std::size_t first, const Tensor<T>& a, const Tensor<T>& b) {
    const auto din = detail::sample_distances(a, b);
    for (double d : din)
        if (d == 0) throw Error(ErrorKind::value, "suffix_amplification: zero-distance probe pair");
    const auto dout = detail::sample_distances(run_units(net, a, first, net.units.size()),
                                               run_units(net, b, first, net.units.size()));
    double pi = 0;
    for (std::size_t i = 0; i < din.size(); ++i) pi = std::max(pi, dout[i] / din[i]);
    return pi;
}

/// Largest number of output*input entries for which a dense per-unit
/// Jacobian is formed.
inline constexpr std::size_t kMaxJacobianEntries = 4096;

/// Dense Jacobian of unit `u` at the single sample `x` ([1, ...]),
/// row-major [out, in].
template <typename T>
std::vector<double> unit_jacobian(const Network<T>& net, std::size_t u, const Tensor<T>& x, std::size_t& out_dim) {
    const std::size_t in_dim = x.numel();
    out_dim = run_units(net, x, u, u + 1).numel();
    if (in_dim * out_dim > kMaxJacobianEntries) {
        throw Error(ErrorKind::value, "dense Jacobian of " + std::to_string(out_dim) + "x" + std::to_string(in_dim) +
                                          " exceeds " + std::to_string(kMaxJacobianEntries) + " entries");
    }
    std::vector<double> jac(out_dim * in_dim);
    for (std::size_t row = 0; row < out_dim; ++row) {
        Tape<T> tape;
        auto in = tape.leaf(x);
        auto y = net.run_eval(tape, in, u, u + 1);
        Tensor<T> pick(y.shape());
        pick[row] = T{1};
        tape.backward(ad::sum(ad::mul(y, tape.constant(pick))));
        const auto g = tape.grad_or_zeros(in);
        for (std::size_t k = 0; k < in_dim; ++k) jac[row * in_dim + k] = double(g[k]);
    }
    return jac;
}

/// Spectral norm of a dense [m, n] matrix by power iteration on J^T J.
inline double spectral_norm(const std::vector<double>& j, std::size_t m, std::size_t n) {
    std::vector<double> v(n, 1.0 / std::sqrt(double(n))), w(m), z(n);
    double lambda = 0;
    for (int it = 0; it < 2000; ++it) {
        for (std::size_t r = 0; r < m; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < n; ++c) s += j[r * n + c] * v[c];
            w[r] = s;
        }
        for (std::size_t c = 0; c < n; ++c) {
            double s = 0;
            for (std::size_t r = 0; r < m; ++r) s += j[r * n + c] * w[r];
            z[c] = s;
        }
        double nz = 0;
        for (double e : z) nz += e * e;
        nz = std::sqrt(nz);
        if (nz == 0) return 0;
        for (std::size_t c = 0; c < n; ++c) v[c] = z[c] / nz;
        if (std::abs(nz - lambda) <= 1e-14 * nz) {
            lambda = nz;
            break;
        }
        lambda = nz;
    }
    return std::sqrt(lambda);
}

/// Upper proxy of the suffix Lipschitz factor for one probe pair: product
/// over suffix units of the largest Jacobian spectral norm sampled along
/// the segment joining the two propagated inputs of that unit.
template <typename T>
double jacobian_product_proxy(const Network<T>& net, std::size_t first, Tensor<T> a, Tensor<T> b,
                              std::size_t segment_points = 16) {
    if (a.shape() != b.shape() || a.dim(0) != 1) {
        throw Error(ErrorKind::shape, "jacobian_product_proxy takes one [1, ...] sample per side");
    }
    double product = 1;
    for (std::size_t u = first; u < net.units.size(); ++u) {
        double best = 0;
        for (std::size_t s = 0; s <= segment_points; ++s) {
            const double t = double(s) / double(segment_points);
            Tensor<T> p(a.shape());
            for (std::size_t i = 0; i < p.numel(); ++i) p[i] = static_cast<T>(a[i] + t * (b[i] - a[i]));
            std::size_t m = 0;
            const auto jac = unit_jacobian(net, u, p, m);
            best = std::max(best, spectral_norm(jac, m, p.numel()));
        }
        product *= best;
        a = run_units(net, a, u, u + 1);
        b = run_units(net, b, u, u + 1);
    }
    return product;
}

// ---- telescoped deviation ---------------------------------------------------

struct SiteError {
    std::string prefix;
    std::size_t unit = 0;
    double eps_hat = 0, H_hat = 0, Pi_hat = 0;
    double max_term = 0;  // max over samples of ||hybrid_j - hybrid_{j-1}||
    double bound_term() const { return Pi_hat * eps_hat * std::max(H_hat, 1.0); }
};

struct ErrorReport {
    std::vector<SiteError> sites;
    std::vector<std::vector<double>> terms;  // [sample][site]
    std::vector<double> deviation;           // ||F_repl - F_e2e|| per sample
    double max_deviation = 0;
    double bound = 0;  // sum of Pi_hat * eps_hat * max(H_hat, 1)
    bool triangle_holds = true;
    bool bound_holds = true;
};

/// Relative slack for comparisons that hold exactly in real arithmetic.
inline constexpr double kRoundingSlack = 1e-12;

/// Replaces the sites of `e2e` one at a time with the computing layers of
/// `repl` and decomposes the output deviation into per-site steps. The
/// replaced network is evaluated on the retained parameters of `e2e`.
template <typename T>
ErrorReport telescoped_deviation(const Network<T>& e2e, const Network<T>& repl, const Tensor<T>& inputs) {
    if (e2e.spec.method != Method::e2e || repl.spec.method != Method::repl || e2e.sites.size() != repl.sites.size() ||
        e2e.units.size() != repl.units.size()) {
        throw Error(ErrorKind::config, "telescoped_deviation: networks do not share a removal plan");
    }
    for (std::size_t j = 0; j < e2e.sites.size(); ++j) {
        const auto &p = e2e.sites[j], &q = repl.sites[j];
        if (p.stage != q.stage || p.block != q.block || p.unit != q.unit) {
            throw Error(ErrorKind::config, "telescoped_deviation: site " + std::to_string(j) + " differs");
        }
    }
    e2e.check_input(inputs.shape());
    const std::size_t n = inputs.dim(0), R = e2e.sites.size(), end = e2e.units.size();

    ErrorReport rep;
    rep.terms.assign(n, std::vector<double>(R, 0.0));
    std::vector<double> sums(n, 0.0);
    auto prev = e2e;  // hybrid_{j-1}
    for (std::size_t j = 0; j < R; ++j) {
        auto next = hybrid_network(e2e, repl, j + 1);
        const std::size_t u = e2e.sites[j].unit;
        const auto h = run_units(prev, inputs, 0, u);
        const auto fb = run_units(prev, h, u, u + 1);
        const auto ga = run_units(next, h, u, u + 1);
        const auto out_a = run_units(prev, ga, u + 1, end);
        const auto out_b = run_units(prev, fb, u + 1, end);

        const auto hn = detail::sample_norms(h);
        const auto din = detail::sample_distances(ga, fb);
        const auto dout = detail::sample_distances(out_a, out_b);
        SiteError s{unit_name(next.units[u]), u};
        for (std::size_t i = 0; i < n; ++i) {
            s.H_hat = std::max(s.H_hat, hn[i]);
            s.eps_hat = std::max(s.eps_hat, din[i] / std::max(hn[i], 1.0));
            if (din[i] > 0) s.Pi_hat = std::max(s.Pi_hat, dout[i] / din[i]);
            s.max_term = std::max(s.max_term, dout[i]);
            rep.terms[i][j] = dout[i];
            sums[i] += dout[i];
        }
        rep.bound += s.bound_term();
        rep.sites.push_back(std::move(s));
        prev = std::move(next);
    }
    rep.deviation = detail::sample_distances(run_units(prev, inputs, 0, end), run_units(e2e, inputs, 0, end));
    for (std::size_t i = 0; i < n; ++i) {
        rep.max_deviation = std::max(rep.max_deviation, rep.deviation[i]);
        if (rep.deviation[i] > sums[i] * (1 + kRoundingSlack) + kRoundingSlack * 1e-3) rep.triangle_holds = false;
    }
    rep.bound_holds = rep.max_deviation <= rep.bound * (1 + kRoundingSlack) + kRoundingSlack * 1e-3;
    if (!rep.triangle_holds || !rep.bound_holds) {
        throw Error(ErrorKind::internal, "telescoped_deviation: decomposition inequality violated");
    }
    return rep;
}

// ---- coefficient recoverability --------------------------------------------

/// Element partition of a flattened tensor viewed as [outer, groups, inner]:
/// element i belongs to group (i / inner) % groups.
struct GroupLayout {
    std::size_t outer = 1, groups = 1, inner = 0;

    static GroupLayout whole(std::size_t numel) { return {1, 1, numel}; }
    /// One group per leading-axis slice (per output channel or row).
    static GroupLayout rows(const Shape& s) {
        const std::size_t n = shape_numel(s);
        return {1, s.at(0), s.at(0) ? n / s.at(0) : 0};
    }
    /// Column blocks of a [d, d] projection, one per head.
    static GroupLayout heads(const Shape& s, std::size_t h) { return {s.at(0), h, s.at(1) / h}; }

    std::size_t group_of(std::size_t i) const { return (i / inner) % groups; }
};

struct FitResult {
    std::vector<double> alpha, beta;  // one pair per group
    double residual = 0;              // Frobenius, over all groups
    bool rank_deficient = false;
};

/// ||target - alpha*A - beta*B||_F with per-group coefficients.
template <typename T>
double fit_residual(const Tensor<T>& target, const Tensor<T>& A, const Tensor<T>& B, const GroupLayout& layout,
                    std::span<const double> alpha, std::span<const double> beta) {
    double s = 0;
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const std::size_t g = layout.group_of(i);
        const double r = double(target[i]) - alpha[g] * double(A[i]) - beta[g] * double(B[i]);
        s += r * r;
    }
    return std::sqrt(s);
}

namespace detail {

/// Minimum-norm solution of the symmetric system [[a, c], [c, b]] x = r.
inline std::pair<double, double> solve_sym2(double a, double b, double c, double r1, double r2, bool& deficient) {
    const double tr = a + b, det = a * b - c * c;
    constexpr double tol = 1e-12;
    if (tr <= 0) {
        deficient = true;
        return {0.0, 0.0};
    }
    if (det > tol * tr * tr) return {(b * r1 - c * r2) / det, (a * r2 - c * r1) / det};
    // Rank one: project onto the dominant eigenvector.
    deficient = true;
    const double disc = std::sqrt(std::max(0.0, (a - b) * (a - b) / 4 + c * c));
    const double lambda = tr / 2 + disc;
    double v1 = c, v2 = lambda - a;
    if (std::abs(v1) + std::abs(v2) == 0) {
        v1 = lambda - b;
        v2 = c;
    }
    if (std::abs(v1) + std::abs(v2) == 0) {
        v1 = a >= b ? 1.0 : 0.0;
        v2 = 1.0 - v1;
    }
    const double nv = std::hypot(v1, v2);
    v1 /= nv;
    v2 /= nv;
    const double k = (v1 * r1 + v2 * r2) / lambda;
    return {k * v1, k * v2};
}

}  // namespace detail

/// Least-squares (alpha, beta) per group for target ~ alpha*prev + beta*next.
/// With `normalized`, anchors are row-normalized first (as in synthesis).
template <typename T>
FitResult best_fit_coeffs(const Tensor<T>& target, const Tensor<T>& prev, const Tensor<T>& next, bool normalized,
                          std::optional<GroupLayout> layout = std::nullopt) {
    if (target.shape() != prev.shape() || target.shape() != next.shape()) {
        throw Error(ErrorKind::shape, "best_fit_coeffs: shapes " + shape_str(target.shape()) + ", " +
                                          shape_str(prev.shape()) + ", " + shape_str(next.shape()));
    }
    const GroupLayout lay = layout.value_or(GroupLayout::whole(target.numel()));
    if (lay.outer * lay.groups * lay.inner != target.numel()) {
        throw Error(ErrorKind::shape, "best_fit_coeffs: group layout does not cover the tensor");
    }
    const Tensor<T> A = normalized ? normalize_rows_of(prev, prev.dim(0), static_cast<T>(kSynthEps)) : prev;
    const Tensor<T> B = normalized ? normalize_rows_of(next, next.dim(0), static_cast<T>(kSynthEps)) : next;

    std::vector<double> aa(lay.groups), bb(lay.groups), ab(lay.groups), at(lay.groups), bt(lay.groups);
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const std::size_t g = lay.group_of(i);
        const double x = A[i], y = B[i], t = target[i];
        aa[g] += x * x;
        bb[g] += y * y;
        ab[g] += x * y;
        at[g] += x * t;
        bt[g] += y * t;
    }
    FitResult r;
    r.alpha.resize(lay.groups);
    r.beta.resize(lay.groups);
    for (std::size_t g = 0; g < lay.groups; ++g) {
        std::tie(r.alpha[g], r.beta[g]) = detail::solve_sym2(aa[g], bb[g], ab[g], at[g], bt[g], r.rank_deficient);
    }
    r.residual = fit_residual(target, A, B, lay, r.alpha, r.beta);
    return r;
}

}  // namespace repl
