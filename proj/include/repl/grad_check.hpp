#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string_view>

#include "repl/autodiff.hpp"
#include "repl/params.hpp"

namespace repl {

/// Scalar-valued closure over a single input leaf.
template <typename T>
using ScalarFn = std::function<Var<T>(Tape<T>&, Var<T>)>;

template <typename T>
struct GradCheckResult {
    T max_rel_err = 0;
    std::size_t worst_index = 0;
    Tensor<T> analytic;
    Tensor<T> numeric;
};

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h against the tape
/// gradient, coordinate by coordinate. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
template <typename T>
GradCheckResult<T> grad_check_detailed(const ScalarFn<T>& f, const Tensor<T>& x, T h) {
    GradCheckResult<T> r;
    {
        Tape<T> tape;
        auto xv = tape.leaf(x, true);
        auto y = f(tape, xv);
        tape.backward(y);
        r.analytic = tape.grad_or_zeros(xv);
    }
    auto eval = [&](const Tensor<T>& at) {
        Tape<T> tape;
        auto xv = tape.leaf(at, false);
        return f(tape, xv).value().item();
    };
    r.numeric = Tensor<T>(x.shape());
    Tensor<T> probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + h;
        const T fp = eval(probe);
        probe[i] = orig - h;
        const T fm = eval(probe);
        probe[i] = orig;
        r.numeric[i] = (fp - fm) / (2 * h);
        const T a = r.analytic[i], n = r.numeric[i];
        const T denom = std::max({std::abs(a), std::abs(n), static_cast<T>(1e-8)});
        const T rel = std::abs(a - n) / denom;
        if (rel > r.max_rel_err) {
            r.max_rel_err = rel;
            r.worst_index = i;
        }
    }
    return r;
}

template <typename T>
T grad_check(const ScalarFn<T>& f, const Tensor<T>& x, T h = static_cast<T>(1e-5)) {
    return grad_check_detailed(f, x, h).max_rel_err;
}

template <typename T>
using StoreLossFn = std::function<Var<T>(const Context<T>&)>;

template <typename T>
struct ParamGradCheckResult {
    T max_rel_err = 0;
    ParamId worst{""};
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Central differences over every trainable entry of `store` not matched by
/// `skip`. Running statistics are never written, so repeated evaluations see
/// equal state.
template <typename T>
ParamGradCheckResult<T> param_grad_check(ParamStore<T>& store, Mode mode, const StoreLossFn<T>& f,
                                         T h = static_cast<T>(1e-5),
                                         const std::function<bool(const ParamId&)>& skip = {}) {
    GradMap<T> analytic;
    {
        Tape<T> tape;
        Context<T> ctx{tape, store, nullptr, mode};
        tape.backward(f(ctx));
        analytic = tape.param_grads();
    }
    auto eval = [&] {
        Tape<T> tape;
        Context<T> ctx{tape, store, nullptr, mode};
        return f(ctx).value().item();
    };
    ParamGradCheckResult<T> r;
    for (const auto& [id, entry] : store.params()) {
        if (!entry.info.trainable || (skip && skip(id))) continue;
        auto& w = store.mutable_value(id);
        const auto it = analytic.find(id);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const T orig = w[i];
            w[i] = orig + h;
            const T fp = eval();
            w[i] = orig - h;
            const T fm = eval();
            w[i] = orig;
            const T n = (fp - fm) / (2 * h);
            const T a = it == analytic.end() ? T{0} : it->second[i];
            const T rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), static_cast<T>(1e-8)});
            ++r.checked;
            if (rel > r.max_rel_err) {
                r.max_rel_err = rel;
                r.worst = id;
                r.worst_index = i;
            }
        }
    }
    return r;
}

/// Attention key biases shift every score of a query by the same amount, so
/// softmax cancels them: their gradient is exactly zero and a difference
/// quotient measures only rounding.
inline bool is_key_bias(const ParamId& id) {
    const std::string_view k = id.key, tail = "attn.bk";
    return k.size() >= tail.size() && k.substr(k.size() - tail.size()) == tail;
}

}  // namespace repl
