#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "repl/autodiff.hpp"
#include "repl/ops.hpp"
#include "repl/rng.hpp"

namespace repl {

/// Partition of a network's parameters. `frozen` only appears in the
/// frozen-anchor twin used to test gradient opacity.
enum class ParamGroup { retained, head, computing, frozen };

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::retained: return "retained";
        case ParamGroup::head: return "head";
        case ParamGroup::computing: return "computing";
        case ParamGroup::frozen: return "frozen";
    }
    return "?";
}

struct ParamInfo {
    ParamGroup group = ParamGroup::retained;
    bool trainable = true;
    bool decay_exempt = false;
};

/// Owns every parameter and buffer (BN running statistics) of a network.
template <typename T>
class ParamStore {
   public:
    struct Entry {
        Tensor<T> value;
        ParamInfo info;
    };

    void add_param(const ParamId& id, Tensor<T> value, ParamInfo info) {
        if (params_.contains(id) || buffers_.contains(id)) {
            throw Error(ErrorKind::internal, "duplicate parameter id " + id.key);
        }
        params_.emplace(id, Entry{std::move(value), info});
    }

    void add_buffer(const ParamId& id, Tensor<T> value) {
        if (params_.contains(id) || buffers_.contains(id)) {
            throw Error(ErrorKind::internal, "duplicate buffer id " + id.key);
        }
        buffers_.emplace(id, std::move(value));
    }

    bool contains(const ParamId& id) const { return params_.contains(id); }
    bool has_buffer(const ParamId& id) const { return buffers_.contains(id); }

    const Tensor<T>& value(const ParamId& id) const { return entry(id).value; }
    Tensor<T>& mutable_value(const ParamId& id) { return const_cast<Entry&>(entry(id)).value; }
    const ParamInfo& info(const ParamId& id) const { return entry(id).info; }

    const Tensor<T>& buffer(const ParamId& id) const {
        auto it = buffers_.find(id);
        if (it == buffers_.end()) throw Error(ErrorKind::internal, "unknown buffer " + id.key);
        return it->second;
    }
    Tensor<T>& mutable_buffer(const ParamId& id) { return const_cast<Tensor<T>&>(buffer(id)); }

    const std::map<ParamId, Entry>& params() const noexcept { return params_; }
    const std::map<ParamId, Tensor<T>>& buffers() const noexcept { return buffers_; }

    /// Registry walk: total element count of trainable parameters.
    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [id, e] : params_)
            if (e.info.trainable) n += e.value.numel();
        return n;
    }

    std::size_t count_in_group(ParamGroup g) const {
        std::size_t n = 0;
        for (const auto& [id, e] : params_)
            if (e.info.trainable && e.info.group == g) n += e.value.numel();
        return n;
    }

   private:
    const Entry& entry(const ParamId& id) const {
        auto it = params_.find(id);
        if (it == params_.end()) throw Error(ErrorKind::internal, "unknown parameter " + id.key);
        return it->second;
    }

    std::map<ParamId, Entry> params_;
    std::map<ParamId, Tensor<T>> buffers_;
};

/// Everything a forward pass needs: tape, parameters, mode. Running
/// statistics are only written through `mutable_store` in train mode.
template <typename T>
struct Context {
    Tape<T>& tape;
    const ParamStore<T>& store;
    ParamStore<T>* mutable_store = nullptr;
    Mode mode = Mode::eval;
    T bn_momentum = static_cast<T>(0.1);
    T bn_eps = static_cast<T>(1e-5);
    T ln_eps = static_cast<T>(1e-5);

    Var<T> param(const ParamId& id) const {
        const auto& info = store.info(id);
        return tape.param(id, store.value(id), info.trainable);
    }
};

template <typename T>
Context<T> make_context(Tape<T>& tape, ParamStore<T>& store, Mode mode) {
    return Context<T>{tape, store, mode == Mode::train ? &store : nullptr, mode};
}

template <typename T>
Context<T> make_eval_context(Tape<T>& tape, const ParamStore<T>& store) {
    return Context<T>{tape, store, nullptr, Mode::eval};
}

inline std::string join_id(const std::string& prefix, const std::string& role) {
    return prefix.empty() ? role : prefix + "." + role;
}

// ---- initialization -------------------------------------------------------

/// Kaiming-uniform with ReLU gain over fan-in: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, std::uint64_t seed, const std::string& stream) {
    Rng rng(seed, stream);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
Tensor<T> conv_init(std::size_t cout, std::size_t cin, std::size_t q, std::uint64_t seed, const std::string& id) {
    return kaiming_uniform<T>({cout, cin, q, q}, cin * q * q, seed, id);
}

template <typename T>
Tensor<T> linear_init(std::size_t dout, std::size_t din, std::uint64_t seed, const std::string& id) {
    return kaiming_uniform<T>({dout, din}, din, seed, id);
}

template <typename T>
struct BatchNormParams {
    Tensor<T> gamma, beta, mean, var;

    static BatchNormParams identity(std::size_t c) {
        return {Tensor<T>::ones({c}), Tensor<T>::zeros({c}), Tensor<T>::zeros({c}), Tensor<T>::ones({c})};
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma, beta;

    static LayerNormParams identity(std::size_t d) { return {Tensor<T>::ones({d}), Tensor<T>::zeros({d})}; }
};

template <typename T>
void install_bn(ParamStore<T>& store, const std::string& prefix, const BatchNormParams<T>& p, ParamGroup group) {
    store.add_param(join_id(prefix, "gamma"), p.gamma, {group, true, true});
    store.add_param(join_id(prefix, "beta"), p.beta, {group, true, true});
    store.add_buffer(join_id(prefix, "mean"), p.mean);
    store.add_buffer(join_id(prefix, "var"), p.var);
}

template <typename T>
void install_ln(ParamStore<T>& store, const std::string& prefix, const LayerNormParams<T>& p, ParamGroup group) {
    store.add_param(join_id(prefix, "gamma"), p.gamma, {group, true, true});
    store.add_param(join_id(prefix, "beta"), p.beta, {group, true, true});
}

/// Batch norm bound to "<prefix>.{gamma,beta,mean,var}".
template <typename T>
Var<T> bn_forward(const Context<T>& ctx, const std::string& prefix, Var<T> x) {
    auto gamma = ctx.param(join_id(prefix, "gamma"));
    auto beta = ctx.param(join_id(prefix, "beta"));
    const ParamId mean_id = join_id(prefix, "mean"), var_id = join_id(prefix, "var");
    if (ctx.mode == Mode::train) {
        Tensor<T>* rm = ctx.mutable_store ? &ctx.mutable_store->mutable_buffer(mean_id) : nullptr;
        Tensor<T>* rv = ctx.mutable_store ? &ctx.mutable_store->mutable_buffer(var_id) : nullptr;
        return ad::batch_norm<T>(x, gamma, beta, rm, rv, nullptr, nullptr, Mode::train, ctx.bn_momentum, ctx.bn_eps);
    }
    return ad::batch_norm<T>(x, gamma, beta, nullptr, nullptr, &ctx.store.buffer(mean_id), &ctx.store.buffer(var_id),
                          Mode::eval, ctx.bn_momentum, ctx.bn_eps);
}

template <typename T>
Var<T> ln_forward(const Context<T>& ctx, const std::string& prefix, Var<T> x) {
    return ad::layer_norm(x, ctx.param(join_id(prefix, "gamma")), ctx.param(join_id(prefix, "beta")), ctx.ln_eps);
}

}  // namespace repl
