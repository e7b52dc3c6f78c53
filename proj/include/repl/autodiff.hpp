#pragma once

// Define-by-run reverse-mode autodiff. A Tape records every primitive
// application in topological order; backward() walks it once in reverse.

#include <compare>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "repl/kernels.hpp"
#include "repl/tensor.hpp"

namespace repl {

/// Names a parameter tensor by owner and role, e.g. "s1.b3.conv2".
struct ParamId {
    std::string key;

    ParamId() = default;
    ParamId(std::string k) : key(std::move(k)) {}  // NOLINT: implicit from string is intended
    ParamId(const char* k) : key(k) {}              // NOLINT

    auto operator<=>(const ParamId&) const = default;
    bool operator==(const ParamId&) const = default;
    const std::string& str() const { return key; }
};

enum class Mode { train, eval };

/// Forward FLOP tallies. Multiply-accumulates count as 2 FLOPs.
struct FlopStats {
    std::uint64_t mac = 0;          // conv / linear / batched matmul
    std::uint64_t elementwise = 0;  // everything else outside synthesis
    std::uint64_t synth = 0;        // elementwise work inside a synthesis scope
};

template <typename T>
class Tape;

template <typename T>
class Var {
   public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape<T>* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape_->requires_grad(id_); }

   private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <typename T>
using GradMap = std::map<ParamId, Tensor<T>>;

template <typename T>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, "constant"); }

    Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
        return push(std::move(value), requires_grad, {}, "leaf");
    }

    /// Leaf bound to a parameter. Repeated requests for the same id within a
    /// pass return the same node so all uses accumulate into one gradient.
    Var<T> param(const ParamId& id, const Tensor<T>& value, bool trainable) {
        if (auto it = params_.find(id); it != params_.end()) return Var<T>(this, it->second);
        auto v = push(value, trainable, {}, "param");
        params_.emplace(id, v.id());
        return v;
    }

    /// Records an op output. The node requires grad iff any input does.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn, const char* op) {
        bool rg = false;
        for (const auto& in : inputs) {
            if (in.tape() != this) throw Error(ErrorKind::internal, std::string(op) + ": input from another tape");
            rg = rg || nodes_[in.id()].requires_grad;
        }
        return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, op);
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Gradient accumulator for a node, zero-initialized on first use.
    /// Returns nullptr for nodes that do not require grad.
    Tensor<T>* grad_slot(std::size_t id) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (!n.grad) n.grad.emplace(n.value.shape());
        return &*n.grad;
    }

    const Tensor<T>* grad(std::size_t id) const {
        const auto& n = nodes_.at(id);
        return n.grad ? &*n.grad : nullptr;
    }

    Tensor<T> grad_or_zeros(Var<T> v) const {
        const auto* g = grad(v.id());
        return g ? *g : Tensor<T>(v.shape());
    }

    void backward(Var<T> loss) {
        if (loss.tape() != this) throw Error(ErrorKind::internal, "backward: loss from another tape");
        if (loss.value().numel() != 1) {
            throw Error(ErrorKind::shape, "backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        if (backward_done_) throw Error(ErrorKind::internal, "backward called twice on one tape");
        backward_done_ = true;
        auto* seed = grad_slot(loss.id());
        if (!seed) return;
        seed->fill(T{1});
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.backward && n.grad) n.backward(*this, *n.grad);
        }
    }

    /// Gradients of every trainable parameter leaf seen in this pass.
    GradMap<T> param_grads() const {
        GradMap<T> out;
        for (const auto& [id, node] : params_) {
            const auto& n = nodes_[node];
            if (!n.requires_grad) continue;
            out.emplace(id, n.grad ? *n.grad : Tensor<T>(n.value.shape()));
        }
        return out;
    }

    std::optional<Var<T>> find_param(const ParamId& id) {
        auto it = params_.find(id);
        if (it == params_.end()) return std::nullopt;
        return Var<T>(this, it->second);
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Number of recorded operator applications (leaves excluded).
    std::size_t op_count() const noexcept { return ops_; }

    FlopStats& flops() noexcept { return flops_; }
    const FlopStats& flops() const noexcept { return flops_; }

    void count_mac_flops(std::uint64_t n) { flops_.mac += n; }
    void count_elementwise_flops(std::uint64_t n) { (synth_depth_ ? flops_.synth : flops_.elementwise) += n; }

    /// While alive, elementwise work is attributed to weight synthesis.
    class SynthScope {
       public:
        explicit SynthScope(Tape& t) : tape_(t) { ++tape_.synth_depth_; }
        ~SynthScope() { --tape_.synth_depth_; }
        SynthScope(const SynthScope&) = delete;
        SynthScope& operator=(const SynthScope&) = delete;

       private:
        Tape& tape_;
    };
    SynthScope synth_scope() { return SynthScope(*this); }

   private:
    struct Node {
        Tensor<T> value;
        std::optional<Tensor<T>> grad;
        bool requires_grad = false;
        BackwardFn backward;
        const char* op = "";
    };

    Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn, const char* op) {
        nodes_.push_back(Node{std::move(value), std::nullopt, requires_grad, std::move(fn), op});
        if (std::string_view(op) != "leaf" && std::string_view(op) != "param" && std::string_view(op) != "constant") {
            ++ops_;
        }
        return Var<T>(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
    std::map<ParamId, std::size_t> params_;
    std::size_t ops_ = 0;
    FlopStats flops_;
    int synth_depth_ = 0;
    bool backward_done_ = false;
};

namespace detail {

template <typename T>
void accumulate(Tensor<T>* slot, const Tensor<T>& g) {
    if (!slot) return;
    for (std::size_t i = 0; i < g.numel(); ++i) (*slot)[i] += g[i];
}

}  // namespace detail

}  // namespace repl
