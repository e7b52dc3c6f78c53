#pragma once

// Optimizers, the per-epoch training loop and evaluation metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "repl/builder.hpp"

namespace repl {

/// Labelled images, [N,C,H,W] row-major, labels in [0, classes).
template <typename T>
struct Dataset {
    Tensor<T> images;
    std::vector<int> labels;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

    /// Copies the samples at `idx[first, first + count)` into one batch.
    Tensor<T> gather(std::span<const std::size_t> idx, std::vector<int>& batch_labels) const {
        Shape s = images.shape();
        s[0] = idx.size();
        Tensor<T> out(s);
        const std::size_t per = images.numel() / images.dim(0);
        batch_labels.clear();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(images.data().begin() + idx[i] * per, per, out.data().begin() + i * per);
            batch_labels.push_back(labels[idx[i]]);
        }
        return out;
    }
};

enum class OptimizerKind { sgd, adamw };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adamw"; }

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double lr = 0.05;
    double momentum = 0.9;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double weight_decay = 5e-4;
};

/// Optimizer slots keyed by trainable parameter id.
template <typename T>
struct OptimState {
    std::map<ParamId, Tensor<T>> first, second;
    std::uint64_t step = 0;
    std::vector<std::string> warnings;

    bool operator==(const OptimState& o) const { return first == o.first && second == o.second && step == o.step; }
};

namespace detail {

template <typename T>
const Tensor<T>& grad_or_zero(const GradMap<T>& grads, const ParamId& id, const Tensor<T>& like,
                              OptimState<T>& state, Tensor<T>& scratch) {
    if (auto it = grads.find(id); it != grads.end()) return it->second;
    state.warnings.push_back("no gradient for trainable parameter " + id.key + "; treated as zero");
    scratch = Tensor<T>(like.shape());
    return scratch;
}

}  // namespace detail

/// Momentum SGD: buf = momentum * buf + (g + wd * w); w -= lr * buf. The
/// first step initializes buf to the gradient. Decay skips exempt ids.
template <typename T>
void sgd_step(ParamStore<T>& store, const GradMap<T>& grads, OptimState<T>& state, const OptimizerConfig& cfg,
              double lr) {
    if (!(lr > 0)) throw Error(ErrorKind::config, "learning rate must be positive");
    Tensor<T> scratch;
    for (const auto& [id, entry] : store.params()) {
        if (!entry.info.trainable) continue;
        auto& w = store.mutable_value(id);
        const auto& g = detail::grad_or_zero(grads, id, w, state, scratch);
        const T wd = entry.info.decay_exempt ? T{0} : static_cast<T>(cfg.weight_decay);
        auto [it, fresh] = state.first.try_emplace(id, w.shape());
        auto& buf = it->second;
        const T mom = static_cast<T>(cfg.momentum);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const T d = g[i] + wd * w[i];
            buf[i] = fresh ? d : mom * buf[i] + d;
            w[i] -= static_cast<T>(lr) * buf[i];
        }
    }
    ++state.step;
}

/// AdamW with bias-corrected moments and decoupled decay.
template <typename T>
void adamw_step(ParamStore<T>& store, const GradMap<T>& grads, OptimState<T>& state, const OptimizerConfig& cfg,
                double lr) {
    if (!(lr > 0)) throw Error(ErrorKind::config, "learning rate must be positive");
    const std::uint64_t t = ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(t)), c2 = 1.0 - std::pow(cfg.beta2, double(t));
    Tensor<T> scratch;
    for (const auto& [id, entry] : store.params()) {
        if (!entry.info.trainable) continue;
        auto& w = store.mutable_value(id);
        const auto& g = detail::grad_or_zero(grads, id, w, state, scratch);
        auto& m = state.first.try_emplace(id, w.shape()).first->second;
        auto& v = state.second.try_emplace(id, w.shape()).first->second;
        const double wd = entry.info.decay_exempt ? 0.0 : cfg.weight_decay;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            m[i] = static_cast<T>(cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i]);
            v[i] = static_cast<T>(cfg.beta2 * v[i] + (1 - cfg.beta2) * double(g[i]) * g[i]);
            const double mh = m[i] / c1, vh = v[i] / c2;
            w[i] = static_cast<T>(w[i] - lr * wd * w[i] - lr * mh / (std::sqrt(vh) + cfg.adam_eps));
        }
    }
}

template <typename T>
void optimizer_step(ParamStore<T>& store, const GradMap<T>& grads, OptimState<T>& state, const OptimizerConfig& cfg,
                    double lr) {
    if (cfg.kind == OptimizerKind::sgd) {
        sgd_step(store, grads, state, cfg, lr);
    } else {
        adamw_step(store, grads, state, cfg, lr);
    }
}

/// lr * (1 + cos(pi * epoch / epochs)) / 2, epoch 0-based.
inline double cosine_lr(double base, std::size_t epoch, std::size_t epochs) {
    if (epochs == 0) return base;
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(epochs)));
}

// ---- metrics ------------------------------------------------------------------

struct Metrics {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0;
    double accuracy = 0;
    double top5 = -1;  // only when classes >= 5
    double seconds = 0;
    std::size_t samples = 0;
};

/// Number of rows whose label is among the k largest logits (ties resolved
/// toward the lower class index).
template <typename T>
std::size_t topk_correct(const Tensor<T>& logits, std::span<const int> labels, std::size_t k) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::size_t hits = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const T* row = logits.data().data() + b * c;
        const int y = labels[b];
        std::size_t better = 0;
        for (std::size_t j = 0; j < c; ++j)
            if (row[j] > row[y] || (row[j] == row[y] && j < static_cast<std::size_t>(y))) ++better;
        if (better < k) ++hits;
    }
    return hits;
}

namespace detail {

template <typename T>
double batch_loss(const Tensor<T>& logits, std::span<const int> labels) {
    Tape<T> tape;
    return double(ad::cross_entropy(tape.constant(logits), labels).value().item());
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed, "shuffle.epoch" + std::to_string(epoch));
    rng.shuffle(idx);
    return idx;
}

}  // namespace detail

struct EpochOptions {
    std::size_t batch_size = 32;
    double lr = 0.05;
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
};

/// One pass over `data` in a (seed, epoch)-determined order: forward,
/// cross-entropy, backward, optimizer step per batch.
template <typename T>
Metrics train_epoch(Network<T>& net, const Dataset<T>& data, const OptimizerConfig& opt, OptimState<T>& state,
                    const EpochOptions& o) {
    if (data.size() == 0) throw Error(ErrorKind::value, "train_epoch: empty dataset");
    if (o.batch_size == 0) throw Error(ErrorKind::config, "batch size must be positive");
    const auto start = std::chrono::steady_clock::now();
    net.train();
    const auto order = detail::epoch_order(data.size(), o.seed, o.epoch);
    Metrics m{o.epoch, "train"};
    double loss_sum = 0;
    std::size_t hit1 = 0, hit5 = 0;
    std::vector<int> labels;
    for (std::size_t first = 0; first < order.size(); first += o.batch_size) {
        const std::size_t count = std::min(o.batch_size, order.size() - first);
        auto x = data.gather(std::span(order).subspan(first, count), labels);
        Tape<T> tape;
        auto logits = net.forward(tape, x);
        auto loss = ad::cross_entropy(logits, std::span<const int>(labels));
        tape.backward(loss);
        loss_sum += double(loss.value().item()) * double(count);
        hit1 += topk_correct(logits.value(), labels, 1);
        if (data.classes >= 5) hit5 += topk_correct(logits.value(), labels, 5);
        optimizer_step(net.store, tape.param_grads(), state, opt, o.lr);
    }
    m.samples = data.size();
    m.loss = loss_sum / double(m.samples);
    m.accuracy = double(hit1) / double(m.samples);
    if (data.classes >= 5) m.top5 = double(hit5) / double(m.samples);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
}

/// Eval-mode metrics over `data`; running statistics are not touched.
template <typename T>
Metrics evaluate(const Network<T>& net, const Dataset<T>& data, std::size_t batch_size = 256,
                 const std::string& split = "test") {
    if (data.size() == 0) throw Error(ErrorKind::value, "evaluate: empty dataset");
    const auto start = std::chrono::steady_clock::now();
    Metrics m{0, split};
    double loss_sum = 0;
    std::size_t hit1 = 0, hit5 = 0;
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<int> labels;
    for (std::size_t first = 0; first < idx.size(); first += batch_size) {
        const std::size_t count = std::min(batch_size, idx.size() - first);
        const auto x = data.gather(std::span(idx).subspan(first, count), labels);
        const auto logits = net.predict(x);
        loss_sum += detail::batch_loss(logits, labels) * double(count);
        hit1 += topk_correct(logits, labels, 1);
        if (data.classes >= 5) hit5 += topk_correct(logits, labels, 5);
    }
    m.samples = data.size();
    m.loss = loss_sum / double(m.samples);
    m.accuracy = double(hit1) / double(m.samples);
    if (data.classes >= 5) m.top5 = double(hit5) / double(m.samples);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
}

}  // namespace repl
