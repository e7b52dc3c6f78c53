#pragma once

// Shared fixtures for the unit suites.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "repl/builder.hpp"
#include "repl/rng.hpp"
#include "repl/tensor.hpp"

namespace repl::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& s, std::uint64_t seed, double scale = 1.0, const char* stream = "test") {
    Rng rng(seed, stream);
    Tensor<T> t(s);
    for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
    return t;
}

/// Uniform in [lo, hi]; keeps ReLU arguments away from the kink when shifted.
template <typename T = double>
Tensor<T> uniform_tensor(const Shape& s, std::uint64_t seed, double lo, double hi) {
    Rng rng(seed, "uniform");
    Tensor<T> t(s);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
    Rng rng(seed, "labels");
    std::vector<int> out(n);
    for (auto& y : out) y = static_cast<int>(rng.index(classes));
    return out;
}

/// Perturbs every parameter so that BN affines and coefficients are generic.
template <typename T>
void jitter_params(Network<T>& net, std::uint64_t seed, double scale = 0.1) {
    Rng rng(seed, "jitter");
    for (const auto& [id, e] : net.store.params()) {
        for (auto& v : net.store.mutable_value(id).data()) v += static_cast<T>(scale * rng.normal());
    }
}

/// Gives BN buffers non-trivial running statistics.
template <typename T>
void randomize_running_stats(Network<T>& net, std::uint64_t seed) {
    Rng rng(seed, "stats");
    for (const auto& [id, b] : net.store.buffers()) {
        const bool is_var = id.key.size() >= 3 && id.key.compare(id.key.size() - 3, 3, "var") == 0;
        for (auto& v : net.store.mutable_buffer(id).data())
            v = static_cast<T>(is_var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.3, 0.3));
    }
}

inline NetworkSpec tiny_basic(std::size_t blocks = 5, std::size_t C = 4, std::size_t hw = 6) {
    NetworkSpec s;
    s.family = Family::resnet_basic;
    s.in_channels = 2;
    s.height = s.width = hw;
    s.classes = 3;
    s.stem_channels = C;
    s.stages = {StageSpec{blocks, C, 0, 1}};
    return s;
}

inline NetworkSpec tiny_bottleneck(std::size_t blocks = 5, std::size_t C = 8, std::size_t B = 4) {
    NetworkSpec s;
    s.family = Family::resnet_bottleneck;
    s.in_channels = 2;
    s.height = s.width = 5;
    s.classes = 3;
    s.stem_channels = C;
    s.stages = {StageSpec{blocks, C, B, 1}};
    return s;
}

inline NetworkSpec tiny_vit(std::size_t depth = 5, VitSynth synth = VitSynth::headwise) {
    NetworkSpec s;
    s.family = Family::vit;
    s.in_channels = 1;
    s.height = s.width = 4;
    s.patch = 2;
    s.dim = 8;
    s.heads = 2;
    s.mlp_dim = 16;
    s.depth = depth;
    s.classes = 3;
    s.vit_synth = synth;
    return s;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("repl_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace repl::testing
