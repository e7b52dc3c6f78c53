#pragma once

// Experiment orchestration over the grid variant x K x seed x method. Each
// cell trains one network, appends per-epoch records and a summary to
// <output_dir>/metrics.jsonl, and checkpoints to <output_dir>/<cell>/.

#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "repl/analysis.hpp"
#include "repl/cost_model.hpp"
#include "repl/harness/checkpoint.hpp"
#include "repl/harness/config.hpp"
#include "repl/harness/dataset.hpp"
#include "repl/harness/metrics.hpp"
#include "repl/harness/records.hpp"
#include "repl/trainer.hpp"

namespace repl::harness {

struct RunOptions {
    /// Stop every cell once this many epochs are complete (checkpointed, no
    /// summary); a later run with `resume` continues from there.
    std::optional<std::size_t> stop_after;
    bool resume = true;
    std::function<void(const std::string&)> log;
};

struct Cell {
    const Variant* variant = nullptr;
    std::size_t K = 4;
    std::uint64_t seed = 0;
    Method method = Method::repl;

    std::string variant_name() const { return variant ? variant->name : ""; }
    std::string name() const {
        return (variant ? variant->name + "_" : std::string()) + to_string(method) + "_K" + std::to_string(K) + "_s" +
               std::to_string(seed);
    }
};

/// Cells in run order; within a (variant, K, seed) group e2e runs first so
/// that its network can serve as the reference for the repl error report.
inline std::vector<Cell> experiment_cells(const ExperimentConfig& c) {
    std::vector<const Variant*> variants;
    for (const auto& v : c.variants) variants.push_back(&v);
    if (variants.empty()) variants.push_back(nullptr);
    const auto ks = c.k_values.empty() ? std::vector<std::size_t>{c.model.K} : c.k_values;
    std::vector<Cell> out;
    for (const auto* v : variants)
        for (auto K : ks)
            for (auto seed : c.seeds)
                for (auto m : {Method::e2e, Method::remove_only, Method::repl})
                    if (std::find(c.methods.begin(), c.methods.end(), m) != c.methods.end())
                        out.push_back({v, K, seed, m});
    return out;
}

/// Counted FLOPs of one sample: MACs x 2 plus weight-synthesis work.
template <typename T>
std::uint64_t counted_flops(const Network<T>& net) {
    std::uint64_t f = 0;
    for (const auto& s : measure_unit_flops(net, 1)) f += s.mac + s.synth;
    return f;
}

namespace detail {

struct FitTarget {
    std::string target, prev, next;
    bool normalized = true;
    std::optional<GroupLayout> layout;
};

inline FitTarget fit_target(const NetworkSpec& spec, const Site& site, const Shape& target_shape) {
    const auto p = block_prefix(site.stage, site.block), a = block_prefix(site.stage, site.block - 1),
               b = block_prefix(site.stage, site.block + 1);
    FitTarget t;
    switch (spec.family) {
        case Family::resnet_basic: t = {p + ".conv2", a + ".conv2", b + ".conv1", true, std::nullopt}; break;
        case Family::resnet_bottleneck: t = {p + ".conv_mid", a + ".conv_mid", b + ".conv_mid", true, std::nullopt}; break;
        case Family::vit:
            t = {p + ".attn.wo", a + ".attn.wo", b + ".attn.wo", spec.vit_synth == VitSynth::headwise, std::nullopt};
            break;
    }
    if (spec.per_group_coeffs) {
        if (spec.is_cnn()) t.layout = GroupLayout::rows(target_shape);
        else if (spec.vit_synth == VitSynth::headwise) t.layout = GroupLayout::heads(target_shape, spec.heads);
    }
    return t;
}

}  // namespace detail

/// Least-squares fit of each removed block of `ref` (an e2e network) onto
/// the span of its neighbors' anchor weights.
template <typename T>
std::vector<std::pair<std::string, FitResult>> site_fits(const Network<T>& ref) {
    std::vector<std::pair<std::string, FitResult>> out;
    for (const auto& site : ref.sites) {
        const auto& target = ref.store.value(block_prefix(site.stage, site.block) +
                                             (ref.spec.family == Family::resnet_basic        ? ".conv2"
                                              : ref.spec.family == Family::resnet_bottleneck ? ".conv_mid"
                                                                                             : ".attn.wo"));
        const auto t = detail::fit_target(ref.spec, site, target.shape());
        out.emplace_back(block_prefix(site.stage, site.block),
                         best_fit_coeffs(target, ref.store.value(t.prev), ref.store.value(t.next), t.normalized,
                                         t.layout));
    }
    return out;
}

template <typename T>
class ExperimentRunner {
   public:
    ExperimentRunner(const ExperimentConfig& config, RunOptions options)
        : cfg_(config), opts_(std::move(options)), data_(load_dataset<T>(cfg_.data, cfg_.base_dir)) {
        // File datasets define the input extent.
        const auto s = data_.first.sample_shape();
        cfg_.data.channels = s.at(0);
        cfg_.data.height = s.at(1);
        cfg_.data.width = s.at(2);
    }

    std::vector<json> run() {
        const std::filesystem::path out = cfg_.output_dir;
        std::filesystem::create_directories(out);
        MetricsWriter metrics(out / "metrics.jsonl");
        std::vector<json> summaries;
        for (const auto& cell : experiment_cells(cfg_)) {
            if (auto s = run_cell(cell, metrics)) summaries.push_back(std::move(*s));
        }
        return summaries;
    }

    const Split<T>& data() const { return data_; }

   private:
    using GroupKey = std::tuple<std::string, std::size_t, std::uint64_t>;

    void log(const std::string& m) const {
        if (opts_.log) opts_.log(m);
    }

    double lr_at(std::size_t epoch) const {
        const double base = cfg_.train.optimizer.lr;
        return cfg_.train.schedule == Schedule::cosine ? cosine_lr(base, epoch, cfg_.train.epochs) : base;
    }

    std::optional<json> run_cell(const Cell& cell, MetricsWriter& metrics) {
        const auto spec = cell_model(cfg_, cell.variant, cell.method, cell.K);
        const std::filesystem::path dir = std::filesystem::path(cfg_.output_dir) / cell.name();
        const auto ckpt = dir / "last.ckpt";
        const GroupKey group{cell.variant_name(), cell.K, cell.seed};

        Network<T> net = build_network<T>(spec, cell.seed);
        OptimState<T> opt;
        std::size_t done = 0;
        if (opts_.resume && std::filesystem::exists(ckpt)) {
            auto ck = load_checkpoint<T>(ckpt);
            if (ck.meta.value("complete", false)) {
                log(cell.name() + ": already complete");
                if (cell.method == Method::e2e) references_.insert_or_assign(group, std::move(ck.net));
                return std::nullopt;
            }
            net = std::move(ck.net);
            opt = std::move(ck.opt);
            done = ck.meta.at("epochs_done").template get<std::size_t>();
            log(cell.name() + ": resuming after epoch " + std::to_string(done));
        }

        const auto params = net.store.trainable_count();
        const auto flops = counted_flops(net);
        const json id = {{"cell", cell.name()},
                         {"variant", cell.variant_name()},
                         {"method", to_string(cell.method)},
                         {"K", cell.K},
                         {"seed", cell.seed}};
        const auto& tr = cfg_.train;
        Metrics last_train, last_test;
        for (std::size_t epoch = done; epoch < tr.epochs; ++epoch) {
            const double lr = lr_at(epoch);
            last_train = train_epoch(net, data_.first, tr.optimizer, opt, {tr.batch_size, lr, epoch, cell.seed});
            last_test = evaluate(net, data_.second, 256, "test");
            last_test.epoch = epoch;
            for (const auto& w : opt.warnings) log(cell.name() + ": " + w);
            opt.warnings.clear();
            ++done;

            json rec = id;
            rec["type"] = "epoch";
            rec["epoch"] = epoch;
            rec["lr"] = lr;
            rec["params"] = params;
            rec["flops"] = flops;
            rec["train"] = to_json(last_train);
            rec["test"] = to_json(last_test);
            const bool stopping = opts_.stop_after && done >= *opts_.stop_after && done < tr.epochs;
            const bool due = tr.checkpoint_every && done % tr.checkpoint_every == 0;
            if ((due || stopping) && done < tr.epochs) {
                save_checkpoint(ckpt, net, &opt, {{"epochs_done", done}, {"complete", false}, {"cell", cell.name()}});
            }
            metrics.emit(rec);
            log(cell.name() + " epoch " + std::to_string(epoch) + " loss " + std::to_string(last_train.loss) +
                " train " + std::to_string(last_train.accuracy) + " test " + std::to_string(last_test.accuracy));
            if (stopping) return std::nullopt;
        }
        json summary = id;
        summary["type"] = "summary";
        summary["epochs"] = tr.epochs;
        summary["params"] = params;
        summary["flops"] = flops;
        summary["removed"] = net.plan.removed_count();
        summary["blocks"] = net.plan.block_count();
        summary["train"] = to_json(last_train);
        summary["test"] = to_json(last_test);
        const auto cost = cost_report<T>(spec, 1, {}, cell.seed);
        summary["cost"] = to_json(cost);
        if (cell.method == Method::repl) analyse(net, group, cost, summary, metrics, id);

        save_checkpoint(ckpt, net, &opt, {{"epochs_done", done}, {"complete", true}, {"cell", cell.name()}});
        metrics.emit(summary);
        if (cell.method == Method::e2e) references_.insert_or_assign(group, net);
        return summary;
    }

    /// Error report, per-site fits and the interval trade-off for a repl net.
    void analyse(const Network<T>& net, const GroupKey& group, const CostReport& cost, json& summary,
                 MetricsWriter& metrics, const json& id) {
        auto ref_spec = net.spec;
        ref_spec.method = Method::e2e;
        const auto it = references_.find(group);
        const bool trained = it != references_.end();
        const Network<T> ref = trained ? it->second : build_network<T>(ref_spec, net.seed);
        summary["reference"] = trained ? "trained e2e" : "initial e2e";

        for (const auto& [prefix, fit] : site_fits(ref)) {
            json rec = id;
            rec["type"] = "fit";
            rec["site"] = prefix;
            rec["fit"] = to_json(fit);
            metrics.emit(rec);
        }
        if (!cfg_.analysis.enabled || net.sites.empty()) return;

        const std::size_t n = std::min(cfg_.analysis.samples, data_.second.size());
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::vector<int> labels;
        const auto inputs = data_.second.gather(idx, labels);
        const auto rep = telescoped_deviation(ref, net, inputs);
        summary["error_report"] = to_json(rep);

        TradeoffInputs in;
        double eta = 0, eps = 0;
        for (const auto& s : cost.sites) eta += s.eta;
        for (const auto& s : rep.sites) {
            eps += s.eps_hat;
            in.pi_max = std::max(in.pi_max, s.Pi_hat);
            in.h_max = std::max(in.h_max, s.H_hat);
        }
        in.eta_bar = eta / double(cost.sites.size());
        in.eps_bar = eps / double(rep.sites.size());
        json rows = json::array();
        const auto ks = cfg_.k_values.empty() ? std::vector<std::size_t>{2, 4, 6} : cfg_.k_values;
        for (const auto& r : interval_tradeoff(net.spec, ks, in)) rows.push_back(to_json(r));
        summary["tradeoff"] = rows;
    }

    ExperimentConfig cfg_;
    RunOptions opts_;
    Split<T> data_;
    std::map<GroupKey, Network<T>> references_;
};

/// Runs every cell of `config` and returns the summaries of cells that
/// completed in this invocation.
inline std::vector<json> run_experiment(const ExperimentConfig& config, const RunOptions& options = {}) {
    std::filesystem::create_directories(config.output_dir);
    {
        std::ofstream out(std::filesystem::path(config.output_dir) / "config.resolved.json", std::ios::trunc);
        out << config_to_json(config).dump(2) << '\n';
    }
    if (config.train.precision == Precision::float32) return ExperimentRunner<float>(config, options).run();
    return ExperimentRunner<double>(config, options).run();
}

}  // namespace repl::harness
