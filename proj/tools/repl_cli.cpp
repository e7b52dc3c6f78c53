// Command-line front end. Exit codes: 0 success, 1 usage or configuration
// error, 2 runtime error.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "repl/analysis.hpp"
#include "repl/cost_model.hpp"
#include "repl/deploy.hpp"
#include "repl/harness/checkpoint.hpp"
#include "repl/harness/config.hpp"
#include "repl/harness/dataset.hpp"
#include "repl/harness/experiment.hpp"
#include "repl/harness/metrics.hpp"
#include "repl/harness/records.hpp"

namespace {

using namespace repl;
using namespace repl::harness;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

/// Config file plus flag overrides; flags win over the file.
struct ConfigArgs {
    std::string path;
    std::vector<std::string> sets;
    std::string output;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> methods;
    std::size_t epochs = 0, K = 0;

    void attach(CLI::App* app, bool require_config) {
        auto* c = app->add_option("-c,--config", path, "experiment config (JSON)");
        if (require_config) c->required()->check(CLI::ExistingFile);
        app->add_option("--set", sets, "override a config key, e.g. --set train.lr=0.1 (repeatable)");
        app->add_option("-o,--output", output, "output directory (output_dir)");
        app->add_option("--seeds", seeds, "seed list (seeds)")->delimiter(',');
        app->add_option("--methods", methods, "methods: e2e, remove_only, repl (methods)")->delimiter(',');
        app->add_option("--epochs", epochs, "training epochs (train.epochs)");
        app->add_option("-K,--interval", K, "replacement interval (model.K)");
    }

    ExperimentConfig load() const {
        json doc = json::object();
        std::filesystem::path base = ".";
        if (!path.empty()) {
            std::ifstream in(path, std::ios::binary);
            if (!in) throw Error(ErrorKind::io, "cannot open config " + path);
            std::stringstream ss;
            ss << in.rdbuf();
            doc = parse_json_text(ss.str(), path);
            base = std::filesystem::path(path).parent_path();
        }
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw Error(ErrorKind::config, "--set expects key=value, got \"" + s + "\"");
            set_dotted(doc, s.substr(0, eq), s.substr(eq + 1));
        }
        if (!output.empty()) doc["output_dir"] = output;
        if (!seeds.empty()) doc["seeds"] = seeds;
        if (!methods.empty()) doc["methods"] = methods;
        if (epochs) doc["train"]["epochs"] = epochs;
        if (K) doc["model"]["K"] = K;
        return config_from_json(doc, base);
    }
};

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

RunOptions run_options(bool quiet, std::size_t stop_after, bool no_resume) {
    RunOptions o;
    if (stop_after) o.stop_after = stop_after;
    o.resume = !no_resume;
    if (!quiet) o.log = [](const std::string& m) { std::cerr << m << '\n'; };
    return o;
}

// ---- evaluate ---------------------------------------------------------------------

template <typename T>
json evaluate_checkpoint(const std::string& ckpt, const ExperimentConfig& cfg, const std::string& split_name) {
    const auto split = load_dataset<T>(cfg.data, cfg.base_dir);
    const auto& data = split_name == "train" ? split.first : split.second;
    if (checkpoint_flavor(ckpt) == "deploy") {
        const auto model = load_deploy_checkpoint<T>(ckpt);
        Metrics m{0, split_name};
        std::size_t hits = 0;
        double loss = 0;
        std::vector<std::size_t> idx(data.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::vector<int> labels;
        for (std::size_t first = 0; first < idx.size(); first += 256) {
            const auto n = std::min<std::size_t>(256, idx.size() - first);
            const auto logits = model.run(data.gather(std::span(idx).subspan(first, n), labels));
            hits += topk_correct(logits, labels, 1);
            loss += repl::detail::batch_loss(logits, labels) * double(n);
        }
        m.samples = data.size();
        m.accuracy = double(hits) / double(m.samples);
        m.loss = loss / double(m.samples);
        auto j = to_json(m);
        j["flavor"] = "deploy";
        return j;
    }
    auto ck = load_checkpoint<T>(ckpt);
    auto j = to_json(evaluate(ck.net, data, 256, split_name));
    j["flavor"] = "dynamic";
    j["params"] = ck.net.store.trainable_count();
    j["flops"] = counted_flops(ck.net);
    return j;
}

// ---- deploy -----------------------------------------------------------------------

template <typename T>
json deploy_checkpoint(const std::string& in, const std::string& out, std::size_t checks, std::uint64_t seed) {
    auto ck = load_checkpoint<T>(in);
    ck.net.eval();
    const auto model = export_deploy(ck.net);
    std::vector<Tensor<T>> inputs;
    Rng rng(seed, "deploy.check");
    for (std::size_t i = 0; i < checks; ++i) {
        Tensor<T> x(ck.net.input_shape(1));
        for (auto& v : x.data()) v = static_cast<T>(rng.normal());
        inputs.push_back(std::move(x));
    }
    const double diff = checks ? double(equivalence_check(ck.net, model, inputs)) : 0.0;
    save_deploy_checkpoint(out, model, {{"source", in}});
    return {{"deploy_ops", model.op_count()},
            {"dynamic_ops", dynamic_op_count(ck.net)},
            {"checked_inputs", checks},
            {"max_abs_diff", diff},
            {"output", out}};
}

// ---- analyze ----------------------------------------------------------------------

template <typename T>
json analyze_checkpoint(const std::string& ckpt, const std::string& reference, const ExperimentConfig& cfg,
                        std::size_t samples) {
    auto ck = load_checkpoint<T>(ckpt);
    if (ck.net.spec.method != Method::repl) throw Error(ErrorKind::config, "analyze needs a repl checkpoint");
    Network<T> ref = [&] {
        if (!reference.empty()) return load_checkpoint<T>(reference).net;
        auto spec = ck.net.spec;
        spec.method = Method::e2e;
        return build_network<T>(spec, ck.net.seed);
    }();
    const auto split = load_dataset<T>(cfg.data, cfg.base_dir);
    const std::size_t n = std::min(samples, split.second.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<int> labels;
    const auto rep = telescoped_deviation(ref, ck.net, split.second.gather(idx, labels));
    json fits = json::array();
    for (const auto& [prefix, f] : site_fits(ref)) fits.push_back({{"site", prefix}, {"fit", to_json(f)}});
    return {{"reference", reference.empty() ? "initial e2e" : reference},
            {"error_report", to_json(rep)},
            {"fits", fits}};
}

// ---- table ------------------------------------------------------------------------

std::string fmt(double v, int digits) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

/// Markdown table of summary records.
void print_table(const std::vector<json>& records) {
    std::cout << "| cell | method | K | seed | params | flops | removed | train acc | test acc |\n"
              << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : records) {
        if (r.value("type", "") != "summary") continue;
        std::cout << "| " << r["cell"].get<std::string>() << " | " << r["method"].get<std::string>() << " | "
                  << r["K"] << " | " << r["seed"] << " | " << r["params"] << " | " << r["flops"] << " | "
                  << r["removed"] << " | " << fmt(100 * r["train"]["accuracy"].get<double>(), 2) << " | "
                  << fmt(100 * r["test"]["accuracy"].get<double>(), 2) << " |\n";
    }
}

template <typename F>
int guarded(F&& body) {
    try {
        body();
        return 0;
    } catch (const Error& e) {
        std::cerr << e.what() << '\n';
        return e.kind() == ErrorKind::config ? kExitUsage : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Replacement-learning laboratory: train, measure, deploy and analyse replaced networks"};
    app.require_subcommand(1);

    ConfigArgs train_cfg, sweep_cfg, eval_cfg, cost_cfg, analyze_cfg;
    bool quiet = false, no_resume = false;
    std::size_t stop_after = 0;

    auto* train = app.add_subcommand("train", "run every cell of an experiment config");
    train_cfg.attach(train, true);
    train->add_option("--stop-after", stop_after, "stop each cell after this many epochs (resumable)");
    train->add_flag("--no-resume", no_resume, "ignore existing checkpoints");
    train->add_flag("-q,--quiet", quiet, "no progress lines");

    std::vector<std::size_t> sweep_ks;
    auto* sweep = app.add_subcommand("sweep", "run an experiment over a list of intervals K");
    sweep_cfg.attach(sweep, true);
    sweep->add_option("--k", sweep_ks, "intervals, e.g. --k 2,4,6 (k_values)")->delimiter(',')->required();
    sweep->add_flag("--no-resume", no_resume, "ignore existing checkpoints");
    sweep->add_flag("-q,--quiet", quiet, "no progress lines");

    std::string ckpt, out, reference, split = "test";
    std::size_t checks = 100, samples = 64, batch = 1;
    std::uint64_t seed = 0;

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a dynamic or deploy checkpoint");
    evaluate->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    eval_cfg.attach(evaluate, false);
    evaluate->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

    std::vector<std::size_t> cost_ks;
    double eps_bar = 0, pi_max = 1, h_max = 1;
    auto* cost = app.add_subcommand("cost", "parameter, FLOP and memory accounting for a model spec");
    cost_cfg.attach(cost, false);
    cost->add_option("--batch", batch, "batch size for FLOP and memory counts");
    cost->add_option("--k", cost_ks, "intervals for the trade-off table")->delimiter(',');
    cost->add_option("--eps-bar", eps_bar, "mean local replacement error for the bias proxy");
    cost->add_option("--pi-max", pi_max, "suffix amplification for the bias proxy");
    cost->add_option("--h-max", h_max, "activation bound for the bias proxy");

    auto* deploy = app.add_subcommand("deploy", "fold a dynamic checkpoint into a static inference program");
    deploy->add_option("--checkpoint", ckpt, "dynamic checkpoint")->required()->check(CLI::ExistingFile);
    deploy->add_option("--out", out, "deploy checkpoint to write")->required();
    deploy->add_option("--check", checks, "random inputs for the equivalence check");
    deploy->add_option("--seed", seed, "seed for the check inputs");

    auto* analyze = app.add_subcommand("analyze", "error report of a repl checkpoint against an e2e reference");
    analyze->add_option("--checkpoint", ckpt, "repl checkpoint")->required()->check(CLI::ExistingFile);
    analyze->add_option("--reference", reference, "e2e checkpoint (default: its initialization)");
    analyze->add_option("--samples", samples, "test images used");
    analyze_cfg.attach(analyze, false);

    std::string metrics_path;
    auto* table = app.add_subcommand("table", "markdown table of the summary records in a metrics file");
    table->add_option("--metrics", metrics_path, "metrics.jsonl")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (*train) {
        return guarded([&] {
            const auto cfg = train_cfg.load();
            for (const auto& s : run_experiment(cfg, run_options(quiet, stop_after, no_resume))) {
                std::cout << strip_timing(s).dump() << '\n';
            }
        });
    }
    if (*sweep) {
        return guarded([&] {
            auto cfg = sweep_cfg.load();
            cfg.k_values = sweep_ks;
            auto doc = config_to_json(cfg);
            cfg = config_from_json(doc, cfg.base_dir);  // validates every K
            for (const auto& s : run_experiment(cfg, run_options(quiet, 0, no_resume))) {
                std::cout << strip_timing(s).dump() << '\n';
            }
        });
    }
    if (*evaluate) {
        return guarded([&] {
            const auto cfg = eval_cfg.load();
            print(checkpoint_dtype(ckpt) == "f32" ? evaluate_checkpoint<float>(ckpt, cfg, split)
                                                  : evaluate_checkpoint<double>(ckpt, cfg, split));
        });
    }
    if (*cost) {
        return guarded([&] {
            const auto cfg = cost_cfg.load();
            auto spec = cell_model(cfg, nullptr, Method::repl, cfg.model.K);
            const auto r = cost_report<double>(spec, batch);
            TradeoffInputs in{0.0, eps_bar, pi_max, h_max};
            for (const auto& s : r.sites) in.eta_bar += s.eta / double(r.sites.size());
            if (r.sites.empty()) in.eta_bar = 1.0;
            json rows = json::array();
            for (const auto& row :
                 interval_tradeoff(spec, cost_ks.empty() ? std::vector<std::size_t>{2, 4, 6} : cost_ks, in)) {
                rows.push_back(to_json(row));
            }
            print({{"spec", model_to_json(spec)}, {"cost", to_json(r)}, {"tradeoff", rows}});
        });
    }
    if (*deploy) {
        return guarded([&] {
            print(checkpoint_dtype(ckpt) == "f32" ? deploy_checkpoint<float>(ckpt, out, checks, seed)
                                                  : deploy_checkpoint<double>(ckpt, out, checks, seed));
        });
    }
    if (*analyze) {
        return guarded([&] {
            const auto cfg = analyze_cfg.load();
            print(checkpoint_dtype(ckpt) == "f32" ? analyze_checkpoint<float>(ckpt, reference, cfg, samples)
                                                  : analyze_checkpoint<double>(ckpt, reference, cfg, samples));
        });
    }
    if (*table) {
        return guarded([&] { print_table(read_records(metrics_path)); });
    }
    return kExitUsage;
}
