#pragma once

// JSON forms of the report types written to the metrics stream.

#include <json.hpp>

#include "repl/analysis.hpp"
#include "repl/cost_model.hpp"
#include "repl/trainer.hpp"

namespace repl::harness {

using json = nlohmann::json;

inline json to_json(const Metrics& m) {
    json j = {{"epoch", m.epoch},       {"split", m.split},     {"loss", m.loss},
              {"accuracy", m.accuracy}, {"seconds", m.seconds}, {"samples", m.samples}};
    if (m.top5 >= 0) j["top5"] = m.top5;
    return j;
}

inline json to_json(const ParamPair& p) { return {{"P", p.P}, {"a", p.a}, {"saving", p.saving()}}; }

inline json to_json(const CostReport& r) {
    json sites = json::array();
    for (const auto& s : r.sites) {
        sites.push_back({{"prefix", s.prefix},
                         {"params", to_json(s.params)},
                         {"block_flops", s.block_flops},
                         {"layer_flops", s.layer_flops},
                         {"synth_flops", s.synth_flops},
                         {"eta", s.eta},
                         {"block_act_bytes", s.block_act},
                         {"layer_act_bytes", s.layer_act}});
    }
    return {{"batch", r.batch},
            {"params_e2e", r.params_e2e},
            {"params_repl", r.params_repl},
            {"params_remove_only", r.params_remove_only},
            {"registry_e2e", r.registry_e2e},
            {"registry_repl", r.registry_repl},
            {"flops_e2e", r.flops_e2e},
            {"flops_repl", r.flops_repl},
            {"flops_synth", r.flops_synth},
            {"act_mem_e2e_bytes", r.act_mem_e2e},
            {"act_mem_repl_bytes", r.act_mem_repl},
            {"mem_aux_bytes", r.mem_aux},
            {"act_mem_bound_bytes", r.act_mem_bound},
            {"ratio_params", r.ratio_params},
            {"ratio_flops", r.ratio_flops},
            {"sites", sites}};
}

inline json to_json(const TradeoffRow& t) {
    return {{"K", t.K},
            {"cost_ratio", t.cost_ratio},
            {"planned_ratio", t.planned_ratio},
            {"bias_proxy", t.bias_proxy},
            {"removed", t.removed},
            {"bias_proxy_kind", "empirical proxy"}};
}

/// Per-site hats and the assembled bound; per-sample terms are summarized
/// by their maximum to keep records on one short line.
inline json to_json(const ErrorReport& r) {
    json sites = json::array();
    for (const auto& s : r.sites) {
        sites.push_back({{"prefix", s.prefix},
                         {"eps_hat", s.eps_hat},
                         {"H_hat", s.H_hat},
                         {"Pi_hat", s.Pi_hat},
                         {"max_term", s.max_term},
                         {"bound_term", s.bound_term()}});
    }
    return {{"samples", r.deviation.size()},
            {"max_deviation", r.max_deviation},
            {"bound", r.bound},
            {"triangle_holds", r.triangle_holds},
            {"bound_holds", r.bound_holds},
            {"hats", "empirical lower bounds of the true suprema"},
            {"sites", sites}};
}

inline json to_json(const FitResult& f) {
    double ma = 0, mb = 0;
    for (std::size_t g = 0; g < f.alpha.size(); ++g) {
        ma += f.alpha[g];
        mb += f.beta[g];
    }
    const double n = f.alpha.empty() ? 1.0 : double(f.alpha.size());
    return {{"groups", f.alpha.size()},
            {"alpha_mean", ma / n},
            {"beta_mean", mb / n},
            {"residual", f.residual},
            {"rank_deficient", f.rank_deficient}};
}

}  // namespace repl::harness
