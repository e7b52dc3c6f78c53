#pragma once

// Experiment configuration: a JSON document validated against a fixed
// schema. Unknown keys are rejected by their dotted path.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "repl/builder.hpp"
#include "repl/trainer.hpp"

namespace repl::harness {

using json = nlohmann::json;

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields are read as std::size_t");

enum class DataKind { synthetic, idx, csv };
enum class Pattern { textures, blobs };
enum class Schedule { cosine, constant };
enum class Precision { float64, float32 };

struct DataSpec {
    DataKind kind = DataKind::synthetic;
    Pattern pattern = Pattern::textures;
    std::size_t classes = 4;
    std::optional<std::size_t> train, test;  // synthetic: sample counts; files: caps
    std::size_t channels = 1, height = 8, width = 8;
    std::uint64_t seed = 7;
    double noise = 0.5;
    std::string path;  // directory holding the idx / csv files
    std::string train_images = "train-images-idx3-ubyte", train_labels = "train-labels-idx1-ubyte";
    std::string test_images = "t10k-images-idx3-ubyte", test_labels = "t10k-labels-idx1-ubyte";
    std::string train_file = "train.csv", test_file = "test.csv";

    std::size_t train_count() const { return train.value_or(kind == DataKind::synthetic ? 2000 : 0); }
    std::size_t test_count() const { return test.value_or(kind == DataKind::synthetic ? 500 : 0); }
};

struct TrainSpec {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    OptimizerConfig optimizer;
    Schedule schedule = Schedule::cosine;
    std::size_t checkpoint_every = 1;  // epochs; 0 = only at the end
    Precision precision = Precision::float64;
};

struct AnalysisSpec {
    bool enabled = true;
    std::size_t samples = 64;  // test images used for the error report
};

/// A named overlay of model keys, one grid axis.
struct Variant {
    std::string name;
    json model = json::object();
};

struct ExperimentConfig {
    std::string name = "experiment";
    json model_json = json::object();  // as written, before variant overlays
    NetworkSpec model;
    std::vector<Method> methods{Method::repl};
    std::vector<std::size_t> k_values;  // empty: model.K
    std::vector<Variant> variants;      // empty: one unnamed variant
    DataSpec data;
    TrainSpec train;
    AnalysisSpec analysis;
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "runs/experiment";
    std::filesystem::path base_dir = ".";  // relative paths resolve here
};

// ---- enum names --------------------------------------------------------------

namespace detail {

template <typename E>
struct EnumName {
    E value;
    const char* name;
};

template <typename E, std::size_t N>
E enum_from(const std::string& s, const EnumName<E> (&table)[N], const std::string& key) {
    std::string choices;
    for (const auto& e : table) {
        if (s == e.name) return e.value;
        choices += (choices.empty() ? "" : ", ") + std::string(e.name);
    }
    throw Error(ErrorKind::config, key + ": unknown value \"" + s + "\" (expected one of " + choices + ")");
}

template <typename E, std::size_t N>
const char* enum_name(E v, const EnumName<E> (&table)[N]) {
    for (const auto& e : table)
        if (e.value == v) return e.name;
    return "?";
}

inline constexpr EnumName<Family> kFamilies[] = {
    {Family::resnet_basic, "resnet_basic"}, {Family::resnet_bottleneck, "resnet_bottleneck"}, {Family::vit, "vit"}};
inline constexpr EnumName<Method> kMethods[] = {
    {Method::e2e, "e2e"}, {Method::remove_only, "remove_only"}, {Method::repl, "repl"}};
inline constexpr EnumName<NeighborUse> kNeighbors[] = {
    {NeighborUse::both, "both"}, {NeighborUse::prev_only, "prev_only"}, {NeighborUse::next_only, "next_only"}};
inline constexpr EnumName<VitSynth> kVitSynth[] = {{VitSynth::scalar, "scalar"}, {VitSynth::headwise, "headwise"}};
inline constexpr EnumName<DataKind> kDataKinds[] = {
    {DataKind::synthetic, "synthetic"}, {DataKind::idx, "idx"}, {DataKind::csv, "csv"}};
inline constexpr EnumName<Pattern> kPatterns[] = {{Pattern::textures, "textures"}, {Pattern::blobs, "blobs"}};
inline constexpr EnumName<Schedule> kSchedules[] = {{Schedule::cosine, "cosine"}, {Schedule::constant, "constant"}};
inline constexpr EnumName<Precision> kPrecisions[] = {{Precision::float64, "float64"},
                                                      {Precision::float32, "float32"}};
inline constexpr EnumName<OptimizerKind> kOptimizers[] = {{OptimizerKind::sgd, "sgd"},
                                                          {OptimizerKind::adamw, "adamw"}};

}  // namespace detail

inline Method method_from_string(const std::string& s) { return detail::enum_from(s, detail::kMethods, "method"); }
inline Family family_from_string(const std::string& s) { return detail::enum_from(s, detail::kFamilies, "family"); }

// ---- schema reader -------------------------------------------------------------

/// Reads the members of one JSON object, tracking which keys were consumed
/// so that leftovers can be reported.
class Fields {
   public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw Error(ErrorKind::config, where() + " must be an object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    const json* child(const char* key) {
        if (!j_.contains(key)) return nullptr;
        used_.insert(key);
        return &j_.at(key);
    }

    std::string key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void get(const char* key, std::size_t& out) {
        if (const auto* v = child(key)) {
            if (!v->is_number_integer() || v->get<long long>() < 0) bad(key, "a non-negative integer");
            out = v->get<std::size_t>();
        }
    }
    void get(const char* key, std::optional<std::size_t>& out) {
        if (has(key)) {
            std::size_t v = 0;
            get(key, v);
            out = v;
        }
    }
    void get(const char* key, double& out) {
        if (const auto* v = child(key)) {
            if (!v->is_number()) bad(key, "a number");
            out = v->get<double>();
        }
    }
    void get(const char* key, bool& out) {
        if (const auto* v = child(key)) {
            if (!v->is_boolean()) bad(key, "true or false");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::string& out) {
        if (const auto* v = child(key)) {
            if (!v->is_string()) bad(key, "a string");
            out = v->get<std::string>();
        }
    }
    template <typename E, std::size_t N>
    void get_enum(const char* key, E& out, const detail::EnumName<E> (&table)[N]) {
        if (const auto* v = child(key)) {
            if (!v->is_string()) bad(key, "a string");
            out = detail::enum_from(v->get<std::string>(), table, key_path(key));
        }
    }

    /// Throws on the first key that no getter consumed.
    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!used_.contains(k)) throw Error(ErrorKind::config, "unknown key \"" + key_path(k.c_str()) + "\"");
        }
    }

    [[noreturn]] void bad(const char* key, const char* expected) const {
        throw Error(ErrorKind::config, key_path(key) + " must be " + expected);
    }

   private:
    std::string where() const { return path_.empty() ? "configuration" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

// ---- network spec <-> json --------------------------------------------------------

/// Reads model keys into `spec`. Input extents and the class count belong
/// to the dataset, so they are accepted only when `with_io` is set.
inline void read_model(const json& j, NetworkSpec& spec, const std::string& path, bool with_io) {
    Fields f(j, path);
    f.get_enum("family", spec.family, detail::kFamilies);
    if (with_io) {
        f.get_enum("method", spec.method, detail::kMethods);
        f.get("in_channels", spec.in_channels);
        f.get("height", spec.height);
        f.get("width", spec.width);
        f.get("classes", spec.classes);
    }
    f.get("K", spec.K);
    f.get("stem_channels", spec.stem_channels);
    f.get("kernel", spec.kernel);
    if (const auto* st = f.child("stages")) {
        if (!st->is_array()) f.bad("stages", "an array");
        spec.stages.clear();
        for (std::size_t i = 0; i < st->size(); ++i) {
            Fields sf((*st)[i], f.key_path("stages") + "[" + std::to_string(i) + "]");
            StageSpec s;
            sf.get("blocks", s.blocks);
            sf.get("channels", s.channels);
            sf.get("mid", s.mid);
            sf.get("stride", s.stride);
            sf.finish();
            spec.stages.push_back(s);
        }
    }
    f.get("patch", spec.patch);
    f.get("dim", spec.dim);
    f.get("heads", spec.heads);
    f.get("mlp_dim", spec.mlp_dim);
    f.get("depth", spec.depth);
    f.get_enum("neighbors", spec.neighbors, detail::kNeighbors);
    f.get("per_group_coeffs", spec.per_group_coeffs);
    f.get("tied_coeffs", spec.tied_coeffs);
    f.get_enum("vit_synth", spec.vit_synth, detail::kVitSynth);
    f.get("vit_use_attn", spec.vit_use_attn);
    f.get("vit_use_mlp", spec.vit_use_mlp);
    f.finish();
}

inline json model_to_json(const NetworkSpec& s) {
    json stages = json::array();
    for (const auto& st : s.stages)
        stages.push_back({{"blocks", st.blocks}, {"channels", st.channels}, {"mid", st.mid}, {"stride", st.stride}});
    return {{"family", to_string(s.family)},
            {"method", to_string(s.method)},
            {"K", s.K},
            {"in_channels", s.in_channels},
            {"height", s.height},
            {"width", s.width},
            {"classes", s.classes},
            {"stem_channels", s.stem_channels},
            {"kernel", s.kernel},
            {"stages", stages},
            {"patch", s.patch},
            {"dim", s.dim},
            {"heads", s.heads},
            {"mlp_dim", s.mlp_dim},
            {"depth", s.depth},
            {"neighbors", to_string(s.neighbors)},
            {"per_group_coeffs", s.per_group_coeffs},
            {"tied_coeffs", s.tied_coeffs},
            {"vit_synth", to_string(s.vit_synth)},
            {"vit_use_attn", s.vit_use_attn},
            {"vit_use_mlp", s.vit_use_mlp}};
}

inline NetworkSpec model_from_json(const json& j) {
    NetworkSpec s;
    read_model(j, s, "model", true);
    validate(s);
    return s;
}

// ---- experiment config -----------------------------------------------------------

namespace detail {

inline void read_data(const json& j, DataSpec& d) {
    Fields f(j, "data");
    f.get_enum("kind", d.kind, kDataKinds);
    f.get_enum("pattern", d.pattern, kPatterns);
    f.get("classes", d.classes);
    f.get("train", d.train);
    f.get("test", d.test);
    f.get("channels", d.channels);
    f.get("height", d.height);
    f.get("width", d.width);
    f.get("seed", d.seed);
    f.get("noise", d.noise);
    f.get("path", d.path);
    f.get("train_images", d.train_images);
    f.get("train_labels", d.train_labels);
    f.get("test_images", d.test_images);
    f.get("test_labels", d.test_labels);
    f.get("train_file", d.train_file);
    f.get("test_file", d.test_file);
    f.finish();
    if (d.classes < 2) throw Error(ErrorKind::config, "data.classes must be >= 2");
    if (d.kind == DataKind::synthetic && (d.train_count() == 0 || d.test_count() == 0)) {
        throw Error(ErrorKind::config, "data.train and data.test must be positive for synthetic data");
    }
    if (d.kind != DataKind::synthetic && d.path.empty()) {
        throw Error(ErrorKind::config, "data.path is required for file datasets");
    }
    if (!(d.noise >= 0)) throw Error(ErrorKind::config, "data.noise must be >= 0");
}

inline void read_train(const json& j, TrainSpec& t, Family family) {
    Fields f(j, "train");
    // Family-dependent optimizer defaults, applied before explicit keys.
    std::string opt_name;
    f.get("optimizer", opt_name);
    t.optimizer.kind = family == Family::vit ? OptimizerKind::adamw : OptimizerKind::sgd;
    if (!opt_name.empty()) t.optimizer.kind = enum_from(opt_name, kOptimizers, "train.optimizer");
    if (t.optimizer.kind == OptimizerKind::adamw) {
        t.optimizer.lr = 1e-3;
        t.optimizer.weight_decay = 0.05;
    }
    f.get("epochs", t.epochs);
    f.get("batch_size", t.batch_size);
    f.get("lr", t.optimizer.lr);
    f.get("momentum", t.optimizer.momentum);
    f.get("beta1", t.optimizer.beta1);
    f.get("beta2", t.optimizer.beta2);
    f.get("adam_eps", t.optimizer.adam_eps);
    f.get("weight_decay", t.optimizer.weight_decay);
    f.get_enum("schedule", t.schedule, kSchedules);
    f.get("checkpoint_every", t.checkpoint_every);
    f.get_enum("precision", t.precision, kPrecisions);
    f.finish();
    if (t.epochs == 0) throw Error(ErrorKind::config, "train.epochs must be >= 1");
    if (t.batch_size == 0) throw Error(ErrorKind::config, "train.batch_size must be >= 1");
    if (!(t.optimizer.lr > 0)) throw Error(ErrorKind::config, "train.lr must be positive");
    if (t.optimizer.weight_decay < 0) throw Error(ErrorKind::config, "train.weight_decay must be >= 0");
}

/// Applies the keys of `patch` on top of `base` (objects merge, other
/// values replace).
inline json overlay(json base, const json& patch) {
    base.merge_patch(patch);
    return base;
}

}  // namespace detail

/// Model spec of one grid cell: base model, variant overlay, method, K.
inline NetworkSpec cell_model(const ExperimentConfig& c, const Variant* v, Method m, std::size_t K) {
    NetworkSpec s;
    read_model(v ? detail::overlay(c.model_json, v->model) : c.model_json, s, "model", false);
    s.method = m;
    s.K = K;
    s.in_channels = c.data.channels;
    s.height = c.data.height;
    s.width = c.data.width;
    s.classes = c.data.classes;
    return s;
}

/// Validates a parsed document and fills defaults.
inline ExperimentConfig config_from_json(const json& j, std::filesystem::path base_dir = ".") {
    ExperimentConfig c;
    c.base_dir = std::move(base_dir);
    Fields f(j, "");
    f.get("name", c.name);
    if (const auto* m = f.child("model")) c.model_json = *m;
    read_model(c.model_json, c.model, "model", false);
    if (const auto* ms = f.child("methods")) {
        if (!ms->is_array() || ms->empty()) f.bad("methods", "a non-empty array of method names");
        c.methods.clear();
        for (const auto& m : *ms) {
            if (!m.is_string()) f.bad("methods", "a non-empty array of method names");
            c.methods.push_back(detail::enum_from(m.get<std::string>(), detail::kMethods, "methods"));
        }
    }
    if (const auto* ks = f.child("k_values")) {
        if (!ks->is_array()) f.bad("k_values", "an array of integers");
        for (const auto& k : *ks) {
            if (!k.is_number_integer() || k.get<long long>() < 0) f.bad("k_values", "an array of integers");
            c.k_values.push_back(k.get<std::size_t>());
        }
    }
    if (const auto* vs = f.child("variants")) {
        if (!vs->is_array()) f.bad("variants", "an array");
        std::set<std::string> names;
        for (std::size_t i = 0; i < vs->size(); ++i) {
            Fields vf((*vs)[i], "variants[" + std::to_string(i) + "]");
            Variant v;
            vf.get("name", v.name);
            if (const auto* m = vf.child("model")) v.model = *m;
            vf.finish();
            if (v.name.empty() || !names.insert(v.name).second) {
                throw Error(ErrorKind::config, "variants[" + std::to_string(i) + "].name must be unique and non-empty");
            }
            c.variants.push_back(std::move(v));
        }
    }
    if (const auto* d = f.child("data")) detail::read_data(*d, c.data);
    json train = json::object();
    if (const auto* t = f.child("train")) train = *t;
    detail::read_train(train, c.train, c.model.family);
    if (const auto* a = f.child("analysis")) {
        Fields af(*a, "analysis");
        af.get("enabled", c.analysis.enabled);
        af.get("samples", c.analysis.samples);
        af.finish();
    }
    if (const auto* s = f.child("seeds")) {
        if (!s->is_array() || s->empty()) f.bad("seeds", "a non-empty array of integers");
        c.seeds.clear();
        for (const auto& v : *s) {
            if (!v.is_number_integer() || v.get<long long>() < 0) f.bad("seeds", "a non-empty array of integers");
            c.seeds.push_back(v.get<std::uint64_t>());
        }
    }
    f.get("output_dir", c.output_dir);
    f.finish();

    // Every cell must describe a buildable network.
    const std::vector<std::size_t> ks = c.k_values.empty() ? std::vector<std::size_t>{c.model.K} : c.k_values;
    const std::vector<const Variant*> vs = [&] {
        std::vector<const Variant*> out;
        for (const auto& v : c.variants) out.push_back(&v);
        if (out.empty()) out.push_back(nullptr);
        return out;
    }();
    for (const auto* v : vs)
        for (auto m : c.methods)
            for (auto K : ks) validate(cell_model(c, v, m, K));
    return c;
}

inline json parse_json_text(const std::string& text, const std::string& origin) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::config, origin + ": parse error: " + e.what());
    }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json(parse_json_text(ss.str(), path.string()), path.parent_path());
}

/// Sets a dotted key path (e.g. "train.epochs") to a JSON value; the value
/// text is parsed as JSON and falls back to a plain string.
inline void set_dotted(json& doc, const std::string& key, const std::string& value_text) {
    json value;
    try {
        value = json::parse(value_text);
    } catch (const json::parse_error&) {
        value = value_text;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw Error(ErrorKind::config, "malformed key path \"" + key + "\"");
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = std::move(value);
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

inline json config_to_json(const ExperimentConfig& c) {
    std::vector<std::string> methods;
    for (auto m : c.methods) methods.push_back(to_string(m));
    json variants = json::array();
    for (const auto& v : c.variants) variants.push_back({{"name", v.name}, {"model", v.model}});
    const auto& d = c.data;
    json data = {{"kind", detail::enum_name(d.kind, detail::kDataKinds)},
                 {"pattern", detail::enum_name(d.pattern, detail::kPatterns)},
                 {"classes", d.classes},
                 {"channels", d.channels},
                 {"height", d.height},
                 {"width", d.width},
                 {"seed", d.seed},
                 {"noise", d.noise},
                 {"path", d.path}};
    if (d.train) data["train"] = *d.train;
    if (d.test) data["test"] = *d.test;
    const auto& t = c.train;
    json train = {{"epochs", t.epochs},
                  {"batch_size", t.batch_size},
                  {"optimizer", to_string(t.optimizer.kind)},
                  {"lr", t.optimizer.lr},
                  {"momentum", t.optimizer.momentum},
                  {"beta1", t.optimizer.beta1},
                  {"beta2", t.optimizer.beta2},
                  {"adam_eps", t.optimizer.adam_eps},
                  {"weight_decay", t.optimizer.weight_decay},
                  {"schedule", detail::enum_name(t.schedule, detail::kSchedules)},
                  {"checkpoint_every", t.checkpoint_every},
                  {"precision", detail::enum_name(t.precision, detail::kPrecisions)}};
    return {{"name", c.name},
            {"model", c.model_json},
            {"methods", methods},
            {"k_values", c.k_values},
            {"variants", variants},
            {"data", data},
            {"train", train},
            {"analysis", {{"enabled", c.analysis.enabled}, {"samples", c.analysis.samples}}},
            {"seeds", c.seeds},
            {"output_dir", c.output_dir}};
}

}  // namespace repl::harness
