#pragma once

// Checkpoint file: a text header followed by a binary payload.
//
//   REPLCKPT <version>\n
//   <header JSON, one line>\n
//   <payload: little-endian IEEE-754 values of every tensor, manifest order>
//
// The header lists each tensor as {name, shape, dtype, offset, bytes};
// offsets are contiguous from 0 and sum to payload_bytes. The flavor tag
// is "dynamic" (trainable network plus optimizer state) or "deploy"
// (static inference program).

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "repl/deploy.hpp"
#include "repl/harness/config.hpp"
#include "repl/trainer.hpp"

namespace repl::harness {

inline constexpr const char* kCheckpointMagic = "REPLCKPT";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
    return std::is_same_v<T, double> ? "f64" : "f32";
}

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void append_le(std::string& out, const Tensor<T>& t) {
    const std::size_t start = out.size();
    out.resize(start + t.numel() * sizeof(T));
    std::memcpy(out.data() + start, t.data().data(), t.numel() * sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = start; i < out.size(); i += sizeof(T))
            std::reverse(out.begin() + std::ptrdiff_t(i), out.begin() + std::ptrdiff_t(i + sizeof(T)));
    }
}

template <typename T>
Tensor<T> read_le(const std::string& payload, std::size_t offset, const Shape& shape) {
    Tensor<T> t(shape);
    std::memcpy(t.data().data(), payload.data() + offset, t.numel() * sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        auto* bytes = reinterpret_cast<unsigned char*>(t.data().data());
        for (std::size_t i = 0; i < t.numel() * sizeof(T); i += sizeof(T)) std::reverse(bytes + i, bytes + i + sizeof(T));
    }
    return t;
}

/// Accumulates tensors into a payload and their manifest entries.
template <typename T>
class PayloadWriter {
   public:
    void add(const std::string& name, const Tensor<T>& t, json extra = json::object()) {
        extra["name"] = name;
        extra["shape"] = t.shape();
        extra["dtype"] = dtype_name<T>();
        extra["offset"] = payload_.size();
        extra["bytes"] = t.numel() * sizeof(T);
        manifest_.push_back(std::move(extra));
        append_le(payload_, t);
    }

    void write(const std::filesystem::path& path, const std::string& flavor, json meta) const {
        json header = {{"format_version", kCheckpointVersion},
                       {"flavor", flavor},
                       {"dtype", dtype_name<T>()},
                       {"meta", std::move(meta)},
                       {"tensors", manifest_},
                       {"payload_bytes", payload_.size()}};
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw Error(ErrorKind::io, "cannot write checkpoint " + tmp);
            out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n' << header.dump() << '\n';
            out.write(payload_.data(), std::streamsize(payload_.size()));
            if (!out) throw Error(ErrorKind::io, "write to " + tmp + " failed");
        }
        std::filesystem::rename(tmp, path);  // no half-written checkpoint under the final name
    }

   private:
    json manifest_ = json::array();
    std::string payload_;
};

struct RawCheckpoint {
    json header;
    std::string payload;
};

inline RawCheckpoint read_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open checkpoint " + path.string());
    std::string magic_line, header_line;
    if (!std::getline(in, magic_line) || !std::getline(in, header_line)) {
        throw Error(ErrorKind::format, path.string() + ": truncated checkpoint header");
    }
    std::istringstream ml(magic_line);
    std::string magic;
    int version = -1;
    ml >> magic >> version;
    if (magic != kCheckpointMagic) throw Error(ErrorKind::format, path.string() + ": not a checkpoint file");
    if (version != kCheckpointVersion) {
        throw Error(ErrorKind::format, path.string() + ": checkpoint version " + std::to_string(version) +
                                           " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    RawCheckpoint raw;
    try {
        raw.header = json::parse(header_line);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::format, path.string() + ": malformed checkpoint header: " + e.what());
    }
    raw.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    const auto& h = raw.header;
    if (!h.contains("payload_bytes") || !h.contains("tensors") || !h.contains("flavor") || !h.contains("dtype")) {
        throw Error(ErrorKind::format, path.string() + ": checkpoint header lacks required fields");
    }
    const std::size_t declared = h["payload_bytes"].get<std::size_t>();
    if (raw.payload.size() != declared) {
        throw Error(ErrorKind::format, path.string() + ": payload holds " + std::to_string(raw.payload.size()) +
                                           " bytes, header declares " + std::to_string(declared));
    }
    std::size_t expect = 0;
    for (const auto& t : h["tensors"]) {
        const auto shape = t["shape"].get<Shape>();
        const std::size_t elem = t["dtype"] == "f64" ? 8 : 4;
        if (t["offset"].get<std::size_t>() != expect || t["bytes"].get<std::size_t>() != shape_numel(shape) * elem) {
            throw Error(ErrorKind::format, path.string() + ": manifest entry " + t["name"].get<std::string>() +
                                               " disagrees with the payload layout");
        }
        expect += t["bytes"].get<std::size_t>();
    }
    if (expect != declared) throw Error(ErrorKind::format, path.string() + ": manifest does not cover the payload");
    return raw;
}

template <typename T>
void check_dtype(const RawCheckpoint& raw, const std::filesystem::path& path) {
    if (raw.header["dtype"] != dtype_name<T>()) {
        throw Error(ErrorKind::format, path.string() + ": checkpoint holds " + raw.header["dtype"].get<std::string>() +
                                           " values, requested " + dtype_name<T>());
    }
}

}  // namespace detail

/// Flavor tag of a checkpoint file ("dynamic" or "deploy").
inline std::string checkpoint_flavor(const std::filesystem::path& path) {
    return detail::read_raw(path).header["flavor"].get<std::string>();
}

/// Element type of a checkpoint file ("f64" or "f32").
inline std::string checkpoint_dtype(const std::filesystem::path& path) {
    return detail::read_raw(path).header["dtype"].get<std::string>();
}

// ---- dynamic -------------------------------------------------------------------------

template <typename T>
struct TrainingCheckpoint {
    Network<T> net;
    OptimState<T> opt;
    json meta;
};

/// Parameters, buffers and optimizer slots of a built network. The network
/// structure is re-derived from (spec, seed) on load, so computing layers
/// read their anchors from the restored store rather than from copies.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net, const OptimState<T>* opt = nullptr,
                     json meta = json::object()) {
    meta["spec"] = model_to_json(net.spec);
    meta["seed"] = net.seed;
    meta["mode"] = net.mode() == Mode::train ? "train" : "eval";
    meta["opt_step"] = opt ? opt->step : 0;
    detail::PayloadWriter<T> w;
    for (const auto& [id, e] : net.store.params()) {
        w.add("param:" + id.key, e.value,
              {{"group", to_string(e.info.group)}, {"trainable", e.info.trainable}, {"decay_exempt", e.info.decay_exempt}});
    }
    for (const auto& [id, b] : net.store.buffers()) w.add("buffer:" + id.key, b);
    if (opt) {
        for (const auto& [id, t] : opt->first) w.add("opt.first:" + id.key, t);
        for (const auto& [id, t] : opt->second) w.add("opt.second:" + id.key, t);
    }
    w.write(path, "dynamic", std::move(meta));
}

template <typename T>
TrainingCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    const auto raw = detail::read_raw(path);
    if (raw.header["flavor"] != "dynamic") {
        throw Error(ErrorKind::format, path.string() + ": expected a dynamic checkpoint, found " +
                                           raw.header["flavor"].get<std::string>());
    }
    detail::check_dtype<T>(raw, path);
    const auto& meta = raw.header["meta"];
    TrainingCheckpoint<T> ck{build_network<T>(model_from_json(meta.at("spec")), meta.at("seed").get<std::uint64_t>()),
                             {}, meta};
    if (meta.value("mode", "train") == "eval") ck.net.eval();
    ck.opt.step = meta.value("opt_step", std::uint64_t{0});

    std::size_t params = 0, buffers = 0;
    for (const auto& t : raw.header["tensors"]) {
        const auto name = t["name"].get<std::string>();
        const auto colon = name.find(':');
        const std::string kind = name.substr(0, colon), key = name.substr(colon + 1);
        auto value = detail::read_le<T>(raw.payload, t["offset"].get<std::size_t>(), t["shape"].get<Shape>());
        auto place = [&](Tensor<T>& dst) {
            if (dst.shape() != value.shape()) {
                throw Error(ErrorKind::format, path.string() + ": " + name + " has shape " + shape_str(value.shape()) +
                                                   ", network expects " + shape_str(dst.shape()));
            }
            dst = std::move(value);
        };
        if (kind == "param") {
            if (!ck.net.store.contains(key)) throw Error(ErrorKind::format, path.string() + ": unknown parameter " + key);
            place(ck.net.store.mutable_value(key));
            ++params;
        } else if (kind == "buffer") {
            if (!ck.net.store.has_buffer(key)) throw Error(ErrorKind::format, path.string() + ": unknown buffer " + key);
            place(ck.net.store.mutable_buffer(key));
            ++buffers;
        } else if (kind == "opt.first") {
            ck.opt.first.insert_or_assign(ParamId(key), std::move(value));
        } else if (kind == "opt.second") {
            ck.opt.second.insert_or_assign(ParamId(key), std::move(value));
        } else {
            throw Error(ErrorKind::format, path.string() + ": unknown tensor kind in " + name);
        }
    }
    if (params != ck.net.store.params().size() || buffers != ck.net.store.buffers().size()) {
        throw Error(ErrorKind::format, path.string() + ": checkpoint does not cover every parameter and buffer");
    }
    return ck;
}

// ---- deploy ----------------------------------------------------------------------------

template <typename T>
void save_deploy_checkpoint(const std::filesystem::path& path, const DeployModel<T>& model,
                            json meta = json::object()) {
    detail::PayloadWriter<T> w;
    json ops = json::array();
    for (std::size_t i = 0; i < model.ops.size(); ++i) {
        const auto& op = model.ops[i];
        ops.push_back({{"kind", to_string(op.kind)},
                       {"inputs", op.inputs},
                       {"output", op.output},
                       {"tensors", op.tensors.size()},
                       {"stride", op.stride},
                       {"pad", op.pad},
                       {"heads", op.heads},
                       {"patch", op.patch},
                       {"eps", op.eps},
                       {"provenance", op.provenance}});
        for (std::size_t k = 0; k < op.tensors.size(); ++k)
            w.add("op" + std::to_string(i) + "." + std::to_string(k), op.tensors[k]);
    }
    meta["program"] = {{"ops", ops},
                       {"registers", model.registers},
                       {"output", model.output},
                       {"sample_shape", model.sample_shape}};
    w.write(path, "deploy", std::move(meta));
}

/// Inference-only model restored from a deploy checkpoint.
template <typename T>
DeployModel<T> load_deploy_checkpoint(const std::filesystem::path& path) {
    const auto raw = detail::read_raw(path);
    if (raw.header["flavor"] != "deploy") {
        throw Error(ErrorKind::format, path.string() + ": expected a deploy checkpoint, found " +
                                           raw.header["flavor"].get<std::string>());
    }
    detail::check_dtype<T>(raw, path);
    const auto& prog = raw.header["meta"].at("program");
    const auto& manifest = raw.header["tensors"];
    DeployModel<T> m;
    m.registers = prog.at("registers").get<std::size_t>();
    m.output = prog.at("output").get<std::size_t>();
    m.sample_shape = prog.at("sample_shape").get<Shape>();
    std::size_t next = 0;
    for (const auto& o : prog.at("ops")) {
        DeployOp<T> op;
        op.kind = op_kind_from_string(o.at("kind").get<std::string>());
        op.inputs = o.at("inputs").get<std::vector<std::size_t>>();
        op.output = o.at("output").get<std::size_t>();
        op.stride = o.at("stride").get<std::size_t>();
        op.pad = o.at("pad").get<std::size_t>();
        op.heads = o.at("heads").get<std::size_t>();
        op.patch = o.at("patch").get<std::size_t>();
        op.eps = o.at("eps").get<double>();
        op.provenance = o.at("provenance").get<std::string>();
        for (std::size_t k = 0, n = o.at("tensors").get<std::size_t>(); k < n; ++k, ++next) {
            if (next >= manifest.size()) throw Error(ErrorKind::format, path.string() + ": program references missing tensors");
            const auto& t = manifest[next];
            op.tensors.push_back(
                detail::read_le<T>(raw.payload, t["offset"].get<std::size_t>(), t["shape"].get<Shape>()));
        }
        for (auto r : op.inputs)
            if (r >= m.registers) throw Error(ErrorKind::format, path.string() + ": op reads an undefined register");
        if (op.output >= m.registers) throw Error(ErrorKind::format, path.string() + ": op writes an undefined register");
        m.ops.push_back(std::move(op));
    }
    if (next != manifest.size()) throw Error(ErrorKind::format, path.string() + ": unreferenced tensors in checkpoint");
    return m;
}

}  // namespace repl::harness
