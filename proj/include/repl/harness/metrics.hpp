#pragma once

// Metrics stream: one JSON object per line, appended, never truncated.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "repl/tensor.hpp"

namespace repl::harness {

using json = nlohmann::json;

class MetricsWriter {
   public:
    explicit MetricsWriter(std::filesystem::path path) : path_(std::move(path)) {
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        out_.open(path_, std::ios::binary | std::ios::app);
        if (!out_) throw Error(ErrorKind::io, "cannot open metrics file " + path_.string() + " for appending");
    }

    /// Appends `record` as one line and flushes.
    void emit(const json& record) {
        if (!record.is_object()) throw Error(ErrorKind::value, "metrics record must be an object");
        out_ << record.dump() << '\n';
        out_.flush();
        if (!out_) throw Error(ErrorKind::io, "write to " + path_.string() + " failed");
    }

    const std::filesystem::path& path() const noexcept { return path_; }

   private:
    std::filesystem::path path_;
    std::ofstream out_;
};

inline json parse_record(const std::string& line) {
    try {
        auto j = json::parse(line);
        if (!j.is_object()) throw Error(ErrorKind::format, "metrics record is not an object");
        return j;
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::format, std::string("malformed metrics record: ") + e.what());
    }
}

inline std::vector<json> read_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open metrics file " + path.string());
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(parse_record(line));
    return out;
}

/// Record without wall-clock fields, the only non-deterministic content.
inline json strip_timing(json record) {
    record.erase("seconds");
    for (auto& [k, v] : record.items())
        if (v.is_object()) v.erase("seconds");
    return record;
}

}  // namespace repl::harness
