#pragma once

// Dataset ingestion. Every loader returns (train, test) already normalized
// to zero mean, unit variance per channel using train-split statistics.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "repl/harness/config.hpp"
#include "repl/trainer.hpp"

namespace repl::harness {

template <typename T>
using Split = std::pair<Dataset<T>, Dataset<T>>;

// ---- synthetic -------------------------------------------------------------------

namespace detail {

/// Periodic texture for class c: orientation cycles through horizontal,
/// vertical, checker and diagonal; the period grows every four classes.
inline double texture_value(std::size_t c, std::size_t y, std::size_t x, double phase) {
    const double period = 4.0 + 2.0 * double(c / 4);
    const double w = 2.0 * std::numbers::pi / period;
    switch (c % 4) {
        case 0: return std::cos(w * (double(y) + phase));
        case 1: return std::cos(w * (double(x) + phase));
        case 2: return std::cos(w * (double(x) + phase)) * std::cos(w * (double(y) + phase));
        default: return std::cos(w * (double(x + y) + phase));
    }
}

template <typename T>
Dataset<T> synthetic_split(const DataSpec& d, std::size_t n, std::string_view stream,
                           const std::vector<std::vector<double>>& means) {
    Dataset<T> out;
    out.classes = d.classes;
    out.images = Tensor<T>({n, d.channels, d.height, d.width});
    Rng rng(d.seed, stream);
    const std::size_t plane = d.height * d.width, per = d.channels * plane;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % d.classes;
        out.labels.push_back(static_cast<int>(c));
        T* img = out.images.data().data() + i * per;
        if (d.pattern == Pattern::blobs) {
            for (std::size_t k = 0; k < per; ++k) img[k] = static_cast<T>(means[c][k] + d.noise * rng.normal());
            continue;
        }
        const double period = 4.0 + 2.0 * double(c / 4);
        const double phase = rng.uniform(0.0, period), amp = rng.uniform(0.5, 1.5);
        for (std::size_t ch = 0; ch < d.channels; ++ch) {
            const double gain = rng.uniform(0.5, 1.0);
            for (std::size_t y = 0; y < d.height; ++y)
                for (std::size_t x = 0; x < d.width; ++x)
                    img[ch * plane + y * d.width + x] =
                        static_cast<T>(amp * gain * texture_value(c, y, x, phase) + d.noise * rng.normal());
        }
    }
    return out;
}

}  // namespace detail

/// Deterministic per `d.seed`: class-periodic textures or Gaussian class
/// blobs, labels balanced round-robin. Not yet normalized.
template <typename T>
Split<T> synthetic_dataset(const DataSpec& d) {
    std::vector<std::vector<double>> means;
    if (d.pattern == Pattern::blobs) {
        Rng rng(d.seed, "data.means");
        means.assign(d.classes, std::vector<double>(d.channels * d.height * d.width));
        for (auto& m : means)
            for (auto& v : m) v = rng.normal();
    }
    return {detail::synthetic_split<T>(d, d.train_count(), "data.train", means),
            detail::synthetic_split<T>(d, d.test_count(), "data.test", means)};
}

// ---- normalization ---------------------------------------------------------------

struct ChannelStats {
    std::vector<double> mean, stddev;
};

template <typename T>
ChannelStats channel_stats(const Dataset<T>& d) {
    const std::size_t n = d.images.dim(0), C = d.images.dim(1), plane = d.images.numel() / (n * C);
    ChannelStats s{std::vector<double>(C), std::vector<double>(C)};
    for (std::size_t c = 0; c < C; ++c) {
        double sum = 0, sq = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = d.images.data().data() + (i * C + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) sum += p[k];
        }
        const double count = double(n * plane), mean = sum / count;
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = d.images.data().data() + (i * C + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) sq += (p[k] - mean) * (p[k] - mean);
        }
        const double sd = std::sqrt(sq / count);
        s.mean[c] = mean;
        s.stddev[c] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
}

template <typename T>
void apply_stats(Dataset<T>& d, const ChannelStats& s) {
    const std::size_t n = d.images.dim(0), C = d.images.dim(1), plane = d.images.numel() / (n * C);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            T* p = d.images.data().data() + (i * C + c) * plane;
            for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<T>((p[k] - s.mean[c]) / s.stddev[c]);
        }
}

/// Normalizes both splits with statistics of the train split.
template <typename T>
void normalize(Split<T>& split) {
    const auto s = channel_stats(split.first);
    apply_stats(split.first, s);
    apply_stats(split.second, s);
}

// ---- IDX ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

struct IdxArray {
    std::vector<std::size_t> dims;
    std::vector<unsigned char> values;
};

/// Unsigned-byte IDX file with the expected rank.
inline IdxArray read_idx(const std::filesystem::path& p, std::size_t rank) {
    const auto bytes = read_bytes(p);
    if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] != rank) {
        throw Error(ErrorKind::format, p.string() + ": IDX magic mismatch (expected unsigned-byte rank " +
                                           std::to_string(rank) + ")");
    }
    if (bytes.size() < 4 + 4 * rank) throw Error(ErrorKind::format, p.string() + ": truncated IDX header");
    IdxArray a;
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        a.dims.push_back(be32(bytes.data() + 4 + 4 * i));
        count *= a.dims.back();
    }
    const std::size_t off = 4 + 4 * rank;
    if (bytes.size() - off != count) {
        throw Error(ErrorKind::format, p.string() + ": payload holds " + std::to_string(bytes.size() - off) +
                                           " bytes, header declares " + std::to_string(count));
    }
    a.values.assign(bytes.begin() + std::ptrdiff_t(off), bytes.end());
    return a;
}

inline void check_label(long long label, std::size_t classes, const std::string& where) {
    if (label < 0 || label >= static_cast<long long>(classes)) {
        throw Error(ErrorKind::value, where + ": label " + std::to_string(label) + " outside [0, " +
                                          std::to_string(classes) + ")");
    }
}

}  // namespace detail

/// Image/label IDX pair as [N,1,H,W] scaled to [0,1]; `cap` > 0 keeps the
/// first `cap` samples.
template <typename T>
Dataset<T> load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t classes, std::size_t cap = 0) {
    const auto im = detail::read_idx(images, 3);
    const auto lb = detail::read_idx(labels, 1);
    if (im.dims[0] != lb.dims[0]) {
        throw Error(ErrorKind::format, "IDX image count " + std::to_string(im.dims[0]) + " differs from label count " +
                                           std::to_string(lb.dims[0]));
    }
    const std::size_t n = cap ? std::min(cap, im.dims[0]) : im.dims[0], h = im.dims[1], w = im.dims[2];
    Dataset<T> d;
    d.classes = classes;
    d.images = Tensor<T>({n, 1, h, w});
    for (std::size_t i = 0; i < n * h * w; ++i) d.images[i] = static_cast<T>(im.values[i] / 255.0);
    for (std::size_t i = 0; i < n; ++i) {
        detail::check_label(lb.values[i], classes, labels.string());
        d.labels.push_back(lb.values[i]);
    }
    return d;
}

inline void write_idx(const std::filesystem::path& p, const std::vector<std::uint32_t>& dims,
                      const std::vector<unsigned char>& values) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error(ErrorKind::io, "cannot write " + p.string());
    const unsigned char head[4] = {0, 0, 0x08, static_cast<unsigned char>(dims.size())};
    out.write(reinterpret_cast<const char*>(head), 4);
    for (auto d : dims) {
        const unsigned char b[4] = {static_cast<unsigned char>(d >> 24), static_cast<unsigned char>(d >> 16),
                                    static_cast<unsigned char>(d >> 8), static_cast<unsigned char>(d)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    out.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size()));
}

// ---- CSV ---------------------------------------------------------------------------

/// Rows of C*H*W numeric features followed by an integer label.
template <typename T>
Dataset<T> load_csv(const std::filesystem::path& p, std::size_t channels, std::size_t height, std::size_t width,
                    std::size_t classes, std::size_t cap = 0) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + p.string());
    const std::size_t features = channels * height * width;
    std::vector<T> values;
    std::vector<int> labels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line) && (cap == 0 || labels.size() < cap)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = p.string() + ":" + std::to_string(line_no);
        std::vector<double> row;
        const char* s = line.data();
        const char* end = s + line.size();
        while (true) {
            while (s < end && *s == ' ') ++s;
            double v = 0;
            auto [ptr, ec] = std::from_chars(s, end, v);
            if (ec != std::errc{}) throw Error(ErrorKind::format, where + ": field " + std::to_string(row.size() + 1) + " is not numeric");
            row.push_back(v);
            s = ptr;
            while (s < end && *s == ' ') ++s;
            if (s == end) break;
            if (*s != ',') throw Error(ErrorKind::format, where + ": expected ',' after field " + std::to_string(row.size()));
            ++s;
        }
        if (row.size() != features + 1) {
            throw Error(ErrorKind::format, where + ": row has " + std::to_string(row.size()) + " fields, expected " +
                                               std::to_string(features) + " features plus a label");
        }
        const double label = row.back();
        if (label != std::floor(label)) throw Error(ErrorKind::format, where + ": label is not an integer");
        detail::check_label(static_cast<long long>(label), classes, where);
        labels.push_back(static_cast<int>(label));
        for (std::size_t k = 0; k < features; ++k) values.push_back(static_cast<T>(row[k]));
    }
    if (labels.empty()) throw Error(ErrorKind::format, p.string() + ": no data rows");
    Dataset<T> d;
    d.classes = classes;
    d.images = Tensor<T>({labels.size(), channels, height, width}, std::move(values));
    d.labels = std::move(labels);
    return d;
}

// ---- entry point -------------------------------------------------------------------

/// Loads and normalizes the dataset described by `d`; relative paths are
/// resolved against `base`.
template <typename T>
Split<T> load_dataset(const DataSpec& d, const std::filesystem::path& base = ".") {
    Split<T> s;
    const std::filesystem::path dir = std::filesystem::path(d.path).is_absolute() ? std::filesystem::path(d.path) : base / d.path;
    switch (d.kind) {
        case DataKind::synthetic: s = synthetic_dataset<T>(d); break;
        case DataKind::idx:
            s = {load_idx_pair<T>(dir / d.train_images, dir / d.train_labels, d.classes, d.train_count()),
                 load_idx_pair<T>(dir / d.test_images, dir / d.test_labels, d.classes, d.test_count())};
            break;
        case DataKind::csv:
            s = {load_csv<T>(dir / d.train_file, d.channels, d.height, d.width, d.classes, d.train_count()),
                 load_csv<T>(dir / d.test_file, d.channels, d.height, d.width, d.classes, d.test_count())};
            break;
    }
    if (s.first.sample_shape() != s.second.sample_shape()) {
        throw Error(ErrorKind::format, "train and test samples differ in shape: " + shape_str(s.first.sample_shape()) +
                                           " vs " + shape_str(s.second.sample_shape()));
    }
    normalize(s);
    return s;
}

}  // namespace repl::harness
