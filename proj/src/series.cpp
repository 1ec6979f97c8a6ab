#include "dtcmr/series.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dtcmr/diagnostics.hpp"

namespace dtcmr {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kUnitTolerance = 1e-6;

std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big)
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    return v;
}

void write_f32(const fs::path& file, const std::vector<double>& values) {
    std::vector<std::uint32_t> raw(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        raw[i] = to_little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + file.string());
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
    if (!out) throw Error("write failed for " + file.string());
}

std::vector<double> read_f32(const fs::path& file, std::size_t count) {
    std::ifstream in(file, std::ios::binary | std::ios::ate);
    if (!in) throw Error("cannot open " + file.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != count * sizeof(float))
        throw Error("size mismatch in " + file.string() + ": expected " +
                    std::to_string(count * sizeof(float)) + " bytes, found " + std::to_string(bytes));
    in.seekg(0);
    std::vector<std::uint32_t> raw(count);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i)
        values[i] = std::bit_cast<float>(to_little_endian(raw[i]));
    return values;
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

json parse_manifest(const fs::path& dir) {
    const fs::path file = dir / "manifest.json";
    std::ifstream in(file);
    if (!in) throw Error("missing sidecar manifest " + file.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw Error("corrupt sidecar " + file.string() + ": " + e.what());
    }
    if (manifest.contains("checksum")) {
        const std::string stored = manifest["checksum"].get<std::string>();
        json body = manifest;
        body.erase("checksum");
        if (fnv1a_hex(body.dump()) != stored)
            throw Error("corrupt sidecar " + file.string() + ": checksum mismatch");
    }
    return manifest;
}

}  // namespace

std::vector<std::size_t> DiffusionSeries::b0_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bvalues.size(); ++i)
        if (bvalues[i] == 0.0) out.push_back(i);
    return out;
}

DiffusionSeries DiffusionSeries::subset(const std::vector<std::size_t>& indices) const {
    DiffusionSeries out;
    out.height = height;
    out.width = width;
    for (std::size_t i : indices) {
        out.frames.push_back(frames.at(i));
        out.bvalues.push_back(bvalues.at(i));
        out.directions.push_back(directions.at(i));
        out.rep_index.push_back(rep_index.at(i));
    }
    return out;
}

DiffusionSeries DiffusionSeries::with_frames(std::vector<Image> new_frames) const {
    if (new_frames.size() != frames.size()) throw Error("frame count mismatch");
    DiffusionSeries out = *this;
    out.frames = std::move(new_frames);
    return out;
}

void validate_series(const DiffusionSeries& s) {
    if (s.frames.empty()) throw Error("no frames");
    const std::size_t n = s.frames.size();
    if (s.bvalues.size() != n || s.directions.size() != n || s.rep_index.size() != n)
        throw Error("metadata length does not match frame count");
    for (std::size_t i = 0; i < n; ++i) {
        if (s.frames[i].height() != s.height || s.frames[i].width() != s.width)
            throw Error("dimension mismatch in frame " + std::to_string(i));
        if (!std::isfinite(s.bvalues[i]) || s.bvalues[i] < 0.0)
            throw Error("invalid b-value in frame " + std::to_string(i));
        if (s.bvalues[i] > 0.0) {
            const auto& g = s.directions[i];
            const double norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
            if (std::abs(norm - 1.0) > kUnitTolerance)
                throw Error("non-unit direction in frame " + std::to_string(i));
        }
    }
    if (s.b0_indices().empty()) throw Error("no b0 frame");
}

Mat3 to_matrix(const Sym3& d) {
    return {{{d[0], d[1], d[2]}, {d[1], d[3], d[4]}, {d[2], d[4], d[5]}}};
}

Sym3 from_matrix(const Mat3& m) {
    return {m[0][0], 0.5 * (m[0][1] + m[1][0]), 0.5 * (m[0][2] + m[2][0]),
            m[1][1], 0.5 * (m[1][2] + m[2][1]), m[2][2]};
}

double quadratic_form(const Sym3& d, const Direction& g) {
    return d[0] * g[0] * g[0] + 2.0 * d[1] * g[0] * g[1] + 2.0 * d[2] * g[0] * g[2] +
           d[3] * g[1] * g[1] + 2.0 * d[4] * g[1] * g[2] + d[5] * g[2] * g[2];
}

std::size_t MyocardiumMask::count() const {
    return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(),
                                                  [](std::uint8_t v) { return v != 0; }));
}

MyocardiumMask MyocardiumMask::from_labels(Grid<std::uint8_t> labels) {
    MyocardiumMask mask;
    double sx = 0.0, sy = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < labels.height(); ++r)
        for (std::size_t c = 0; c < labels.width(); ++c)
            if (labels(r, c)) {
                sx += static_cast<double>(c);
                sy += static_cast<double>(r);
                ++n;
            }
    if (n > 0) mask.centroid = {sx / static_cast<double>(n), sy / static_cast<double>(n)};
    mask.labels = std::move(labels);
    return mask;
}

Image MyocardiumMask::as_image() const {
    Image img(height(), width());
    for (std::size_t i = 0; i < labels.size(); ++i) img[i] = labels[i] ? 1.0 : 0.0;
    return img;
}

void save_series(const DiffusionSeries& series, const fs::path& dir) {
    validate_series(series);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error("unwritable path " + dir.string());

    json frames = json::array();
    for (std::size_t i = 0; i < series.frame_count(); ++i) {
        std::ostringstream name;
        name << "frame_" << std::setw(4) << std::setfill('0') << i << ".f32";
        const auto& v = series.frames[i].values();
        write_f32(dir / name.str(), std::vector<double>(v.begin(), v.end()));
        const auto& g = series.directions[i];
        frames.push_back({{"file", name.str()},
                          {"b", series.bvalues[i]},
                          {"g", {g[0], g[1], g[2]}},
                          {"rep", series.rep_index[i]}});
    }
    json manifest = {{"height", series.height}, {"width", series.width}, {"frames", frames}};
    manifest["checksum"] = fnv1a_hex(manifest.dump());

    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw Error("unwritable path " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

std::pair<std::size_t, std::size_t> read_manifest_dims(const fs::path& dir) {
    const json m = parse_manifest(dir);
    try {
        return {m.at("height").get<std::size_t>(), m.at("width").get<std::size_t>()};
    } catch (const json::exception& e) {
        throw Error(std::string("malformed sidecar: ") + e.what());
    }
}

DiffusionSeries load_series(const fs::path& dir) {
    const json m = parse_manifest(dir);
    DiffusionSeries s;
    try {
        s.height = m.at("height").get<std::size_t>();
        s.width = m.at("width").get<std::size_t>();
        for (const auto& f : m.at("frames")) {
            const auto g = f.at("g").get<std::vector<double>>();
            if (g.size() != 3) throw Error("direction must have three components");
            s.bvalues.push_back(f.at("b").get<double>());
            s.directions.push_back({g[0], g[1], g[2]});
            s.rep_index.push_back(f.value("rep", 0));
            const auto values = read_f32(dir / f.at("file").get<std::string>(), s.height * s.width);
            Image img(s.height, s.width);
            std::copy(values.begin(), values.end(), img.begin());
            s.frames.push_back(std::move(img));
        }
    } catch (const json::exception& e) {
        throw Error(std::string("malformed sidecar: ") + e.what());
    }
    validate_series(s);
    return s;
}

double intensity_percentile(const DiffusionSeries& series, double percentile) {
    std::vector<double> all;
    all.reserve(series.frame_count() * series.height * series.width);
    for (const auto& f : series.frames) all.insert(all.end(), f.begin(), f.end());
    if (all.empty()) throw Error("no frames");
    const double pos = std::clamp(percentile, 0.0, 100.0) / 100.0 * static_cast<double>(all.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, all.size() - 1);
    std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(lo), all.end());
    const double vlo = all[lo];
    double vhi = vlo;
    if (hi != lo) vhi = *std::min_element(all.begin() + static_cast<std::ptrdiff_t>(hi), all.end());
    return vlo + (pos - static_cast<double>(lo)) * (vhi - vlo);
}

NormalizedSeries normalize_intensities(const DiffusionSeries& series, double percentile) {
    double peak = 0.0;
    for (const auto& f : series.frames) peak = std::max(peak, max_abs(f));
    if (!(peak > 0.0)) throw Error("all-zero series cannot be normalized");
    double scale = intensity_percentile(series, percentile);
    if (!(scale > 0.0)) scale = peak;  // sparse images: percentile lands on background

    NormalizedSeries out{series, scale};
    for (auto& f : out.series.frames)
        for (double& v : f) v = std::clamp(v / scale, 0.0, 1.0);
    return out;
}

void save_mask(const MyocardiumMask& mask, const fs::path& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + file.string());
    std::vector<char> raw(mask.labels.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = mask.labels[i] ? 1 : 0;
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
}

MyocardiumMask load_mask(const fs::path& file, std::size_t height, std::size_t width) {
    std::ifstream in(file, std::ios::binary | std::ios::ate);
    if (!in) throw Error("missing mask " + file.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != height * width)
        throw Error("mask size mismatch: expected " + std::to_string(height * width) +
                    " pixels, found " + std::to_string(bytes));
    in.seekg(0);
    std::vector<char> raw(bytes);
    in.read(raw.data(), static_cast<std::streamsize>(bytes));
    Grid<std::uint8_t> labels(height, width);
    for (std::size_t i = 0; i < bytes; ++i) {
        if (raw[i] != 0 && raw[i] != 1) throw Error("mask values must be 0 or 1");
        labels[i] = static_cast<std::uint8_t>(raw[i]);
    }
    return MyocardiumMask::from_labels(std::move(labels));
}

void save_field(const DenseField& field, const fs::path& file) {
    std::vector<double> v;
    v.reserve(field.size() * 2);
    for (const Vec2& d : field) {
        v.push_back(d.x);
        v.push_back(d.y);
    }
    write_f32(file, v);
}

DenseField load_field(const fs::path& file, std::size_t height, std::size_t width) {
    const auto v = read_f32(file, height * width * 2);
    DenseField field(height, width);
    for (std::size_t i = 0; i < field.size(); ++i) field[i] = {v[2 * i], v[2 * i + 1]};
    return field;
}

void save_tensor(const TensorField& tensor, const fs::path& file) {
    std::vector<double> v;
    v.reserve(tensor.d.size() * 7);
    for (std::size_t i = 0; i < tensor.d.size(); ++i) {
        v.push_back(tensor.s0[i]);
        v.insert(v.end(), tensor.d[i].begin(), tensor.d[i].end());
    }
    write_f32(file, v);
}

TensorField load_tensor(const fs::path& file, std::size_t height, std::size_t width) {
    std::error_code ec;
    const auto bytes = fs::file_size(file, ec);
    if (ec) throw Error("missing tensor file " + file.string());
    const std::size_t expected = height * width * 7 * sizeof(float);
    if (bytes != expected)
        throw Error("tensor file pixel count mismatch: expected " + std::to_string(height * width) +
                    " pixels (" + std::to_string(expected) + " bytes), found " +
                    std::to_string(bytes / (7 * sizeof(float))) + " pixels (" + std::to_string(bytes) +
                    " bytes)");
    const auto v = read_f32(file, height * width * 7);
    TensorField t(height, width);
    for (std::size_t i = 0; i < t.d.size(); ++i) {
        t.s0[i] = v[7 * i];
        for (int k = 0; k < 6; ++k) t.d[i][k] = v[7 * i + 1 + k];
    }
    return t;
}

}  // namespace dtcmr
