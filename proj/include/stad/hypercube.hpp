#pragma once

// Hyperspectral cubes, label maps, raw+JSON cube files, and a synthetic scene
// generator for desk-scale experiments.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stad/error.hpp"

namespace stad::hsi {

namespace fs = std::filesystem;

/// M x N x B volume stored band-last (pixel-major), so row `i*N + j` of the
/// flattened L x B matrix is the spectrum of pixel (i, j).
class HyperCube {
  public:
    HyperCube() = default;
    HyperCube(std::string name, std::size_t height, std::size_t width, std::size_t bands, std::vector<double> data)
        : name_(std::move(name)), height_(height), width_(width), bands_(bands), data_(std::move(data)) {
        if (height_ < 3 || width_ < 3 || bands_ < 2)
            throw ValidationError("cube '" + name_ + "' must be at least 3x3x2, got " + std::to_string(height_) + "x" +
                                  std::to_string(width_) + "x" + std::to_string(bands_));
        if (data_.size() != height_ * width_ * bands_)
            throw ValidationError("cube '" + name_ + "': payload holds " + std::to_string(data_.size()) +
                                  " values, expected " + std::to_string(height_ * width_ * bands_));
        for (double v : data_)
            if (!std::isfinite(v)) throw ValidationError("cube '" + name_ + "' contains non-finite values");
    }

    const std::string& name() const { return name_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t bands() const { return bands_; }
    std::size_t pixels() const { return height_ * width_; }
    std::span<const double> data() const { return data_; }
    std::span<const double> spectrum(std::size_t pixel) const {
        return std::span<const double>(data_).subspan(pixel * bands_, bands_);
    }
    double at(std::size_t i, std::size_t j, std::size_t b) const { return data_[(i * width_ + j) * bands_ + b]; }

    std::pair<double, double> range() const {
        auto [lo, hi] = std::minmax_element(data_.begin(), data_.end());
        return {*lo, *hi};
    }

  private:
    std::string name_;
    std::size_t height_ = 0, width_ = 0, bands_ = 0;
    std::vector<double> data_;
};

/// Binary anomaly map, 1 = anomaly.
struct LabelMap {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> values;

    std::size_t positives() const {
        return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
    }
};

enum class NormalizationMode { kUnit, kByte };

/// Per-cube linear map to [0,1] (network input) or [0,255] (filter value domain).
struct NormalizationSpec {
    NormalizationMode mode = NormalizationMode::kUnit;
    double min = 0.0, max = 1.0;

    double upper() const { return mode == NormalizationMode::kUnit ? 1.0 : 255.0; }
    double forward(double v) const { return (v - min) / (max - min) * upper(); }
    double inverse(double v) const { return min + v / upper() * (max - min); }
};

inline std::pair<HyperCube, NormalizationSpec> normalize(const HyperCube& cube,
                                                         NormalizationMode mode = NormalizationMode::kUnit) {
    auto [lo, hi] = cube.range();
    if (!(hi > lo)) throw ValidationError("cube '" + cube.name() + "' is constant and cannot be normalized");
    NormalizationSpec spec{mode, lo, hi};
    std::vector<double> out(cube.data().begin(), cube.data().end());
    for (double& v : out) v = spec.forward(v);
    return {HyperCube(cube.name(), cube.height(), cube.width(), cube.bands(), std::move(out)), spec};
}

/// Keeps bands [0, first_k).
inline HyperCube select_bands(const HyperCube& cube, std::size_t first_k) {
    if (first_k < 2) throw ValidationError("select_bands: need at least 2 bands");
    if (first_k > cube.bands())
        throw ValidationError("select_bands: cube has " + std::to_string(cube.bands()) + " bands, requested " +
                              std::to_string(first_k));
    std::vector<double> out;
    out.reserve(cube.pixels() * first_k);
    for (std::size_t p = 0; p < cube.pixels(); ++p) {
        auto s = cube.spectrum(p);
        out.insert(out.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(first_k));
    }
    return HyperCube(cube.name(), cube.height(), cube.width(), first_k, std::move(out));
}

// ---------------------------------------------------------------------------
// Raw + JSON sidecar files

enum class Interleave { kBsq, kBil, kBip };

inline std::string to_string(Interleave il) {
    switch (il) {
        case Interleave::kBsq: return "bsq";
        case Interleave::kBil: return "bil";
        case Interleave::kBip: return "bip";
    }
    return "bsq";
}

inline Interleave parse_interleave(const std::string& s) {
    if (s == "bsq") return Interleave::kBsq;
    if (s == "bil") return Interleave::kBil;
    if (s == "bip") return Interleave::kBip;
    throw ValidationError("unsupported interleave '" + s + "'");
}

struct CubeHeader {
    std::size_t height = 0, width = 0, bands = 0;
    std::string dtype = "f32";
    Interleave interleave = Interleave::kBsq;

    nlohmann::json to_json() const {
        return {{"height", height}, {"width", width}, {"bands", bands}, {"dtype", dtype},
                {"interleave", hsi::to_string(interleave)}};
    }

    static CubeHeader from_json(const nlohmann::json& j) {
        try {
            CubeHeader h;
            h.height = j.at("height").get<std::size_t>();
            h.width = j.at("width").get<std::size_t>();
            h.bands = j.at("bands").get<std::size_t>();
            h.dtype = j.value("dtype", std::string("f32"));
            h.interleave = parse_interleave(j.value("interleave", std::string("bsq")));
            return h;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("malformed cube header: ") + e.what());
        }
    }

    std::size_t element_size() const {
        if (dtype == "f32") return 4;
        if (dtype == "f64") return 8;
        throw ValidationError("unsupported dtype '" + dtype + "' (expected f32 or f64)");
    }
};

namespace detail {

inline std::size_t file_index(const CubeHeader& h, std::size_t i, std::size_t j, std::size_t b) {
    switch (h.interleave) {
        case Interleave::kBsq: return (b * h.height + i) * h.width + j;
        case Interleave::kBil: return (i * h.bands + b) * h.width + j;
        case Interleave::kBip: return (i * h.width + j) * h.bands + b;
    }
    return 0;
}

template <class T>
T read_le(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        auto* bytes = reinterpret_cast<unsigned char*>(&v);
        std::reverse(bytes, bytes + sizeof(T));
    }
    return v;
}

template <class T>
void write_le(std::ofstream& os, T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto* bytes = reinterpret_cast<unsigned char*>(&v);
        std::reverse(bytes, bytes + sizeof(T));
    }
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace detail

inline nlohmann::json read_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("write failed for " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline CubeHeader read_header(const fs::path& sidecar) { return CubeHeader::from_json(read_json(sidecar)); }

/// Sidecar path for a payload: `scene.raw` -> `scene.json`.
inline fs::path sidecar_for(const fs::path& payload) {
    auto p = payload;
    return p.replace_extension(".json");
}

/// Loads a payload described by `header`, returning canonical band-last order.
inline HyperCube load_cube(const fs::path& payload, const CubeHeader& header) {
    const std::size_t esize = header.element_size();
    const std::string bytes = detail::read_file(payload);
    const std::size_t count = header.height * header.width * header.bands;
    if (bytes.size() != count * esize)
        throw ValidationError(payload.string() + ": payload has " + std::to_string(bytes.size()) + " bytes, header implies " +
                              std::to_string(count * esize));
    std::vector<double> data(count);
    for (std::size_t i = 0; i < header.height; ++i)
        for (std::size_t j = 0; j < header.width; ++j)
            for (std::size_t b = 0; b < header.bands; ++b) {
                const char* p = bytes.data() + detail::file_index(header, i, j, b) * esize;
                const double v = esize == 4 ? static_cast<double>(detail::read_le<float>(p)) : detail::read_le<double>(p);
                if (!std::isfinite(v)) throw ValidationError(payload.string() + ": NaN/Inf in payload");
                data[(i * header.width + j) * header.bands + b] = v;
            }
    HyperCube cube(payload.stem().string(), header.height, header.width, header.bands, std::move(data));
    auto [lo, hi] = cube.range();
    if (!(hi > lo)) throw ValidationError(payload.string() + ": constant cube rejected");
    return cube;
}

inline HyperCube load_cube(const fs::path& payload) { return load_cube(payload, read_header(sidecar_for(payload))); }

/// Writes `payload` and its JSON sidecar.
inline void save_cube(const HyperCube& cube, const fs::path& payload, Interleave interleave = Interleave::kBsq,
                      const std::string& dtype = "f32") {
    CubeHeader header{cube.height(), cube.width(), cube.bands(), dtype, interleave};
    const std::size_t esize = header.element_size();
    if (payload.has_parent_path()) fs::create_directories(payload.parent_path());
    std::vector<double> ordered(cube.data().size());
    for (std::size_t i = 0; i < cube.height(); ++i)
        for (std::size_t j = 0; j < cube.width(); ++j)
            for (std::size_t b = 0; b < cube.bands(); ++b) ordered[detail::file_index(header, i, j, b)] = cube.at(i, j, b);
    std::ofstream os(payload, std::ios::binary);
    if (!os) throw IoError("cannot write " + payload.string());
    for (double v : ordered) {
        if (esize == 4)
            detail::write_le(os, static_cast<float>(v));
        else
            detail::write_le(os, v);
    }
    if (!os) throw IoError("write failed for " + payload.string());
    write_json(sidecar_for(payload), header.to_json());
}

// ---------------------------------------------------------------------------
// Label maps: binary PGM (P5) or raw+JSON with bands = 1

namespace detail {

inline std::string next_pgm_token(const std::string& s, std::size_t& pos) {
    while (pos < s.size()) {
        if (s[pos] == '#') {
            while (pos < s.size() && s[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
            ++pos;
        } else {
            break;
        }
    }
    const std::size_t start = pos;
    while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    return s.substr(start, pos - start);
}

}  // namespace detail

/// Grey image from a binary PGM; 16-bit samples are big-endian per the format.
struct PgmImage {
    std::size_t height = 0, width = 0;
    unsigned maxval = 255;
    std::vector<std::uint16_t> samples;
};

inline PgmImage read_pgm(const fs::path& path) {
    const std::string s = detail::read_file(path);
    std::size_t pos = 0;
    if (detail::next_pgm_token(s, pos) != "P5") throw ValidationError(path.string() + ": not a binary PGM (P5)");
    PgmImage img;
    try {
        img.width = std::stoul(detail::next_pgm_token(s, pos));
        img.height = std::stoul(detail::next_pgm_token(s, pos));
        img.maxval = static_cast<unsigned>(std::stoul(detail::next_pgm_token(s, pos)));
    } catch (const std::exception&) {
        throw ValidationError(path.string() + ": malformed PGM header");
    }
    if (img.maxval == 0 || img.maxval > 65535) throw ValidationError(path.string() + ": invalid PGM maxval");
    ++pos;  // single whitespace before raster
    const std::size_t bytes_per = img.maxval > 255 ? 2 : 1;
    const std::size_t n = img.width * img.height;
    if (s.size() < pos + n * bytes_per) throw ValidationError(path.string() + ": truncated PGM raster");
    img.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (bytes_per == 1) {
            img.samples[i] = static_cast<unsigned char>(s[pos + i]);
        } else {
            img.samples[i] = static_cast<std::uint16_t>((static_cast<unsigned char>(s[pos + 2 * i]) << 8) |
                                                        static_cast<unsigned char>(s[pos + 2 * i + 1]));
        }
    }
    return img;
}

inline void write_pgm(const fs::path& path, const PgmImage& img) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
    for (std::uint16_t v : img.samples) {
        if (img.maxval > 255) os.put(static_cast<char>(v >> 8));
        os.put(static_cast<char>(v & 0xff));
    }
    if (!os) throw IoError("write failed for " + path.string());
}

inline LabelMap load_labels(const fs::path& path) {
    LabelMap labels;
    if (path.extension() == ".pgm") {
        auto img = read_pgm(path);
        labels.height = img.height;
        labels.width = img.width;
        labels.values.resize(img.samples.size());
        for (std::size_t i = 0; i < img.samples.size(); ++i) labels.values[i] = img.samples[i] != 0 ? 1 : 0;
        return labels;
    }
    auto header = read_header(sidecar_for(path));
    if (header.bands != 1) throw ValidationError(path.string() + ": label payload must have bands = 1");
    const std::string bytes = detail::read_file(path);
    const std::size_t esize = header.element_size(), n = header.height * header.width;
    if (bytes.size() != n * esize) throw ValidationError(path.string() + ": label payload length mismatch");
    labels.height = header.height;
    labels.width = header.width;
    labels.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const char* p = bytes.data() + i * esize;
        const double v = esize == 4 ? static_cast<double>(detail::read_le<float>(p)) : detail::read_le<double>(p);
        labels.values[i] = v != 0.0 ? 1 : 0;
    }
    return labels;
}

inline void save_labels_pgm(const LabelMap& labels, const fs::path& path) {
    PgmImage img{labels.height, labels.width, 255, {}};
    img.samples.reserve(labels.values.size());
    for (auto v : labels.values) img.samples.push_back(v ? 255 : 0);
    write_pgm(path, img);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneParams {
    std::uint64_t seed = 0;
    std::size_t height = 32, width = 32, bands = 20;
    std::size_t n_targets = 4;
    std::size_t target_size_px = 4;
    double contrast = 0.6;
    double noise_sigma = 0.004;
    /// Background endmembers are drawn from a library shared by every scene
    /// generated with the same library seed.
    std::uint64_t library_seed = 0x5eed;
    std::size_t library_size = 6;
};

struct Scene {
    HyperCube cube;
    LabelMap labels;
};

namespace detail {

/// Smooth positive spectrum: a baseline plus three Gaussian absorption/reflection bumps.
inline std::vector<double> random_spectrum(std::mt19937_64& rng, std::size_t bands) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double base = 0.2 + 0.4 * u(rng);
    const double slope = 0.3 * (u(rng) - 0.5);
    std::vector<double> s(bands);
    double centre[3], width[3], amp[3];
    for (int k = 0; k < 3; ++k) {
        centre[k] = u(rng) * static_cast<double>(bands);
        width[k] = 1.5 + u(rng) * static_cast<double>(bands) / 4.0;
        amp[k] = 0.5 * (u(rng) - 0.4);
    }
    for (std::size_t b = 0; b < bands; ++b) {
        const double x = static_cast<double>(b);
        double v = base + slope * x / static_cast<double>(bands);
        for (int k = 0; k < 3; ++k) v += amp[k] * std::exp(-0.5 * (x - centre[k]) * (x - centre[k]) / (width[k] * width[k]));
        s[b] = std::clamp(v, 0.02, 1.0);
    }
    return s;
}

}  // namespace detail

/// Low-rank background (three library endmembers with smooth abundances) plus
/// Gaussian noise, with `n_targets` disjoint compact blobs of a foreign spectrum.
inline Scene synth_scene(const SceneParams& p) {
    if (p.height < 3 || p.width < 3 || p.bands < 2) throw ValidationError("synth_scene: scene must be at least 3x3x2");
    if (p.library_size < 3) throw ValidationError("synth_scene: library needs at least 3 endmembers");
    if (p.contrast < 0.0 || p.contrast > 1.0) throw ValidationError("synth_scene: contrast must lie in [0,1]");
    if (p.n_targets > 0 && (p.target_size_px == 0 || p.n_targets * p.target_size_px * 2 > p.height * p.width))
        throw ValidationError("synth_scene: targets must be small relative to the scene");

    std::mt19937_64 lib_rng(p.library_seed);
    std::vector<std::vector<double>> library;
    for (std::size_t e = 0; e < p.library_size; ++e) library.push_back(detail::random_spectrum(lib_rng, p.bands));

    std::mt19937_64 rng(p.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, p.noise_sigma);

    std::vector<std::size_t> order(p.library_size);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    constexpr std::size_t kMembers = 3;

    // smooth abundance fields: softmax of a few low-frequency waves per member
    const std::size_t L = p.height * p.width;
    std::vector<double> field(kMembers * L, 0.0);
    for (std::size_t e = 0; e < kMembers; ++e)
        for (int wave = 0; wave < 3; ++wave) {
            const double fx = (u(rng) - 0.5) * 2.0 / static_cast<double>(p.width);
            const double fy = (u(rng) - 0.5) * 2.0 / static_cast<double>(p.height);
            const double phase = u(rng) * 6.283185307179586;
            const double amp = 0.5 + u(rng);
            for (std::size_t i = 0; i < p.height; ++i)
                for (std::size_t j = 0; j < p.width; ++j)
                    field[e * L + i * p.width + j] +=
                        amp * std::sin(6.283185307179586 * (fx * static_cast<double>(j) + fy * static_cast<double>(i)) + phase);
        }

    std::vector<double> data(L * p.bands);
    for (std::size_t px = 0; px < L; ++px) {
        double w[kMembers], z = 0.0;
        for (std::size_t e = 0; e < kMembers; ++e) z += (w[e] = std::exp(1.5 * field[e * L + px]));
        for (std::size_t b = 0; b < p.bands; ++b) {
            double v = 0.0;
            for (std::size_t e = 0; e < kMembers; ++e) v += w[e] / z * library[order[e]][b];
            data[px * p.bands + b] = v;
        }
    }

    LabelMap labels{p.height, p.width, std::vector<std::uint8_t>(L, 0)};
    std::vector<std::uint8_t> blocked(L, 0);  // target pixels and their 8-neighbourhoods
    for (std::size_t t = 0; t < p.n_targets; ++t) {
        const auto target = detail::random_spectrum(rng, p.bands);
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const auto ci = static_cast<std::ptrdiff_t>(rng() % p.height);
            const auto cj = static_cast<std::ptrdiff_t>(rng() % p.width);
            // the target_size_px pixels nearest to the centre form the blob
            std::vector<std::pair<std::ptrdiff_t, std::size_t>> cand;
            const auto reach = static_cast<std::ptrdiff_t>(std::ceil(std::sqrt(static_cast<double>(p.target_size_px)))) + 1;
            for (std::ptrdiff_t di = -reach; di <= reach; ++di)
                for (std::ptrdiff_t dj = -reach; dj <= reach; ++dj) {
                    const auto i = ci + di, j = cj + dj;
                    if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(p.height) ||
                        j >= static_cast<std::ptrdiff_t>(p.width))
                        continue;
                    cand.emplace_back(di * di + dj * dj, static_cast<std::size_t>(i) * p.width + static_cast<std::size_t>(j));
                }
            std::sort(cand.begin(), cand.end());
            if (cand.size() < p.target_size_px) continue;
            cand.resize(p.target_size_px);
            if (std::any_of(cand.begin(), cand.end(), [&](const auto& c) { return blocked[c.second] != 0; })) continue;
            for (const auto& c : cand) {
                labels.values[c.second] = 1;
                for (std::size_t b = 0; b < p.bands; ++b) {
                    double& v = data[c.second * p.bands + b];
                    v = (1.0 - p.contrast) * v + p.contrast * target[b];
                }
            }
            for (const auto& c : cand) {
                const auto i = static_cast<std::ptrdiff_t>(c.second / p.width), j = static_cast<std::ptrdiff_t>(c.second % p.width);
                for (std::ptrdiff_t di = -1; di <= 1; ++di)
                    for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
                        const auto ni = i + di, nj = j + dj;
                        if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(p.height) ||
                            nj >= static_cast<std::ptrdiff_t>(p.width))
                            continue;
                        blocked[static_cast<std::size_t>(ni) * p.width + static_cast<std::size_t>(nj)] = 1;
                    }
            }
            placed = true;
        }
        if (!placed)
            throw ValidationError("synth_scene: could not place target " + std::to_string(t) + " in 100 attempts");
    }

    for (double& v : data) v += noise(rng);
    return Scene{HyperCube("synth_" + std::to_string(p.seed), p.height, p.width, p.bands, std::move(data)),
                 std::move(labels)};
}

}  // namespace stad::hsi
