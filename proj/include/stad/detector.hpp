#pragma once

// Anomaly scoring: masked-loss input gradients (STAD), the plain saliency
// path, and the reconstruction / filter ablations.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stad/error.hpp"
#include "stad/hypercube.hpp"
#include "stad/maps.hpp"
#include "stad/networks.hpp"
#include "stad/stf.hpp"
#include "stad/tensor.hpp"

namespace stad::detect {

using ad::Tensor;
using json = nlohmann::json;

/// Ablation scenarios: A recon error, B saliency, C filter mask, D recon x mask, E full method.
enum class Mode { kA, kB, kC, kD, kE };

inline std::string to_string(Mode m) {
    static const char* names[] = {"A", "B", "C", "D", "E"};
    return names[static_cast<int>(m)];
}

inline Mode parse_mode(const std::string& s) {
    if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'E') return static_cast<Mode>(s[0] - 'A');
    if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'e') return static_cast<Mode>(s[0] - 'a');
    throw ValidationError("unknown detection mode '" + s + "' (expected A, B, C, D or E)");
}

/// Where a score map came from.
inline std::string provenance(Mode m) {
    switch (m) {
        case Mode::kA: return "recon";
        case Mode::kB: return "saliency";
        case Mode::kC: return "stf";
        case Mode::kD: return "recon×stf";
        case Mode::kE: return "stad";
    }
    return "?";
}

struct DetectorConfig {
    stf::StfConfig stf;
    Mode mode = Mode::kE;
    /// Replace the mask by ones (mode E then equals mode B).
    bool bypass_mask = false;
    /// Multiplier applied to the mask; ranking is unchanged for any positive value.
    double mask_scale = 1.0;
    /// Attention tile edge when the network is a teacher.
    std::size_t tile = 32;
};

struct Detection {
    ScalarMap scores;
    std::string provenance;
    /// Per-pixel input gradient [L x B] for the gradient-based modes.
    std::vector<double> gradient;
    std::optional<ScalarMap> mask;
};

namespace detail {

/// Network input: the cube scaled to [0,1], as pixel-major tokens [L x B].
inline std::vector<double> network_input(const hsi::HyperCube& cube) {
    const auto norm = hsi::normalize(cube, hsi::NormalizationMode::kUnit).first;
    return {norm.data().begin(), norm.data().end()};
}

inline void check_bands(const nn::ModelParams& net, const hsi::HyperCube& cube) {
    if (net.spec().bands != cube.bands())
        throw DimensionError("detector: network expects " + std::to_string(net.spec().bands) + " bands, cube '" +
                             cube.name() + "' has " + std::to_string(cube.bands()));
}

/// Three reconstructions as [L x B] token rows.
inline nn::Outputs reconstruct(const nn::Bound& p, const Tensor& x, std::size_t h, std::size_t w, std::size_t tile) {
    if (p.spec().kind == nn::ModelKind::kTeacher) return nn::teacher_forward_image(p, x, h, w, tile);
    auto out = nn::student_forward(p, nn::tokens_to_channels(x, h, w));
    return {nn::channels_to_tokens(out[0]), nn::channels_to_tokens(out[1]), nn::channels_to_tokens(out[2])};
}

/// Per-pixel squared error summed over bands and over the three blocks: [L].
inline Tensor pixel_error(const nn::Outputs& recon, const Tensor& x) {
    Tensor e;
    for (const auto& r : recon) {
        Tensor ek = ad::sum_lastdim(ad::square(ad::sub(x, r)));
        e = e.defined() ? ad::add(e, ek) : ek;
    }
    return e;
}

/// S_i = max_b |G_ib|.
inline ScalarMap band_max_abs(const std::vector<double>& g, std::size_t h, std::size_t w, std::size_t b,
                              const std::string& cube) {
    std::vector<double> s(h * w, 0.0);
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t k = 0; k < b; ++k) {
            const double v = g[i * b + k];
            if (!std::isfinite(v)) throw NumericalError("detector: non-finite input gradient for cube '" + cube + "'");
            s[i] = std::max(s[i], std::abs(v));
        }
    return ScalarMap(h, w, std::move(s));
}

/// Backpropagates `loss_of(error)` to the input and returns the band-max map.
template <class LossOf>
Detection gradient_scores(const nn::ModelParams& net, const hsi::HyperCube& cube, std::size_t tile, LossOf loss_of) {
    check_bands(net, cube);
    const std::size_t h = cube.height(), w = cube.width(), b = cube.bands();
    ad::Tape tape;
    Tensor x = tape.leaf({h * w, b}, network_input(cube));
    const nn::Bound p(net, nullptr);
    Tensor loss = loss_of(pixel_error(reconstruct(p, x, h, w, tile), x));
    if (!std::isfinite(loss.item())) throw NumericalError("detector: non-finite loss for cube '" + cube.name() + "'");
    if (loss.requires_grad()) tape.backward(loss);
    Detection d;
    d.gradient.assign(h * w * b, 0.0);
    if (!x.grad().empty()) d.gradient.assign(x.grad().begin(), x.grad().end());
    d.scores = band_max_abs(d.gradient, h, w, b, cube.name());
    return d;
}

}  // namespace detail

/// Unmasked reconstruction loss backpropagated to the input, band-max of |G|.
inline Detection saliency_map(const nn::ModelParams& net, const hsi::HyperCube& cube, std::size_t tile = 32) {
    auto d = detail::gradient_scores(net, cube, tile, [](const Tensor& err) { return ad::sum(err); });
    d.provenance = provenance(Mode::kB);
    return d;
}

/// Masked loss sum_i mask_i * err_i backpropagated to the input. The mask is
/// given explicitly, which is how bypass and scaling are expressed.
inline Detection masked_saliency(const nn::ModelParams& net, const hsi::HyperCube& cube, const ScalarMap& mask,
                                 std::size_t tile = 32) {
    if (mask.height != cube.height() || mask.width != cube.width())
        throw DimensionError("detector: mask size does not match cube '" + cube.name() + "'");
    const Tensor z = ad::constant({mask.size()}, mask.values);
    auto d = detail::gradient_scores(net, cube, tile, [&](const Tensor& err) { return ad::sum(ad::mul(err, z)); });
    d.provenance = provenance(Mode::kE);
    d.mask = mask;
    return d;
}

inline ScalarMap stf_mask(const hsi::HyperCube& cube, const DetectorConfig& cfg) {
    if (cfg.bypass_mask) return ScalarMap(cube.height(), cube.width(), cfg.mask_scale);
    ScalarMap z = stf::small_target_filter(cube, cfg.stf);
    for (double& v : z.values) v *= cfg.mask_scale;
    return z;
}

/// Full method: filter mask, masked reconstruction loss, input gradient, band max.
inline Detection stad_detect(const nn::ModelParams& net, const hsi::HyperCube& cube, const DetectorConfig& cfg = {}) {
    return masked_saliency(net, cube, stf_mask(cube, cfg), cfg.tile);
}

/// Per-pixel squared reconstruction error of the third block (normalized data).
inline ScalarMap reconstruction_error(const nn::ModelParams& net, const hsi::HyperCube& cube, std::size_t tile = 32) {
    detail::check_bands(net, cube);
    const std::size_t h = cube.height(), w = cube.width();
    const Tensor x = ad::constant({h * w, cube.bands()}, detail::network_input(cube));
    const nn::Bound p(net, nullptr);
    auto recon = detail::reconstruct(p, x, h, w, tile);
    Tensor e = ad::sum_lastdim(ad::square(ad::sub(x, recon[2])));
    return ScalarMap(h, w, {e.values().begin(), e.values().end()});
}

/// Scores for any ablation mode. `net` may be null only for mode C.
inline Detection ablation_detect(Mode mode, const nn::ModelParams* net, const hsi::HyperCube& cube,
                                 const DetectorConfig& cfg = {}) {
    if (mode != Mode::kC && !net) throw ValidationError("mode " + to_string(mode) + " needs a network checkpoint");
    Detection d;
    switch (mode) {
        case Mode::kA: d.scores = reconstruction_error(*net, cube, cfg.tile); break;
        case Mode::kB: d = saliency_map(*net, cube, cfg.tile); break;
        case Mode::kC: d.scores = stf_mask(cube, cfg); break;
        case Mode::kD: {
            auto z = stf_mask(cube, cfg);
            d.scores = reconstruction_error(*net, cube, cfg.tile);
            for (std::size_t i = 0; i < z.size(); ++i) d.scores.values[i] *= z.values[i];
            d.mask = std::move(z);
            break;
        }
        case Mode::kE: d = stad_detect(*net, cube, cfg); break;
    }
    d.provenance = provenance(mode);
    return d;
}

// ---------------------------------------------------------------------------
// Export

struct ExportResult {
    /// Set when the map was constant and exported as zeros.
    bool constant_warning = false;
    std::vector<double> normalized;
};

/// Min-max to [0,1]; a constant map becomes all zeros with the warning flag.
inline ExportResult normalize_for_export(const ScalarMap& s) {
    ExportResult r;
    const double lo = s.min(), hi = s.max();
    r.normalized.assign(s.size(), 0.0);
    if (!(hi > lo)) {
        r.constant_warning = true;
        return r;
    }
    for (std::size_t i = 0; i < s.size(); ++i) r.normalized[i] = (s.values[i] - lo) / (hi - lo);
    return r;
}

/// Writes `<base>.pgm` (16-bit, maxval 65535) and/or `<base>.csv`.
inline ExportResult export_scoremap(const ScalarMap& s, const std::filesystem::path& base, bool pgm = true,
                                    bool csv = true) {
    auto r = normalize_for_export(s);
    if (pgm) {
        hsi::PgmImage img{s.height, s.width, 65535, std::vector<std::uint16_t>(s.size())};
        for (std::size_t i = 0; i < s.size(); ++i)
            img.samples[i] = static_cast<std::uint16_t>(std::lround(r.normalized[i] * 65535.0));
        auto path = base;
        hsi::write_pgm(path.replace_extension(".pgm"), img);
    }
    if (csv) {
        std::ostringstream os;
        os.precision(17);
        for (std::size_t i = 0; i < s.height; ++i) {
            for (std::size_t j = 0; j < s.width; ++j) os << (j ? "," : "") << r.normalized[i * s.width + j];
            os << '\n';
        }
        auto path = base;
        hsi::write_text(path.replace_extension(".csv"), os.str());
    }
    return r;
}

/// Raw (unnormalized) scores as a little-endian f64 map plus JSON sidecar, for evaluation.
inline void save_scores_raw(const ScalarMap& s, const std::filesystem::path& payload) {
    hsi::CubeHeader header{s.height, s.width, 1, "f64", hsi::Interleave::kBsq};
    if (payload.has_parent_path()) std::filesystem::create_directories(payload.parent_path());
    std::ofstream os(payload, std::ios::binary);
    if (!os) throw IoError("cannot write " + payload.string());
    for (double v : s.values) hsi::detail::write_le(os, v);
    if (!os) throw IoError("write failed for " + payload.string());
    hsi::write_json(hsi::sidecar_for(payload), header.to_json());
}

/// Reads a score map written by save_scores_raw, a 16-bit/8-bit PGM, or a CSV grid.
inline ScalarMap load_scores(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".pgm") {
        auto img = hsi::read_pgm(path);
        std::vector<double> v(img.samples.begin(), img.samples.end());
        return ScalarMap(img.height, img.width, std::move(v));
    }
    if (ext == ".csv") {
        std::istringstream in(hsi::detail::read_file(path));
        std::vector<double> v;
        std::size_t rows = 0, cols = 0;
        for (std::string line; std::getline(in, line);) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::size_t c = 0;
            for (std::string cell; std::getline(ls, cell, ','); ++c) {
                try {
                    v.push_back(std::stod(cell));
                } catch (const std::exception&) {
                    throw ValidationError(path.string() + ": bad number '" + cell + "'");
                }
            }
            if (rows == 0) cols = c;
            if (c != cols) throw ValidationError(path.string() + ": ragged CSV row " + std::to_string(rows + 1));
            ++rows;
        }
        return ScalarMap(rows, cols, std::move(v));
    }
    const auto header = hsi::read_header(hsi::sidecar_for(path));
    if (header.bands != 1) throw ValidationError(path.string() + ": score map must have one band");
    const std::string bytes = hsi::detail::read_file(path);
    const std::size_t n = header.height * header.width, es = header.element_size();
    if (bytes.size() != n * es) throw ValidationError(path.string() + ": payload length does not match header");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = es == 4 ? static_cast<double>(hsi::detail::read_le<float>(bytes.data() + i * 4))
                       : hsi::detail::read_le<double>(bytes.data() + i * 8);
    for (double x : v)
        if (!std::isfinite(x)) throw ValidationError(path.string() + ": NaN/Inf in score map");
    return ScalarMap(header.height, header.width, std::move(v));
}

struct DetectionManifest {
    std::string cube;
    Mode mode = Mode::kE;
    std::string provenance;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::size_t height = 0, width = 0, bands = 0;
    double seconds = 0.0;
    bool bypass_mask = false;
    bool used_teacher = false;
    bool constant_warning = false;

    double throughput_mpx_s() const {
        return seconds > 0.0 ? static_cast<double>(height * width) / 1e6 / seconds : 0.0;
    }

    json to_json() const {
        return {{"cube", cube},
                {"mode", to_string(mode)},
                {"provenance", provenance},
                {"config_hash", config_hash},
                {"seed", seed},
                {"height", height},
                {"width", width},
                {"bands", bands},
                {"seconds", seconds},
                {"throughput_mpx_s", throughput_mpx_s()},
                {"bypass_mask", bypass_mask},
                {"used_teacher", used_teacher},
                {"constant_warning", constant_warning}};
    }
};

}  // namespace stad::detect
