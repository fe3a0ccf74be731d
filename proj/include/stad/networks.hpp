#pragma once

// Teacher (per-pixel-token Transformer) and student (conv/deconv + pixelwise
// FC) reconstruction networks, their parameter sets and checkpoints.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stad/error.hpp"
#include "stad/hypercube.hpp"
#include "stad/tensor.hpp"

namespace stad::nn {

using ad::Shape;
using ad::Tensor;
using json = nlohmann::json;

enum class ModelKind { kTeacher, kStudent };

inline std::string to_string(ModelKind k) { return k == ModelKind::kTeacher ? "teacher" : "student"; }

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "teacher") return ModelKind::kTeacher;
    if (s == "student") return ModelKind::kStudent;
    throw ValidationError("unknown model kind '" + s + "'");
}

/// Architecture hyperparameters. `heads` and `blocks` only apply to the teacher.
struct ModelSpec {
    ModelKind kind = ModelKind::kTeacher;
    std::size_t bands = 0;
    std::size_t hidden = 1000;
    std::size_t heads = 2;
    std::size_t blocks = 3;

    static ModelSpec teacher(std::size_t bands, std::size_t hidden = 1000, std::size_t heads = 2) {
        return {ModelKind::kTeacher, bands, hidden, heads, 3};
    }
    static ModelSpec student(std::size_t bands, std::size_t hidden = 100) {
        return {ModelKind::kStudent, bands, hidden, 0, 3};
    }

    void validate() const {
        if (bands < 2) throw ValidationError("model: bands must be >= 2");
        if (hidden < 1) throw ValidationError("model: hidden width must be >= 1");
        if (kind == ModelKind::kTeacher && (heads == 0 || hidden % heads != 0))
            throw ValidationError("teacher: hidden width " + std::to_string(hidden) + " not divisible by " +
                                  std::to_string(heads) + " heads");
        if (blocks != 3) throw ValidationError("model: exactly 3 blocks are supported");
    }

    json to_json() const {
        json j{{"kind", to_string(kind)}, {"bands", bands}, {"hidden", hidden}, {"blocks", blocks}};
        if (kind == ModelKind::kTeacher) j["heads"] = heads;
        return j;
    }
    static ModelSpec from_json(const json& j) {
        ModelSpec s;
        s.kind = parse_model_kind(j.at("kind").get<std::string>());
        s.bands = j.at("bands").get<std::size_t>();
        s.hidden = j.at("hidden").get<std::size_t>();
        s.blocks = j.value("blocks", std::size_t{3});
        s.heads = s.kind == ModelKind::kTeacher ? j.at("heads").get<std::size_t>() : 0;
        s.validate();
        return s;
    }
    bool operator==(const ModelSpec&) const = default;
};

enum class ParamRole { kWeight, kBias, kGain };

struct ParamEntry {
    std::string name;
    Shape shape;
    ParamRole role = ParamRole::kWeight;
    std::size_t fan_in = 0, fan_out = 0;
    std::vector<double> values;

    double glorot_limit() const { return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)); }
};

/// Named, ordered parameter set.
class ModelParams {
  public:
    ModelParams() = default;
    explicit ModelParams(ModelSpec spec) : spec_(spec) {}

    const ModelSpec& spec() const { return spec_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::vector<ParamEntry>& entries() { return entries_; }

    void add(std::string name, Shape shape, ParamRole role, std::size_t fan_in = 0, std::size_t fan_out = 0) {
        if (index_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
        index_[name] = entries_.size();
        const auto n = ad::numel(shape);
        entries_.push_back({std::move(name), std::move(shape), role, fan_in, fan_out, std::vector<double>(n, 0.0)});
    }

    const ParamEntry& at(const std::string& name) const { return entries_.at(lookup(name)); }
    ParamEntry& at(const std::string& name) { return entries_.at(lookup(name)); }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.values.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& e : entries_)
            for (double v : e.values)
                if (!std::isfinite(v)) return false;
        return true;
    }

    double l2_norm() const {
        double s = 0.0;
        for (const auto& e : entries_)
            for (double v : e.values) s += v * v;
        return std::sqrt(s);
    }

    /// Same names and shapes as `other`.
    bool same_layout(const ModelParams& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name != other.entries_[i].name || entries_[i].shape != other.entries_[i].shape)
                return false;
        return true;
    }

    /// Copy with every value set to zero (optimizer moment buffers).
    ModelParams zeros_like() const {
        ModelParams z = *this;
        for (auto& e : z.entries_) std::fill(e.values.begin(), e.values.end(), 0.0);
        return z;
    }

  private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("no parameter named '" + name + "'");
        return it->second;
    }

    ModelSpec spec_;
    std::vector<ParamEntry> entries_;
    std::map<std::string, std::size_t> index_;
};

namespace detail {

inline void add_linear(ModelParams& p, const std::string& name, std::size_t in, std::size_t out) {
    p.add(name + ".w", {in, out}, ParamRole::kWeight, in, out);
    p.add(name + ".b", {out}, ParamRole::kBias);
}

inline void add_kernel(ModelParams& p, const std::string& name, std::size_t f, std::size_t c, std::size_t bias,
                       bool transposed) {
    // kernel [F x C x 3 x 3]; conv maps C -> F, deconv maps F -> C
    const std::size_t in = (transposed ? f : c) * 9, out = (transposed ? c : f) * 9;
    p.add(name + ".k", {f, c, 3, 3}, ParamRole::kWeight, in, out);
    p.add(name + ".b", {bias}, ParamRole::kBias);
}

}  // namespace detail

/// Layout with every value zero. Gains are set to 1 by init_params.
inline ModelParams make_layout(const ModelSpec& spec) {
    spec.validate();
    ModelParams p(spec);
    const std::size_t b = spec.bands, h = spec.hidden;
    if (spec.kind == ModelKind::kTeacher) {
        detail::add_linear(p, "proj", b, h);
        for (std::size_t k = 1; k <= spec.blocks; ++k) {
            const std::string blk = "block" + std::to_string(k);
            p.add(blk + ".ln1.g", {h}, ParamRole::kGain);
            p.add(blk + ".ln1.b", {h}, ParamRole::kBias);
            for (const char* m : {".q", ".k", ".v", ".o"}) detail::add_linear(p, blk + ".attn" + m, h, h);
            p.add(blk + ".ln2.g", {h}, ParamRole::kGain);
            p.add(blk + ".ln2.b", {h}, ParamRole::kBias);
            detail::add_linear(p, blk + ".ff1", h, h);
            detail::add_linear(p, blk + ".ff2", h, h);
        }
        for (std::size_t k = 1; k <= spec.blocks; ++k) detail::add_linear(p, "head" + std::to_string(k), h, b);
    } else {
        detail::add_kernel(p, "conv1", h, b, h, false);
        detail::add_kernel(p, "deconv1", h, b, b, true);
        detail::add_kernel(p, "conv2", h, h, h, false);
        detail::add_kernel(p, "deconv2", h, b, b, true);
        detail::add_linear(p, "fc1", h, h);
        detail::add_linear(p, "fc2", h, b);
    }
    return p;
}

/// Glorot-uniform weights, zero biases, unit gains; deterministic per seed.
inline ModelParams init_params(std::uint64_t seed, const ModelSpec& spec) {
    ModelParams p = make_layout(spec);
    std::mt19937_64 rng(seed);
    for (auto& e : p.entries()) {
        switch (e.role) {
            case ParamRole::kWeight: {
                std::uniform_real_distribution<double> u(-e.glorot_limit(), e.glorot_limit());
                for (double& v : e.values) v = u(rng);
                break;
            }
            case ParamRole::kBias: std::fill(e.values.begin(), e.values.end(), 0.0); break;
            case ParamRole::kGain: std::fill(e.values.begin(), e.values.end(), 1.0); break;
        }
    }
    return p;
}

/// Parameters materialized as graph tensors. With a tape they are
/// requires-grad leaves; without one they are constants.
class Bound {
  public:
    Bound(const ModelParams& params, ad::Tape* tape) : spec_(params.spec()) {
        for (const auto& e : params.entries()) {
            names_.push_back(e.name);
            tensors_.push_back(tape ? tape->leaf(e.shape, e.values, true) : ad::constant(e.shape, e.values));
            index_[e.name] = tensors_.size() - 1;
        }
    }

    const ModelSpec& spec() const { return spec_; }
    const Tensor& operator[](const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("no parameter named '" + name + "'");
        return tensors_[it->second];
    }

    /// Gradient buffers in parameter order, after Tape::backward.
    ModelParams gradients(const ModelParams& like) const {
        ModelParams g = like;
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            auto grad = tensors_[i].grad();
            auto& dst = g.entries()[i].values;
            if (grad.empty())
                std::fill(dst.begin(), dst.end(), 0.0);
            else
                std::copy(grad.begin(), grad.end(), dst.begin());
        }
        return g;
    }

  private:
    ModelSpec spec_;
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

using Outputs = std::array<Tensor, 3>;

// ---------------------------------------------------------------------------
// Teacher

/// Attention probabilities of every block, for inspection.
struct TeacherTrace {
    std::vector<ad::AttentionWeights> attention;
};

/// X[T x B] -> three [T x B] reconstructions. Tokens attend only within their group.
inline Outputs teacher_forward(const Bound& p, const Tensor& x, const ad::TokenGroups& groups,
                               TeacherTrace* trace = nullptr) {
    const ModelSpec& s = p.spec();
    if (s.kind != ModelKind::kTeacher) throw ValidationError("teacher_forward: parameters are not a teacher");
    ad::detail::require_rank(x, 2, "teacher_forward");
    if (x.dim(1) != s.bands)
        throw DimensionError("teacher_forward: input has " + std::to_string(x.dim(1)) + " bands, teacher expects " +
                             std::to_string(s.bands));
    if (trace) trace->attention.clear();

    Outputs out;
    Tensor h = ad::linear(x, p["proj.w"], p["proj.b"]);
    for (std::size_t k = 1; k <= s.blocks; ++k) {
        const std::string blk = "block" + std::to_string(k);
        Tensor n1 = ad::layernorm(h, p[blk + ".ln1.g"], p[blk + ".ln1.b"]);
        Tensor q = ad::linear(n1, p[blk + ".attn.q.w"], p[blk + ".attn.q.b"]);
        Tensor kk = ad::linear(n1, p[blk + ".attn.k.w"], p[blk + ".attn.k.b"]);
        Tensor v = ad::linear(n1, p[blk + ".attn.v.w"], p[blk + ".attn.v.b"]);
        ad::AttentionWeights weights;
        Tensor a = ad::grouped_attention(q, kk, v, groups, s.heads, trace ? &weights : nullptr);
        if (trace) trace->attention.push_back(std::move(weights));
        h = ad::add(h, ad::linear(a, p[blk + ".attn.o.w"], p[blk + ".attn.o.b"]));

        Tensor n2 = ad::layernorm(h, p[blk + ".ln2.g"], p[blk + ".ln2.b"]);
        Tensor f = ad::relu(ad::linear(n2, p[blk + ".ff1.w"], p[blk + ".ff1.b"]));
        h = ad::add(h, ad::linear(f, p[blk + ".ff2.w"], p[blk + ".ff2.b"]));

        const std::string head = "head" + std::to_string(k);
        out[k - 1] = ad::linear(h, p[head + ".w"], p[head + ".b"]);
    }
    return out;
}

/// Row order that groups pixels of an M x N image into tiles of at most
/// tile x tile, tile-major and row-major inside each tile.
struct Tiling {
    std::vector<std::size_t> order;  // order[t] = pixel index of token t
    std::vector<std::size_t> inverse;
    ad::TokenGroups groups;
};

inline Tiling make_tiling(std::size_t height, std::size_t width, std::size_t tile = 32) {
    if (tile == 0) throw ValidationError("tiling: tile size must be positive");
    Tiling t;
    for (std::size_t ti = 0; ti < height; ti += tile)
        for (std::size_t tj = 0; tj < width; tj += tile) {
            const std::size_t hi = std::min(ti + tile, height), hj = std::min(tj + tile, width);
            for (std::size_t i = ti; i < hi; ++i)
                for (std::size_t j = tj; j < hj; ++j) t.order.push_back(i * width + j);
            t.groups.sizes.push_back((hi - ti) * (hj - tj));
        }
    t.inverse.resize(t.order.size());
    for (std::size_t k = 0; k < t.order.size(); ++k) t.inverse[t.order[k]] = k;
    return t;
}

/// Teacher on a whole image given as X[L x B] in pixel order; outputs in pixel order.
inline Outputs teacher_forward_image(const Bound& p, const Tensor& x, std::size_t height, std::size_t width,
                                     std::size_t tile = 32) {
    if (x.dim(0) != height * width) throw DimensionError("teacher_forward_image: token count does not match image");
    Tiling t = make_tiling(height, width, tile);
    Outputs tiled = teacher_forward(p, ad::permute_rows(x, t.order), t.groups);
    Outputs out;
    for (std::size_t k = 0; k < 3; ++k) out[k] = ad::permute_rows(tiled[k], t.inverse);
    return out;
}

// ---------------------------------------------------------------------------
// Student

/// X[B x M x N] -> three [B x M x N] reconstructions.
inline Outputs student_forward(const Bound& p, const Tensor& x) {
    const ModelSpec& s = p.spec();
    if (s.kind != ModelKind::kStudent) throw ValidationError("student_forward: parameters are not a student");
    ad::detail::require_rank(x, 3, "student_forward");
    if (x.dim(0) != s.bands)
        throw DimensionError("student_forward: input has " + std::to_string(x.dim(0)) + " bands, student expects " +
                             std::to_string(s.bands));
    if (x.dim(1) < 3 || x.dim(2) < 3)
        throw DimensionError("student_forward: spatial size " + ad::to_string(x.shape()) +
                             " is smaller than the 3x3 kernel");
    const std::size_t m = x.dim(1), n = x.dim(2), b = s.bands, h = s.hidden;

    Outputs out;
    Tensor f1 = ad::relu(ad::add_channel_bias(ad::conv2d(x, p["conv1.k"]), p["conv1.b"]));
    out[0] = ad::add_channel_bias(ad::deconv2d(f1, p["deconv1.k"]), p["deconv1.b"]);
    Tensor f2 = ad::relu(ad::add_channel_bias(ad::conv2d(f1, p["conv2.k"]), p["conv2.b"]));
    out[1] = ad::add_channel_bias(ad::deconv2d(f2, p["deconv2.k"]), p["deconv2.b"]);

    Tensor pix = ad::transpose(ad::reshape(f2, {h, m * n}));  // [L x h]
    Tensor f3 = ad::relu(ad::linear(pix, p["fc1.w"], p["fc1.b"]));
    Tensor r3 = ad::linear(f3, p["fc2.w"], p["fc2.b"]);  // [L x B]
    out[2] = ad::reshape(ad::transpose(r3), {b, m, n});
    return out;
}

/// [B x M x N] -> [L x B] (pixel-major token rows).
inline Tensor channels_to_tokens(const Tensor& x) {
    ad::detail::require_rank(x, 3, "channels_to_tokens");
    return ad::transpose(ad::reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

/// [L x B] -> [B x M x N].
inline Tensor tokens_to_channels(const Tensor& x, std::size_t height, std::size_t width) {
    ad::detail::require_rank(x, 2, "tokens_to_channels");
    if (x.dim(0) != height * width) throw DimensionError("tokens_to_channels: token count does not match image");
    return ad::reshape(ad::transpose(x), {x.dim(1), height, width});
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + raw little-endian float64 payload.

/// A parameter set with optional EMA shadow and Adam moments.
struct Checkpoint {
    ModelParams params;
    std::optional<ModelParams> ema;
    std::optional<ModelParams> adam_m, adam_v;
    std::uint64_t adam_step = 0;
    std::uint64_t seed = 0;
    json meta = json::object();

    /// The inference model: EMA shadow when present.
    const ModelParams& inference() const { return ema ? *ema : params; }
};

namespace detail {

inline void write_f64(std::ofstream& os, const std::vector<double>& v) {
    if constexpr (std::endian::native == std::endian::little)
        os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    else
        for (double x : v) hsi::detail::write_le(os, x);
}

}  // namespace detail

inline std::filesystem::path payload_for(const std::filesystem::path& manifest) {
    auto p = manifest;
    p.replace_extension(".f64");
    return p;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& manifest) {
    const auto payload = payload_for(manifest);
    json tensors = json::array();
    std::size_t offset = 0;
    for (const auto& e : ck.params.entries()) {
        tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
        offset += e.values.size();
    }
    std::vector<std::pair<std::string, const ModelParams*>> sections{{"params", &ck.params}};
    if (ck.ema) sections.emplace_back("ema", &*ck.ema);
    if (ck.adam_m && ck.adam_v) {
        sections.emplace_back("adam_m", &*ck.adam_m);
        sections.emplace_back("adam_v", &*ck.adam_v);
    }
    json names = json::array();
    for (const auto& [name, set] : sections) {
        if (!set->same_layout(ck.params)) throw ValidationError("checkpoint: section '" + name + "' layout differs");
        names.push_back(name);
    }
    json m{{"format", "stad-checkpoint"},
           {"version", 1},
           {"model", ck.params.spec().to_json()},
           {"seed", ck.seed},
           {"adam_step", ck.adam_step},
           {"payload", payload.filename().string()},
           {"dtype", "f64"},
           {"section_size", offset},
           {"sections", names},
           {"tensors", tensors},
           {"meta", ck.meta}};

    std::ofstream out(payload, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint payload " + payload.string());
    for (const auto& [name, set] : sections)
        for (const auto& e : set->entries()) detail::write_f64(out, e.values);
    if (!out) throw IoError("write failed for " + payload.string());
    out.close();
    hsi::write_json(manifest, m);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
    const json m = hsi::read_json(manifest);
    if (m.value("format", "") != "stad-checkpoint")
        throw ValidationError(manifest.string() + " is not a checkpoint manifest");
    Checkpoint ck;
    ck.params = make_layout(ModelSpec::from_json(m.at("model")));
    ck.seed = m.value("seed", std::uint64_t{0});
    ck.adam_step = m.value("adam_step", std::uint64_t{0});
    ck.meta = m.value("meta", json::object());

    const auto& tensors = m.at("tensors");
    if (tensors.size() != ck.params.entries().size())
        throw ValidationError("checkpoint " + manifest.string() + ": tensor list does not match the model layout");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& e = ck.params.entries()[i];
        if (tensors[i].at("name") != e.name || tensors[i].at("shape").get<Shape>() != e.shape)
            throw ValidationError("checkpoint: tensor '" + tensors[i].at("name").get<std::string>() +
                                  "' does not match the model layout");
    }
    const auto sections = m.at("sections").get<std::vector<std::string>>();
    const std::size_t section = ck.params.count();
    const auto payload = manifest.parent_path() / m.at("payload").get<std::string>();
    const auto bytes = hsi::detail::read_file(payload);
    if (bytes.size() != sections.size() * section * 8)
        throw IoError("checkpoint payload " + payload.string() + " has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(sections.size() * section * 8));
    std::size_t pos = 0;
    for (const auto& name : sections) {
        ModelParams set = ck.params;
        for (auto& e : set.entries()) {
            for (double& v : e.values) v = hsi::detail::read_le<double>(bytes.data() + 8 * pos++);
        }
        if (name == "params")
            ck.params = std::move(set);
        else if (name == "ema")
            ck.ema = std::move(set);
        else if (name == "adam_m")
            ck.adam_m = std::move(set);
        else if (name == "adam_v")
            ck.adam_v = std::move(set);
        else
            throw ValidationError("checkpoint: unknown section '" + name + "'");
    }
    if (!ck.params.all_finite()) throw NumericalError("checkpoint " + manifest.string() + " holds non-finite values");
    return ck;
}

}  // namespace stad::nn
