#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stad/error.hpp"
#include "stad/hypercube.hpp"
#include "stad/networks.hpp"
#include "stad/tensor.hpp"

namespace stad::train {

using ad::Tensor;
using json = nlohmann::json;
using nn::ModelParams;

struct TrainConfig {
    double lr = 1e-4;
    std::size_t teacher_epochs = 50;
    std::size_t student_epochs = 250;
    std::size_t batch_size = 16;
    double ema_decay = 0.9;
    std::size_t patch = 9;
    std::uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    /// Save a training-state checkpoint every this many epochs (0 = only at the end).
    std::size_t checkpoint_every = 0;

    void validate() const {
        if (!(lr > 0.0) || !(adam_eps > 0.0)) throw ValidationError("train: lr and adam epsilon must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
            throw ValidationError("train: adam betas must lie in (0,1)");
        if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ValidationError("train: ema decay must lie in (0,1)");
        if (batch_size == 0 || patch == 0) throw ValidationError("train: batch size and patch must be positive");
    }

    json to_json() const {
        return {{"lr", lr},           {"teacher_epochs", teacher_epochs}, {"student_epochs", student_epochs},
                {"batch_size", batch_size}, {"ema_decay", ema_decay}, {"patch", patch},
                {"seed", seed},       {"beta1", beta1},       {"beta2", beta2},
                {"adam_eps", adam_eps}, {"checkpoint_every", checkpoint_every}};
    }

    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.lr = j.value("lr", c.lr);
        c.teacher_epochs = j.value("teacher_epochs", c.teacher_epochs);
        c.student_epochs = j.value("student_epochs", c.student_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.ema_decay = j.value("ema_decay", c.ema_decay);
        c.patch = j.value("patch", c.patch);
        c.seed = j.value("seed", c.seed);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Losses

/// Sum over the three blocks of the Frobenius norm of (reconstruction - target).
inline Tensor teacher_loss(const nn::Outputs& recon, const Tensor& target) {
    Tensor total;
    for (const auto& r : recon) {
        ad::detail::require_same_shape(r, target, "teacher_loss");
        Tensor term = ad::frobenius_norm(ad::sub(r, target));
        total = total.defined() ? ad::add(total, term) : term;
    }
    return total;
}

/// Student outputs [B x M x N] against teacher outputs [L x B]. Teacher
/// values are copied into constants, so no gradient can reach the teacher.
inline Tensor distill_loss(const nn::Outputs& student, const nn::Outputs& teacher) {
    Tensor total;
    for (std::size_t k = 0; k < 3; ++k) {
        Tensor s = student[k].rank() == 3 ? nn::channels_to_tokens(student[k]) : student[k];
        Tensor t = ad::constant(teacher[k].shape(), {teacher[k].values().begin(), teacher[k].values().end()});
        ad::detail::require_same_shape(s, t, "distill_loss");
        Tensor term = ad::frobenius_norm(ad::sub(s, t));
        total = total.defined() ? ad::add(total, term) : term;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Optimizer and EMA

struct AdamState {
    ModelParams m, v;
    std::uint64_t t = 0;

    static AdamState for_params(const ModelParams& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
};

/// Bias-corrected Adam. Throws before touching anything if a gradient is non-finite.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const TrainConfig& cfg) {
    if (!params.same_layout(grads) || !params.same_layout(state.m) || !params.same_layout(state.v))
        throw DimensionError("adam_step: parameter, gradient and moment layouts differ");
    for (const auto& e : grads.entries())
        for (std::size_t i = 0; i < e.values.size(); ++i)
            if (!std::isfinite(e.values[i]))
                throw NumericalError("adam_step: non-finite gradient in '" + e.name + "' at index " +
                                     std::to_string(i) + " (step " + std::to_string(state.t + 1) + ")");
    state.t += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.entries().size(); ++k) {
        auto& p = params.entries()[k].values;
        auto& m = state.m.entries()[k].values;
        auto& v = state.v.entries()[k].values;
        const auto& g = grads.entries()[k].values;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
        }
    }
}

/// shadow <- d * shadow + (1 - d) * params
inline void ema_update(ModelParams& shadow, const ModelParams& params, double d = 0.9) {
    if (!shadow.same_layout(params)) throw DimensionError("ema_update: layouts differ");
    for (std::size_t k = 0; k < params.entries().size(); ++k) {
        auto& s = shadow.entries()[k].values;
        const auto& p = params.entries()[k].values;
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = d * s[i] + (1.0 - d) * p[i];
    }
}

// ---------------------------------------------------------------------------
// Logs

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double seconds = 0.0;
    double param_norm = 0.0;
    std::vector<std::size_t> order;  // cube visiting order after the reshuffle
};

struct TrainLog {
    std::vector<EpochRecord> epochs;

    void write_csv(const std::filesystem::path& path) const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,loss,seconds,param_norm,order\n";
        for (const auto& e : epochs) {
            os << e.epoch << ',' << e.loss << ',' << e.seconds << ',' << e.param_norm << ',';
            for (std::size_t i = 0; i < e.order.size(); ++i) os << (i ? ";" : "") << e.order[i];
            os << '\n';
        }
        hsi::write_text(path, os.str());
    }
};

// ---------------------------------------------------------------------------
// Patch sampling

/// Cube data scaled to [0,1] per cube; the form both networks consume.
inline std::vector<hsi::HyperCube> normalize_all(const std::vector<hsi::HyperCube>& cubes) {
    std::vector<hsi::HyperCube> out;
    out.reserve(cubes.size());
    for (const auto& c : cubes) out.push_back(hsi::normalize(c, hsi::NormalizationMode::kUnit).first);
    return out;
}

/// Row-major patch tokens [patch^2 x B] with top-left (i0, j0).
inline std::vector<double> extract_patch(const hsi::HyperCube& cube, std::size_t i0, std::size_t j0,
                                         std::size_t patch) {
    std::vector<double> out;
    out.reserve(patch * patch * cube.bands());
    for (std::size_t i = i0; i < i0 + patch; ++i)
        for (std::size_t j = j0; j < j0 + patch; ++j) {
            auto s = cube.spectrum(i * cube.width() + j);
            out.insert(out.end(), s.begin(), s.end());
        }
    return out;
}

/// One random patch per cube in `batch`, concatenated as [n*patch^2 x B].
inline std::vector<double> sample_patches(const std::vector<hsi::HyperCube>& cubes,
                                          const std::vector<std::size_t>& batch, std::size_t patch,
                                          std::mt19937_64& rng) {
    std::vector<double> tokens;
    for (std::size_t idx : batch) {
        const auto& c = cubes[idx];
        const std::size_t i0 = std::uniform_int_distribution<std::size_t>(0, c.height() - patch)(rng);
        const std::size_t j0 = std::uniform_int_distribution<std::size_t>(0, c.width() - patch)(rng);
        auto p = extract_patch(c, i0, j0, patch);
        tokens.insert(tokens.end(), p.begin(), p.end());
    }
    return tokens;
}

// ---------------------------------------------------------------------------
// Training loops

struct StepInfo {
    std::size_t epoch = 0, step = 0;
    double loss = 0.0;
    const ModelParams* params = nullptr;
    const ModelParams* ema = nullptr;
};

struct TrainOptions {
    /// Where training-state checkpoints go; empty disables saving.
    std::filesystem::path checkpoint;
    /// Continue from a training-state checkpoint written by an earlier run.
    std::optional<nn::Checkpoint> resume;
    /// Copied into every checkpoint's meta block (config hash etc.).
    json meta = json::object();
    std::function<void(const StepInfo&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    nn::Checkpoint checkpoint;
    TrainLog log;
};

namespace detail {

inline std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void restore_rng(std::mt19937_64& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw ValidationError("checkpoint holds an unreadable RNG state");
}

inline void check_trainset(const std::vector<hsi::HyperCube>& cubes, const TrainConfig& cfg, std::size_t bands) {
    cfg.validate();
    if (cubes.empty()) throw ValidationError("train: empty training set");
    if (cfg.batch_size > cubes.size())
        throw ValidationError("train: batch size " + std::to_string(cfg.batch_size) + " exceeds training-set size " +
                              std::to_string(cubes.size()));
    for (const auto& c : cubes) {
        if (c.bands() != bands)
            throw ValidationError("train: cube '" + c.name() + "' has " + std::to_string(c.bands()) +
                                  " bands, model expects " + std::to_string(bands));
        if (c.height() < cfg.patch || c.width() < cfg.patch)
            throw ValidationError("train: cube '" + c.name() + "' is smaller than the training patch");
    }
}

/// Shared epoch/batch/optimizer scaffolding. `step_loss` builds the loss for
/// one batch on `tape` given bound parameters and the sampled tokens.
template <class StepLoss>
TrainResult run_loop(const std::vector<hsi::HyperCube>& raw, const TrainConfig& cfg, const nn::ModelSpec& spec,
                     std::size_t epochs, const TrainOptions& opt, const std::string& stage, StepLoss step_loss) {
    detail::check_trainset(raw, cfg, spec.bands);
    const auto cubes = normalize_all(raw);

    nn::Checkpoint ck;
    AdamState adam;
    std::mt19937_64 rng(cfg.seed);
    std::size_t start_epoch = 0;
    if (opt.resume) {
        const auto& r = *opt.resume;
        if (!(r.params.spec() == spec)) throw ValidationError(stage + ": resume checkpoint has a different model spec");
        if (!r.ema || !r.adam_m || !r.adam_v || !r.meta.contains("rng"))
            throw ValidationError(stage + ": resume checkpoint lacks training state");
        if (r.meta.value("stage", "") != stage)
            throw ValidationError(stage + ": resume checkpoint was written by '" + r.meta.value("stage", "?") + "'");
        ck = r;
        adam = {*r.adam_m, *r.adam_v, r.adam_step};
        restore_rng(rng, r.meta.at("rng").get<std::string>());
        start_epoch = r.meta.at("epoch").get<std::size_t>();
    } else {
        ck.params = nn::init_params(cfg.seed, spec);
        ck.ema = ck.params;
        adam = AdamState::for_params(ck.params);
    }
    ck.seed = cfg.seed;

    auto save = [&](std::size_t epochs_done) {
        ck.adam_m = adam.m;
        ck.adam_v = adam.v;
        ck.adam_step = adam.t;
        ck.meta = opt.meta;
        ck.meta["stage"] = stage;
        ck.meta["epoch"] = epochs_done;
        ck.meta["rng"] = rng_state(rng);
        ck.meta["train"] = cfg.to_json();
        if (!opt.checkpoint.empty()) nn::save_checkpoint(ck, opt.checkpoint);
    };

    TrainLog log;
    std::vector<std::size_t> order(cubes.size());
    for (std::size_t epoch = start_epoch; epoch < epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size, ++steps) {
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                                 order.begin() + static_cast<std::ptrdiff_t>(
                                                                     std::min(b0 + cfg.batch_size, order.size())));
            const auto tokens = sample_patches(cubes, batch, cfg.patch, rng);
            ad::Tape tape;
            nn::Bound bound(ck.params, &tape);
            Tensor loss = step_loss(bound, tokens, batch.size());
            const double value = loss.item();
            if (!std::isfinite(value)) {
                std::string where = opt.checkpoint.empty() ? "no checkpoint was configured"
                                                           : "last good checkpoint: " + opt.checkpoint.string();
                throw NumericalError(stage + ": non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                     std::to_string(steps + 1) + " (" + where + ")");
            }
            tape.backward(loss);
            adam_step(ck.params, bound.gradients(ck.params), adam, cfg);
            ema_update(*ck.ema, ck.params, cfg.ema_decay);
            loss_sum += value;
            if (opt.on_step) opt.on_step({epoch, steps, value, &ck.params, &*ck.ema});
        }
        EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(steps),
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                        ck.params.l2_norm(), order};
        if (opt.on_epoch) opt.on_epoch(rec);
        log.epochs.push_back(std::move(rec));
        const bool last = epoch + 1 == epochs;
        if (last || (cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0)) save(epoch + 1);
    }
    if (start_epoch >= epochs) save(start_epoch);
    return {std::move(ck), std::move(log)};
}

}  // namespace detail

/// Self-supervised teacher training on anomaly-free cubes.
inline TrainResult train_teacher(const TrainConfig& cfg, const std::vector<hsi::HyperCube>& trainset,
                                 const nn::ModelSpec& spec, const TrainOptions& opt = {}) {
    if (spec.kind != nn::ModelKind::kTeacher) throw ValidationError("train_teacher: spec is not a teacher");
    const std::size_t tokens_per_patch = cfg.patch * cfg.patch;
    return detail::run_loop(
        trainset, cfg, spec, cfg.teacher_epochs, opt, "teacher",
        [&](const nn::Bound& p, const std::vector<double>& tokens, std::size_t n) {
            Tensor x = ad::constant({n * tokens_per_patch, spec.bands}, tokens);
            auto out = nn::teacher_forward(p, x, ad::TokenGroups::uniform(n, tokens_per_patch));
            Tensor total;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t r0 = i * tokens_per_patch;
                nn::Outputs item{ad::slice_rows(out[0], r0, tokens_per_patch),
                                 ad::slice_rows(out[1], r0, tokens_per_patch),
                                 ad::slice_rows(out[2], r0, tokens_per_patch)};
                Tensor l = teacher_loss(item, ad::slice_rows(x, r0, tokens_per_patch));
                total = total.defined() ? ad::add(total, l) : l;
            }
            return total;
        });
}

/// Distils the teacher's inference weights into a student.
inline TrainResult train_student(const TrainConfig& cfg, const std::vector<hsi::HyperCube>& trainset,
                                 const ModelParams& teacher, const nn::ModelSpec& spec,
                                 const TrainOptions& opt = {}) {
    if (spec.kind != nn::ModelKind::kStudent) throw ValidationError("train_student: spec is not a student");
    if (teacher.spec().kind != nn::ModelKind::kTeacher) throw ValidationError("train_student: teacher is not a teacher");
    if (teacher.spec().bands != spec.bands)
        throw ValidationError("train_student: teacher has " + std::to_string(teacher.spec().bands) +
                              " bands, student " + std::to_string(spec.bands));
    const nn::Bound frozen(teacher, nullptr);
    const std::size_t tokens_per_patch = cfg.patch * cfg.patch;
    return detail::run_loop(
        trainset, cfg, spec, cfg.student_epochs, opt, "student",
        [&](const nn::Bound& p, const std::vector<double>& tokens, std::size_t n) {
            Tensor x = ad::constant({n * tokens_per_patch, spec.bands}, tokens);
            auto target = nn::teacher_forward(frozen, x, ad::TokenGroups::uniform(n, tokens_per_patch));
            Tensor total;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t r0 = i * tokens_per_patch;
                Tensor img = nn::tokens_to_channels(ad::slice_rows(x, r0, tokens_per_patch), cfg.patch, cfg.patch);
                auto s = nn::student_forward(p, img);
                nn::Outputs t{ad::slice_rows(target[0], r0, tokens_per_patch),
                              ad::slice_rows(target[1], r0, tokens_per_patch),
                              ad::slice_rows(target[2], r0, tokens_per_patch)};
                Tensor l = distill_loss(s, t);
                total = total.defined() ? ad::add(total, l) : l;
            }
            return total;
        });
}

// ---------------------------------------------------------------------------
// Held-out evaluation (no tape)

/// Teacher loss on fixed patches [n*patch^2 x B] of already-normalized data.
inline double teacher_patch_loss(const ModelParams& teacher, const std::vector<double>& tokens, std::size_t n,
                                 std::size_t patch) {
    const std::size_t t = patch * patch, b = teacher.spec().bands;
    nn::Bound p(teacher, nullptr);
    Tensor x = ad::constant({n * t, b}, tokens);
    auto out = nn::teacher_forward(p, x, ad::TokenGroups::uniform(n, t));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        total += teacher_loss({ad::slice_rows(out[0], i * t, t), ad::slice_rows(out[1], i * t, t),
                               ad::slice_rows(out[2], i * t, t)},
                              ad::slice_rows(x, i * t, t))
                     .item();
    return total;
}

inline double distill_patch_loss(const ModelParams& student, const ModelParams& teacher,
                                 const std::vector<double>& tokens, std::size_t n, std::size_t patch) {
    const std::size_t t = patch * patch, b = teacher.spec().bands;
    nn::Bound ps(student, nullptr), pt(teacher, nullptr);
    Tensor x = ad::constant({n * t, b}, tokens);
    auto target = nn::teacher_forward(pt, x, ad::TokenGroups::uniform(n, t));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        auto s = nn::student_forward(ps, nn::tokens_to_channels(ad::slice_rows(x, i * t, t), patch, patch));
        total += distill_loss(s, {ad::slice_rows(target[0], i * t, t), ad::slice_rows(target[1], i * t, t),
                                  ad::slice_rows(target[2], i * t, t)})
                     .item();
    }
    return total;
}

}  // namespace stad::train
