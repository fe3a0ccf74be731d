#pragma once
// Stage-level workflow shared by the command-line tool and the acceptance
// harness: merged run configuration, dataset directories, and one function
// per subcommand. Every artifact written here records the config hash and seed.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "stad/detector.hpp"
#include "stad/eval.hpp"
#include "stad/training.hpp"

namespace stad::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// splitmix64 over (seed, stream, index); decorrelates per-cube seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream * 0x10001ULL + index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Run configuration

/// Defaults, then a JSON config file, then command-line flags (highest).
class RunConfig {
  public:
    static json defaults() {
        train::TrainConfig t;
        json train = t.to_json();
        train.erase("seed");
        stf::StfConfig s;
        return {{"seed", 0},
                {"synth",
                 {{"count", 20},
                  {"test_count", 6},
                  {"height", 32},
                  {"width", 32},
                  {"bands", 20},
                  {"targets", 4},
                  {"target_size", 4},
                  {"contrast", 0.6},
                  {"noise", 0.004}}},
                {"train", train},
                {"teacher", {{"hidden", 1000}, {"heads", 2}, {"bands", 0}}},
                {"student", {{"hidden", 100}}},
                {"detect",
                 {{"mode", "E"},
                  {"radius", s.radius},
                  {"sigma_spatial", s.sigma_spatial},
                  {"sigma_range", s.sigma_range},
                  {"ridge", s.ridge},
                  {"bypass", false},
                  {"mask_scale", 1.0},
                  {"tile", 32}}},
                {"eval", {{"thresholds", 30000}, {"beta", 1e-12}}}};
    }

    RunConfig() : data_(defaults()) {}

    static RunConfig merged(const json& file, const json& flags) {
        RunConfig c;
        for (const json* layer : {&file, &flags}) {
            if (layer->is_null()) continue;
            check_against(c.data_, *layer, "");
            c.data_.merge_patch(*layer);
        }
        c.validate();
        return c;
    }

    static RunConfig from_file(const std::optional<fs::path>& file, const json& flags) {
        return merged(file ? hsi::read_json(*file) : json(), flags);
    }

    const json& data() const { return data_; }
    std::string hash() const { return hex64(fnv1a(data_.dump())); }
    std::uint64_t seed() const { return data_.at("seed").get<std::uint64_t>(); }

    train::TrainConfig train() const {
        auto t = train::TrainConfig::from_json(data_.at("train"));
        t.seed = seed();
        return t;
    }

    nn::ModelSpec teacher_spec(std::size_t data_bands) const {
        const auto& t = data_.at("teacher");
        return nn::ModelSpec::teacher(resolve_bands(data_bands), t.at("hidden"), t.at("heads"));
    }

    nn::ModelSpec student_spec(std::size_t bands) const {
        return nn::ModelSpec::student(bands, data_.at("student").at("hidden"));
    }

    /// "A".."E" or "rx" (global Mahalanobis baseline).
    std::string method() const { return data_.at("detect").at("mode"); }

    detect::DetectorConfig detector() const {
        const auto& d = data_.at("detect");
        detect::DetectorConfig c;
        c.stf.radius = d.at("radius");
        c.stf.sigma_spatial = d.at("sigma_spatial");
        c.stf.sigma_range = d.at("sigma_range");
        c.stf.ridge = d.at("ridge");
        c.bypass_mask = d.at("bypass");
        c.mask_scale = d.at("mask_scale");
        c.tile = d.at("tile");
        if (method() != "rx") c.mode = detect::parse_mode(method());
        return c;
    }

    std::size_t thresholds() const { return data_.at("eval").at("thresholds"); }
    double beta() const { return data_.at("eval").at("beta"); }

  private:
    json data_;

    static void check_against(const json& ref, const json& given, const std::string& path) {
        if (!given.is_object()) throw ValidationError("config" + path + ": expected an object");
        for (auto it = given.begin(); it != given.end(); ++it) {
            const std::string key = path + "." + it.key();
            if (!ref.contains(it.key())) throw ValidationError("config: unknown key '" + key.substr(1) + "'");
            const json& r = ref.at(it.key());
            const json& g = it.value();
            if (r.is_object()) {
                check_against(r, g, key);
            } else if (r.is_number() != g.is_number() || r.is_boolean() != g.is_boolean() ||
                       r.is_string() != g.is_string()) {
                throw ValidationError("config: '" + key.substr(1) + "' has the wrong type");
            } else if ((r.is_number_unsigned() || r.is_number_integer()) && !g.is_number_integer()) {
                throw ValidationError("config: '" + key.substr(1) + "' must be an integer");
            } else if (r.is_number_unsigned() && g.get<double>() < 0) {
                throw ValidationError("config: '" + key.substr(1) + "' must be non-negative");
            }
        }
    }

    std::size_t resolve_bands(std::size_t data_bands) const {
        const std::size_t want = data_.at("teacher").at("bands");
        if (want != 0 && want != data_bands)
            throw ValidationError("config declares " + std::to_string(want) + " bands but the data has " +
                                  std::to_string(data_bands));
        return data_bands;
    }

    void validate() const {
        train();
        detector().stf.validate();
        const std::string m = method();
        if (m != "rx") detect::parse_mode(m);
        if (thresholds() < 2) throw ValidationError("config: eval.thresholds must be >= 2");
        if (!(beta() >= 0.0)) throw ValidationError("config: eval.beta must be >= 0");
        if (data_.at("detect").at("tile").get<std::size_t>() == 0) throw ValidationError("config: detect.tile must be > 0");
    }
};

// ---------------------------------------------------------------------------
// Directories and parallelism

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first failure.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex m;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(m);
                    if (!failure) failure = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

namespace detail {

inline std::vector<fs::path> sorted_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

/// Payload files (anything with a cube sidecar) whose band count satisfies `keep`.
inline std::vector<fs::path> payloads(const fs::path& dir, const std::function<bool(std::size_t)>& keep) {
    std::vector<fs::path> out;
    for (const auto& f : sorted_files(dir)) {
        const auto ext = f.extension();
        if (ext == ".json" || ext == ".pgm" || ext == ".csv") continue;
        const auto side = hsi::sidecar_for(f);
        if (!fs::exists(side)) continue;
        const auto j = hsi::read_json(side);
        if (!j.contains("bands")) continue;
        if (keep(j.at("bands").get<std::size_t>())) out.push_back(f);
    }
    return out;
}

inline json stamp(const RunConfig& cfg, const std::string& command) {
    return {{"command", command}, {"config_hash", cfg.hash()}, {"seed", cfg.seed()}};
}

inline double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Cube payloads in `dir`, sorted by file name.
inline std::vector<fs::path> list_cubes(const fs::path& dir) {
    return detail::payloads(dir, [](std::size_t b) { return b >= 2; });
}

/// Label maps in `dir` keyed by stem: binary PGMs and one-band raw payloads.
inline std::map<std::string, fs::path> list_labels(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    for (const auto& f : detail::sorted_files(dir))
        if (f.extension() == ".pgm") out[f.stem().string()] = f;
    for (const auto& f : detail::payloads(dir, [](std::size_t b) { return b == 1; })) out[f.stem().string()] = f;
    return out;
}

/// Score maps in `dir` keyed by stem, preferring raw f64 over CSV over PGM.
inline std::map<std::string, fs::path> list_scores(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    for (const char* ext : {".pgm", ".csv"})
        for (const auto& f : detail::sorted_files(dir))
            if (f.extension() == ext) out[f.stem().string()] = f;
    for (const auto& f : detail::payloads(dir, [](std::size_t b) { return b == 1; })) out[f.stem().string()] = f;
    return out;
}

/// `data/train` when present, else `data` itself.
inline fs::path training_dir(const fs::path& data) {
    return fs::is_directory(data / "train") ? data / "train" : data;
}

inline std::vector<hsi::HyperCube> load_cubes(const fs::path& dir) {
    std::vector<hsi::HyperCube> out;
    for (const auto& p : list_cubes(dir)) out.push_back(hsi::load_cube(p));
    if (out.empty()) throw ValidationError("no cubes found in " + dir.string());
    return out;
}

/// FNV-1a over sorted relative paths and file contents.
inline std::string directory_hash(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    std::uint64_t h = fnv1a("");
    for (const auto& f : files) {
        h = fnv1a(f.generic_string(), h);
        h = fnv1a(hsi::detail::read_file(dir / f), h);
    }
    return hex64(h);
}

// ---------------------------------------------------------------------------
// synth

struct SynthResult {
    std::vector<fs::path> train, test;
};

/// Writes `out/train` (anomaly-free cubes) and `out/test` (cubes with PGM labels).
inline SynthResult cmd_synth(const RunConfig& cfg, const fs::path& out) {
    const auto& s = cfg.data().at("synth");
    const std::size_t count = s.at("count"), test_count = s.at("test_count"), targets = s.at("targets");
    if (test_count > 0 && targets == 0)
        throw ValidationError("synth: test cubes need at least one target (detection rate is undefined without positives)");
    hsi::SceneParams base;
    base.height = s.at("height");
    base.width = s.at("width");
    base.bands = s.at("bands");
    base.target_size_px = s.at("target_size");
    base.contrast = s.at("contrast");
    base.noise_sigma = s.at("noise");

    SynthResult r;
    json manifest = detail::stamp(cfg, "synth");
    manifest["config"] = cfg.data();
    try {
        fs::create_directories(out / "train");
        fs::create_directories(out / "test");
    } catch (const fs::filesystem_error& e) {
        throw IoError(std::string("synth: ") + e.what());
    }
    char name[32];
    for (std::size_t i = 0; i < count; ++i) {
        auto p = base;
        p.seed = derive_seed(cfg.seed(), 1, i);
        p.n_targets = 0;
        std::snprintf(name, sizeof name, "train_%03zu", i);
        r.train.push_back(out / "train" / (std::string(name) + ".f32"));
        hsi::save_cube(hsi::synth_scene(p).cube, r.train.back());
        manifest["train"].push_back(name);
    }
    for (std::size_t i = 0; i < test_count; ++i) {
        auto p = base;
        p.seed = derive_seed(cfg.seed(), 2, i);
        p.n_targets = targets;
        std::snprintf(name, sizeof name, "test_%03zu", i);
        auto scene = hsi::synth_scene(p);
        r.test.push_back(out / "test" / (std::string(name) + ".f32"));
        hsi::save_cube(scene.cube, r.test.back());
        hsi::save_labels_pgm(scene.labels, out / "test" / (std::string(name) + ".pgm"));
        manifest["test"].push_back(name);
    }
    hsi::write_json(out / "manifest.json", manifest);
    return r;
}

// ---------------------------------------------------------------------------
// train-teacher / distill

struct StageResult {
    fs::path checkpoint;
    train::TrainLog log;
    double seconds = 0.0;
};

namespace detail {

/// Rows of an earlier log up to and including `epoch`, used when resuming.
inline std::vector<std::string> log_rows_until(const fs::path& csv, std::size_t epoch) {
    std::vector<std::string> rows;
    if (!fs::exists(csv)) return rows;
    std::istringstream in(hsi::detail::read_file(csv));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoul(line.substr(0, line.find(','))) <= epoch) rows.push_back(line);
    }
    return rows;
}

inline void write_log(const fs::path& csv, const train::TrainLog& log, const std::vector<std::string>& earlier) {
    log.write_csv(csv);
    if (earlier.empty()) return;
    std::istringstream in(hsi::detail::read_file(csv));
    std::string header, line, body;
    std::getline(in, header);
    while (std::getline(in, line)) body += line + "\n";
    std::string all = header + "\n";
    for (const auto& r : earlier) all += r + "\n";
    hsi::write_text(csv, all + body);
}

inline StageResult run_stage(const RunConfig& cfg, const std::string& stage, const fs::path& out, bool resume,
                             const std::function<train::TrainResult(const train::TrainOptions&)>& run,
                             std::ostream* progress) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
        fs::create_directories(out);
    } catch (const fs::filesystem_error& e) {
        throw IoError(stage + ": " + e.what());
    }
    train::TrainOptions opt;
    opt.checkpoint = out / (stage + ".json");
    opt.meta = {{"config_hash", cfg.hash()}, {"seed", cfg.seed()}};
    std::vector<std::string> earlier;
    if (resume && fs::exists(opt.checkpoint)) {
        opt.resume = nn::load_checkpoint(opt.checkpoint);
        earlier = log_rows_until(out / (stage + "_log.csv"), opt.resume->meta.at("epoch"));
    }
    if (progress)
        opt.on_epoch = [progress, &stage](const train::EpochRecord& e) {
            *progress << stage << " epoch " << e.epoch << " loss " << e.loss << " (" << e.seconds << " s)\n";
        };
    auto result = run(opt);
    StageResult r{opt.checkpoint, result.log, since(t0)};
    write_log(out / (stage + "_log.csv"), result.log, earlier);
    json manifest = stamp(cfg, stage == "teacher" ? "train-teacher" : "distill");
    manifest["config"] = cfg.data();
    manifest["checkpoint"] = opt.checkpoint.filename().string();
    manifest["epochs_run"] = result.log.epochs.size();
    manifest["resumed"] = opt.resume.has_value();
    manifest["final_loss"] = result.log.epochs.empty() ? 0.0 : result.log.epochs.back().loss;
    manifest["seconds"] = r.seconds;
    hsi::write_json(out / (stage + "_manifest.json"), manifest);
    return r;
}

}  // namespace detail

/// Trains the teacher on `training_dir(data)`; writes out/teacher.{json,f64}, a log CSV and a manifest.
inline StageResult cmd_train_teacher(const RunConfig& cfg, const fs::path& data, const fs::path& out,
                                     bool resume = false, std::ostream* progress = nullptr) {
    auto cubes = load_cubes(training_dir(data));
    const auto spec = cfg.teacher_spec(cubes.front().bands());
    const auto tc = cfg.train();
    return detail::run_stage(cfg, "teacher", out, resume,
                             [&](const train::TrainOptions& o) { return train::train_teacher(tc, cubes, spec, o); },
                             progress);
}

/// Distils the frozen teacher (its EMA weights) into a student.
inline StageResult cmd_distill(const RunConfig& cfg, const fs::path& data, const fs::path& teacher_checkpoint,
                               const fs::path& out, bool resume = false, std::ostream* progress = nullptr) {
    if (!fs::exists(teacher_checkpoint)) throw IoError("distill: teacher checkpoint not found: " + teacher_checkpoint.string());
    const auto teacher = nn::load_checkpoint(teacher_checkpoint);
    if (teacher.params.spec().kind != nn::ModelKind::kTeacher)
        throw ValidationError("distill: " + teacher_checkpoint.string() + " is not a teacher checkpoint");
    const auto frozen = teacher.inference();
    auto cubes = load_cubes(training_dir(data));
    const std::size_t bands = frozen.spec().bands;
    cfg.teacher_spec(bands);  // config/teacher band agreement
    if (cubes.front().bands() != bands)
        throw ValidationError("distill: data has " + std::to_string(cubes.front().bands()) +
                              " bands, teacher expects " + std::to_string(bands));
    const auto spec = cfg.student_spec(bands);
    const auto tc = cfg.train();
    return detail::run_stage(cfg, "student", out, resume,
                             [&](const train::TrainOptions& o) { return train::train_student(tc, cubes, frozen, spec, o); },
                             progress);
}

// ---------------------------------------------------------------------------
// detect

struct DetectOutput {
    std::string name;
    fs::path scores;  // raw f64 payload
    json manifest;
};

/// Cube payloads named directly or found inside directories.
inline std::vector<fs::path> expand_cube_inputs(const std::vector<fs::path>& inputs) {
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            auto found = list_cubes(in);
            out.insert(out.end(), found.begin(), found.end());
        } else if (fs::exists(in)) {
            out.push_back(in);
        } else {
            throw IoError("no such cube: " + in.string());
        }
    }
    if (out.empty()) throw ValidationError("detect: no input cubes");
    return out;
}

/// Writes `<stem>.f64` (+ sidecar), `<stem>.pgm`, `<stem>.csv` and `<stem>_manifest.json` per cube.
inline std::vector<DetectOutput> cmd_detect(const RunConfig& cfg, const std::vector<fs::path>& inputs,
                                            const std::optional<fs::path>& checkpoint, const fs::path& out,
                                            std::size_t jobs = 1) {
    const std::string method = cfg.method();
    const auto dcfg = cfg.detector();
    const bool needs_net = method != "rx" && dcfg.mode != detect::Mode::kC;
    std::optional<nn::ModelParams> net;
    if (needs_net && !checkpoint) throw ValidationError("detect: mode " + method + " needs --checkpoint");
    if (checkpoint && method != "rx" && dcfg.mode != detect::Mode::kC) net = nn::load_checkpoint(*checkpoint).inference();
    const auto cubes = expand_cube_inputs(inputs);
    try {
        fs::create_directories(out);
    } catch (const fs::filesystem_error& e) {
        throw IoError(std::string("detect: ") + e.what());
    }
    std::vector<DetectOutput> results(cubes.size());
    parallel_for(cubes.size(), jobs, [&](std::size_t i) {
        const auto cube = hsi::load_cube(cubes[i]);
        const auto t0 = std::chrono::steady_clock::now();
        ScalarMap scores;
        std::string provenance = "rx";
        if (method == "rx") {
            scores = stf::rx_detector(cube, dcfg.stf.ridge);
        } else {
            auto d = detect::ablation_detect(dcfg.mode, net ? &*net : nullptr, cube, dcfg);
            scores = std::move(d.scores);
            provenance = d.provenance;
        }
        detect::DetectionManifest m;
        m.seconds = detail::since(t0);
        const std::string stem = cubes[i].stem().string();
        detect::save_scores_raw(scores, out / (stem + ".f64"));
        auto ex = detect::export_scoremap(scores, out / stem);
        m.cube = cubes[i].string();
        if (method != "rx") m.mode = dcfg.mode;
        m.provenance = provenance;
        m.config_hash = cfg.hash();
        m.seed = cfg.seed();
        m.height = cube.height();
        m.width = cube.width();
        m.bands = cube.bands();
        m.bypass_mask = dcfg.bypass_mask;
        m.used_teacher = net && net->spec().kind == nn::ModelKind::kTeacher;
        m.constant_warning = ex.constant_warning;
        json j = m.to_json();
        if (method == "rx") j["mode"] = "rx";
        j["checkpoint"] = checkpoint ? checkpoint->string() : "";
        hsi::write_json(out / (stem + "_manifest.json"), j);
        results[i] = {stem, out / (stem + ".f64"), j};
    });
    return results;
}

// ---------------------------------------------------------------------------
// eval / dep

/// Pairs score maps with label maps by stem; both sets must match exactly.
inline eval::EvalReport evaluate_dir(const RunConfig& cfg, const fs::path& scores_dir, const fs::path& labels_dir,
                                     const std::string& method, std::size_t jobs = 1,
                                     const std::optional<fs::path>& roc_dir = std::nullopt) {
    const auto scores = list_scores(scores_dir);
    const auto labels = list_labels(labels_dir);
    std::vector<std::string> missing;
    for (const auto& [k, _] : labels)
        if (!scores.count(k)) missing.push_back("no score map for " + k);
    for (const auto& [k, _] : scores)
        if (!labels.count(k)) missing.push_back("no label map for " + k);
    if (!missing.empty()) throw ValidationError("eval: unmatched image sets (" + missing.front() + ")");
    if (labels.empty()) throw ValidationError("eval: no labelled images in " + labels_dir.string());
    std::vector<std::string> names;
    for (const auto& [k, _] : labels) names.push_back(k);
    std::vector<std::optional<eval::ImageScore>> per(names.size());
    std::vector<std::string> why(names.size());
    if (roc_dir) fs::create_directories(*roc_dir);
    const std::size_t p = cfg.thresholds();
    parallel_for(names.size(), jobs, [&](std::size_t i) {
        const auto lab = hsi::load_labels(labels.at(names[i]));
        const auto s = detect::load_scores(scores.at(names[i]));
        if (lab.positives() == 0 || lab.positives() == lab.values.size()) {
            why[i] = names[i] + ": labels have no positives or no negatives";
            return;
        }
        eval::RocCurve roc;
        per[i] = eval::score_image(names[i], s, lab, p, roc_dir ? &roc : nullptr);
        if (roc_dir) roc.write_csv(*roc_dir / (names[i] + ".csv"));
    });
    eval::EvalReport r;
    r.method = method;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (per[i])
            r.images.push_back(*per[i]);
        else
            r.excluded.push_back(why[i]);
    }
    return r;
}

/// Writes out/eval.json, out/eval_table.csv and out/roc/<stem>.csv.
inline eval::EvalReport cmd_eval(const RunConfig& cfg, const fs::path& scores_dir, const fs::path& labels_dir,
                                 const fs::path& out, const std::string& method, std::size_t jobs = 1) {
    auto r = evaluate_dir(cfg, scores_dir, labels_dir, method, jobs, out / "roc");
    json j = r.to_json();
    j.update(detail::stamp(cfg, "eval"));
    j["scores_dir"] = scores_dir.string();
    j["labels_dir"] = labels_dir.string();
    hsi::write_json(out / "eval.json", j);
    hsi::write_text(out / "eval_table.csv", r.table_csv());
    return r;
}

/// Dependency of method phi on method psi; writes out/dep.json and out/dep_table.csv.
inline eval::DepReport cmd_dep(const RunConfig& cfg, const fs::path& phi_dir, const fs::path& psi_dir,
                               const fs::path& labels_dir, const fs::path& out, std::size_t jobs = 1) {
    const auto phi = evaluate_dir(cfg, phi_dir, labels_dir, "phi", jobs);
    const auto psi = evaluate_dir(cfg, psi_dir, labels_dir, "psi", jobs);
    auto r = eval::dependency(phi, psi, cfg.beta());
    json j = r.to_json();
    j.update(detail::stamp(cfg, "dep"));
    j["phi_dir"] = phi_dir.string();
    j["psi_dir"] = psi_dir.string();
    try {
        fs::create_directories(out);
    } catch (const fs::filesystem_error& e) {
        throw IoError(std::string("dep: ") + e.what());
    }
    hsi::write_json(out / "dep.json", j);
    hsi::write_text(out / "dep_table.csv", r.table_csv());
    return r;
}

}  // namespace stad::cli
