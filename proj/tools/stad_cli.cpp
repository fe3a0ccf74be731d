#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "stad/pipeline.hpp"

namespace {

using stad::cli::RunConfig;
using json = nlohmann::json;
namespace fs = std::filesystem;

/// Registers options whose values land in the config JSON only when given on
/// the command line, so flags override the config file which overrides defaults.
class Flags {
  public:
    explicit Flags(CLI::App* app) : app_(app) {
        app_->add_option("--config", config_, "JSON config file (flags override it)")->check(CLI::ExistingFile);
        add<std::uint64_t>("--seed", "/seed", "Run seed for data synthesis, initialisation and batching");
    }

    template <class T>
    CLI::Option* add(const std::string& name, const std::string& pointer, const std::string& help) {
        auto value = std::make_shared<T>(defaults_[json::json_pointer(pointer)].get<T>());
        auto* opt = app_->add_option(name, *value, help)->capture_default_str();
        setters_.push_back([opt, value, pointer](json& j) {
            if (opt->count()) j[json::json_pointer(pointer)] = *value;
        });
        return opt;
    }

    void flag(const std::string& name, const std::string& pointer, const std::string& help) {
        auto* opt = app_->add_flag(name)->description(help + " (default: off)");
        setters_.push_back([opt, pointer](json& j) {
            if (opt->count()) j[json::json_pointer(pointer)] = true;
        });
    }

    RunConfig config() const {
        json flags = json::object();
        for (const auto& s : setters_) s(flags);
        return RunConfig::from_file(config_.empty() ? std::nullopt : std::optional<fs::path>(config_), flags);
    }

  private:
    CLI::App* app_;
    json defaults_ = RunConfig::defaults();
    std::string config_;
    std::vector<std::function<void(json&)>> setters_;
};

void add_training_flags(Flags& f, const std::string& epochs_key) {
    f.add<std::size_t>("--epochs", "/train/" + epochs_key, "Training epochs");
    f.add<double>("--lr", "/train/lr", "Adam learning rate");
    f.add<std::size_t>("--batch", "/train/batch_size", "Patches per batch");
    f.add<double>("--ema", "/train/ema_decay", "EMA decay of the inference weights");
    f.add<std::size_t>("--patch", "/train/patch", "Square training patch side in pixels");
    f.add<std::size_t>("--checkpoint-every", "/train/checkpoint_every",
                       "Also write a resumable checkpoint every N epochs (0: final only)");
}

void add_detect_flags(Flags& f) {
    f.add<std::string>("--mode", "/detect/mode",
                       "A reconstruction error, B saliency, C filter only, D error x filter, E full method, rx baseline")
        ->check(CLI::IsMember({"A", "B", "C", "D", "E", "rx"}));
    f.flag("--stf-bypass", "/detect/bypass", "Replace the filter mask with ones");
    f.add<double>("--mask-scale", "/detect/mask_scale", "Multiplier applied to the filter mask");
    f.add<int>("--radius", "/detect/radius", "Bilateral neighbourhood radius");
    f.add<double>("--sigma-spatial", "/detect/sigma_spatial", "Bilateral spatial sigma (pixels)");
    f.add<double>("--sigma-range", "/detect/sigma_range", "Bilateral range sigma on the 0..255 distance scale");
    f.add<double>("--ridge", "/detect/ridge", "Covariance ridge relative to each band variance");
    f.add<std::size_t>("--tile", "/detect/tile", "Teacher attention tile side at inference");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Small-target-aware hyperspectral anomaly detection"};
    app.require_subcommand(1);
    std::size_t jobs = 1;
    bool quiet = false;

    auto* synth = app.add_subcommand("synth", "Write synthetic train/ and test/ cube sets");
    Flags synth_f(synth);
    std::string synth_out;
    synth->add_option("--out", synth_out, "Output dataset directory")->required();
    synth_f.add<std::size_t>("--count", "/synth/count", "Anomaly-free training cubes");
    synth_f.add<std::size_t>("--test-count", "/synth/test_count", "Labelled test cubes");
    synth_f.add<std::size_t>("--height", "/synth/height", "Cube height");
    synth_f.add<std::size_t>("--width", "/synth/width", "Cube width");
    synth_f.add<std::size_t>("--bands", "/synth/bands", "Spectral bands");
    synth_f.add<std::size_t>("--targets", "/synth/targets", "Targets per test cube (must be >= 1)");
    synth_f.add<std::size_t>("--target-size", "/synth/target_size", "Pixels per target");
    synth_f.add<double>("--contrast", "/synth/contrast", "Target blend weight");
    synth_f.add<double>("--noise", "/synth/noise", "Gaussian noise sigma");

    auto* teach = app.add_subcommand("train-teacher", "Train the transformer teacher");
    Flags teach_f(teach);
    std::string teach_data, teach_out;
    bool teach_resume = false;
    teach->add_option("--data", teach_data, "Dataset directory (uses its train/ subdirectory if present)")->required();
    teach->add_option("--out", teach_out, "Output directory for teacher.json/.f64 and the log")->required();
    teach->add_flag("--resume", teach_resume, "Continue from out/teacher.json if it exists");
    add_training_flags(teach_f, "teacher_epochs");
    teach_f.add<std::size_t>("--hidden", "/teacher/hidden", "Teacher width");
    teach_f.add<std::size_t>("--heads", "/teacher/heads", "Attention heads");
    teach_f.add<std::size_t>("--bands", "/teacher/bands", "Expected bands (0: take from data)");

    auto* distill = app.add_subcommand("distill", "Distil the teacher into the convolutional student");
    Flags distill_f(distill);
    std::string distill_data, distill_out, distill_teacher;
    bool distill_resume = false;
    distill->add_option("--data", distill_data, "Dataset directory")->required();
    distill->add_option("--teacher", distill_teacher, "Teacher checkpoint manifest (teacher.json)")->required();
    distill->add_option("--out", distill_out, "Output directory for student.json/.f64 and the log")->required();
    distill->add_flag("--resume", distill_resume, "Continue from out/student.json if it exists");
    add_training_flags(distill_f, "student_epochs");
    distill_f.add<std::size_t>("--hidden", "/student/hidden", "Student channels");

    auto* det = app.add_subcommand("detect", "Score cubes and write score maps");
    Flags det_f(det);
    std::vector<std::string> det_cubes;
    std::string det_out, det_ckpt;
    det->add_option("--cube", det_cubes, "Cube payloads or directories of cubes")->required();
    det->add_option("--checkpoint", det_ckpt, "Network checkpoint (not needed for modes C and rx)");
    det->add_option("--out", det_out, "Output directory")->required();
    det->add_option("--jobs", jobs, "Images processed in parallel")->capture_default_str();
    add_detect_flags(det_f);

    auto* ev = app.add_subcommand("eval", "ROC/AUC evaluation of a score directory");
    Flags ev_f(ev);
    std::string ev_scores, ev_labels, ev_out, ev_method;
    ev->add_option("--scores-dir", ev_scores, "Score maps (<stem>.f64, .csv or .pgm)")->required();
    ev->add_option("--labels-dir", ev_labels, "Label maps (<stem>.pgm or one-band raw)")->required();
    ev->add_option("--out", ev_out, "Output directory")->required();
    ev->add_option("--method", ev_method, "Method name for the report (default: scores directory name)");
    ev->add_option("--jobs", jobs, "Images processed in parallel")->capture_default_str();
    ev_f.add<std::size_t>("--thresholds", "/eval/thresholds", "Threshold samples on [0,1]");

    auto* dep = app.add_subcommand("dep", "Dependency of one detector on another");
    Flags dep_f(dep);
    std::string dep_phi, dep_psi, dep_labels, dep_out;
    dep->add_option("--phi-dir", dep_phi, "Scores of the detector under study")->required();
    dep->add_option("--psi-dir", dep_psi, "Scores of the reference detector (e.g. detect --mode rx or C)")->required();
    dep->add_option("--labels-dir", dep_labels, "Label maps")->required();
    dep->add_option("--out", dep_out, "Output directory")->required();
    dep->add_option("--jobs", jobs, "Images processed in parallel")->capture_default_str();
    dep_f.add<std::size_t>("--thresholds", "/eval/thresholds", "Threshold samples on [0,1]");
    dep_f.add<double>("--beta", "/eval/beta", "Stabiliser in the dependency score denominator");

    for (auto* sub : {teach, distill}) sub->add_flag("--quiet", quiet, "No per-epoch progress");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(stad::ExitCode::kValidation);
    }

    try {
        std::ostream* progress = quiet ? nullptr : &std::cerr;
        if (synth->parsed()) {
            auto cfg = synth_f.config();
            auto r = stad::cli::cmd_synth(cfg, synth_out);
            std::cout << "wrote " << r.train.size() << " training and " << r.test.size() << " test cubes to "
                      << synth_out << " (config " << cfg.hash() << ")\n";
        } else if (teach->parsed()) {
            auto cfg = teach_f.config();
            auto r = stad::cli::cmd_train_teacher(cfg, teach_data, teach_out, teach_resume, progress);
            std::cout << "teacher checkpoint " << r.checkpoint.string() << " after " << r.seconds << " s\n";
        } else if (distill->parsed()) {
            auto cfg = distill_f.config();
            auto r = stad::cli::cmd_distill(cfg, distill_data, distill_teacher, distill_out, distill_resume, progress);
            std::cout << "student checkpoint " << r.checkpoint.string() << " after " << r.seconds << " s\n";
        } else if (det->parsed()) {
            auto cfg = det_f.config();
            std::vector<fs::path> inputs(det_cubes.begin(), det_cubes.end());
            std::optional<fs::path> ckpt;
            if (!det_ckpt.empty()) ckpt = det_ckpt;
            auto r = stad::cli::cmd_detect(cfg, inputs, ckpt, det_out, jobs);
            for (const auto& d : r)
                std::cout << d.name << " " << d.manifest.at("throughput_mpx_s").get<double>() << " Mpx/s\n";
        } else if (ev->parsed()) {
            auto cfg = ev_f.config();
            if (ev_method.empty()) ev_method = fs::path(ev_scores).lexically_normal().filename().string();
            auto r = stad::cli::cmd_eval(cfg, ev_scores, ev_labels, ev_out, ev_method, jobs);
            std::cout << "mean AUC_DF " << r.mean_df() << "  AUC_BS " << r.mean_bs() << "  failures " << r.failures()
                      << "/" << r.images.size() << "\n";
        } else if (dep->parsed()) {
            auto cfg = dep_f.config();
            auto r = stad::cli::cmd_dep(cfg, dep_phi, dep_psi, dep_labels, dep_out, jobs);
            std::cout << "mDep_DF " << r.mdep_df.value << "  mDep_BS " << r.mdep_bs.value << "  strong "
                      << r.strong_fraction() << "\n";
        }
    } catch (const stad::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(stad::ExitCode::kIo);
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(stad::ExitCode::kValidation);
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
