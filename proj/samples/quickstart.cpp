// Synthesises a few scenes, trains a small teacher and student in memory,
// then scores a labelled test scene with every ablation mode.

#include <iomanip>
#include <iostream>

#include "stad/detector.hpp"
#include "stad/eval.hpp"
#include "stad/training.hpp"

using namespace stad;

int main() {
    hsi::SceneParams p;
    p.height = p.width = 16;
    p.bands = 10;

    std::vector<hsi::HyperCube> train_set;
    for (std::uint64_t s = 0; s < 8; ++s) {
        p.seed = 100 + s;
        p.n_targets = 0;
        train_set.push_back(hsi::synth_scene(p).cube);
    }
    p.seed = 7;
    p.n_targets = 2;
    const auto test = hsi::synth_scene(p);

    train::TrainConfig cfg;
    cfg.teacher_epochs = 30;
    cfg.student_epochs = 60;
    cfg.batch_size = 8;
    cfg.lr = 1e-3;
    const auto teacher = train::train_teacher(cfg, train_set, nn::ModelSpec::teacher(p.bands, 32, 2));
    const auto student =
        train::train_student(cfg, train_set, teacher.checkpoint.inference(), nn::ModelSpec::student(p.bands, 16));
    std::cout << "teacher loss " << teacher.log.epochs.front().loss << " -> " << teacher.log.epochs.back().loss << "\n";
    std::cout << "student loss " << student.log.epochs.front().loss << " -> " << student.log.epochs.back().loss << "\n";

    const auto net = student.checkpoint.inference();
    std::cout << std::fixed << std::setprecision(4);
    for (auto mode : {detect::Mode::kA, detect::Mode::kB, detect::Mode::kC, detect::Mode::kD, detect::Mode::kE}) {
        detect::DetectorConfig dc;
        dc.mode = mode;
        const auto d = detect::ablation_detect(mode, &net, test.cube, dc);
        const auto s = eval::score_image(test.cube.name(), d.scores, test.labels);
        std::cout << "mode " << detect::to_string(mode) << " (" << d.provenance << "): AUC_DF " << s.auc_df
                  << "  AUC_BS " << s.auc_bs << "\n";
    }
    const double rx = eval::score_image("rx", stf::rx_detector(test.cube), test.labels).auc_df;
    std::cout << "global RX baseline: AUC_DF " << rx << "\n";
}
