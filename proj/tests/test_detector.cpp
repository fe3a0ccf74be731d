#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

#include "fd_oracle.hpp"
#include "stad/detector.hpp"

using namespace stad;
using stad::testing::random_vector;

namespace {

/// Cube whose values already span exactly [0,1], so network normalization is the identity.
hsi::HyperCube unit_cube(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t b) {
    std::mt19937_64 rng(seed);
    auto v = random_vector(rng, h * w * b, 0.05, 0.95);
    v[1] = 0.0;
    v[v.size() - 2] = 1.0;
    return hsi::HyperCube("unit", h, w, b, v);
}

std::vector<std::size_t> argsort(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return idx;
}

/// Masked loss evaluated without the tape: sum_i z_i sum_k sum_b (x - r_k)^2.
double masked_loss(const nn::ModelParams& net, const std::vector<double>& x, std::size_t h, std::size_t w,
                   const std::vector<double>& z) {
    const std::size_t b = net.spec().bands;
    nn::Bound p(net, nullptr);
    std::vector<std::vector<double>> recon;
    if (net.spec().kind == nn::ModelKind::kStudent) {
        std::vector<double> chw(b * h * w);
        for (std::size_t i = 0; i < h * w; ++i)
            for (std::size_t c = 0; c < b; ++c) chw[c * h * w + i] = x[i * b + c];
        for (const auto& o : nn::student_forward(p, ad::constant({b, h, w}, chw))) {
            std::vector<double> tok(h * w * b);
            for (std::size_t i = 0; i < h * w; ++i)
                for (std::size_t c = 0; c < b; ++c) tok[i * b + c] = o.values()[c * h * w + i];
            recon.push_back(tok);
        }
    } else {
        for (const auto& o : nn::teacher_forward(p, ad::constant({h * w, b}, x), ad::TokenGroups::uniform(1, h * w)))
            recon.emplace_back(o.values().begin(), o.values().end());
    }
    double total = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) {
        double e = 0.0;
        for (const auto& r : recon)
            for (std::size_t c = 0; c < b; ++c) e += (x[i * b + c] - r[i * b + c]) * (x[i * b + c] - r[i * b + c]);
        total += z[i] * e;
    }
    return total;
}

nn::ModelParams biased_student(std::uint64_t seed, std::size_t bands, std::size_t hidden) {
    auto p = nn::init_params(seed, nn::ModelSpec::student(bands, hidden));
    std::mt19937_64 rng(seed + 1);
    for (auto& e : p.entries())
        if (e.role == nn::ParamRole::kBias) e.values = random_vector(rng, e.values.size(), -0.3, 0.3);
    return p;
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("stad_detector_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST(Stad, ZeroMaskGivesZeroScores) {
    auto net = biased_student(1, 4, 6);
    auto cube = unit_cube(1, 5, 5, 4);
    auto d = detect::masked_saliency(net, cube, ScalarMap(5, 5, 0.0));
    for (double s : d.scores.values) EXPECT_EQ(s, 0.0);
}

TEST(Stad, BypassEqualsPlainSaliency) {
    for (bool teacher : {false, true}) {
        auto net = teacher ? nn::init_params(2, nn::ModelSpec::teacher(4, 8, 2)) : biased_student(2, 4, 6);
        auto cube = unit_cube(2, 6, 5, 4);
        detect::DetectorConfig cfg;
        cfg.bypass_mask = true;
        auto e = detect::stad_detect(net, cube, cfg);
        auto b = detect::saliency_map(net, cube);
        EXPECT_LT(stad::testing::max_abs_diff(e.scores.values, b.scores.values), 1e-12);
        auto mode_e = detect::ablation_detect(detect::Mode::kE, &net, cube, cfg);
        auto mode_b = detect::ablation_detect(detect::Mode::kB, &net, cube, cfg);
        EXPECT_LT(stad::testing::max_abs_diff(mode_e.scores.values, mode_b.scores.values), 1e-12);
    }
}

TEST(Stad, DoublingMaskDoublesGradientAndKeepsRanking) {
    auto net = biased_student(3, 5, 8);
    hsi::SceneParams sp;
    sp.height = sp.width = 12;
    sp.bands = 5;
    sp.n_targets = 2;
    auto scene = hsi::synth_scene(sp);
    detect::DetectorConfig one, two;
    two.mask_scale = 2.0;
    auto a = detect::stad_detect(net, scene.cube, one);
    auto b = detect::stad_detect(net, scene.cube, two);
    for (std::size_t i = 0; i < a.gradient.size(); ++i) EXPECT_EQ(b.gradient[i], 2.0 * a.gradient[i]);
    EXPECT_EQ(argsort(a.scores.values), argsort(b.scores.values));
}

TEST(Saliency, InputIndependentNetworkHasClosedForm) {
    // zero weights: every reconstruction is its block's output bias c_k
    auto net = nn::make_layout(nn::ModelSpec::student(3, 4));
    std::mt19937_64 rng(4);
    const std::vector<std::string> heads{"deconv1.b", "deconv2.b", "fc2.b"};
    for (const auto& name : heads) net.at(name).values = random_vector(rng, 3, -1.0, 1.0);
    auto cube = unit_cube(4, 4, 5, 3);
    auto d = detect::saliency_map(net, cube);
    const auto& x = cube.data();
    for (std::size_t i = 0; i < 20; ++i) {
        double want = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            double g = 0.0;
            for (const auto& name : heads) g += 2.0 * (x[i * 3 + c] - net.at(name).values[c]);
            want = std::max(want, std::abs(g));
        }
        EXPECT_NEAR(d.scores.values[i], want, 1e-12);
    }
}

TEST(Saliency, StationaryPointGivesZeroScores) {
    // every pixel carries the same spectrum; biases reproduce it exactly
    const std::vector<double> spectrum{0.0, 0.25, 1.0};
    std::vector<double> data;
    for (int i = 0; i < 16; ++i) data.insert(data.end(), spectrum.begin(), spectrum.end());
    hsi::HyperCube cube("flat", 4, 4, 3, data);
    auto net = nn::make_layout(nn::ModelSpec::student(3, 4));
    for (const char* name : {"deconv1.b", "deconv2.b", "fc2.b"}) net.at(name).values = spectrum;
    for (double s : detect::saliency_map(net, cube).scores.values) EXPECT_EQ(s, 0.0);
}

TEST(Stad, InputGradientMatchesFiniteDifferences) {
    for (bool teacher : {false, true}) {
        const std::size_t h = 3, w = 3, b = 4;
        auto net = teacher ? nn::init_params(5, nn::ModelSpec::teacher(b, 8, 2)) : biased_student(5, b, 6);
        auto cube = unit_cube(5, h, w, b);
        std::mt19937_64 rng(5);
        ScalarMap mask(h, w, random_vector(rng, h * w, 0.0, 3.0));
        mask.values[4] = 0.0;
        auto d = detect::masked_saliency(net, cube, mask);
        auto fd = stad::testing::central_difference(
            [&](const std::vector<double>& x) { return masked_loss(net, x, h, w, mask.values); },
            std::vector<double>(cube.data().begin(), cube.data().end()));
        EXPECT_LT(stad::testing::relative_error(d.gradient, fd), 1e-5) << (teacher ? "teacher" : "student");
    }
}

TEST(Ablation, ModesMatchTheirDefinitions) {
    auto net = biased_student(6, 5, 6);
    hsi::SceneParams sp;
    sp.height = sp.width = 10;
    sp.bands = 5;
    sp.n_targets = 1;
    auto cube = hsi::synth_scene(sp).cube;
    detect::DetectorConfig cfg;

    auto c = detect::ablation_detect(detect::Mode::kC, nullptr, cube, cfg);
    EXPECT_EQ(c.scores.values, stf::small_target_filter(cube).values);
    EXPECT_EQ(c.provenance, "stf");

    auto a = detect::ablation_detect(detect::Mode::kA, &net, cube, cfg);
    auto d = detect::ablation_detect(detect::Mode::kD, &net, cube, cfg);
    for (std::size_t i = 0; i < a.scores.size(); ++i) EXPECT_EQ(d.scores.values[i], a.scores.values[i] * c.scores.values[i]);

    cfg.bypass_mask = true;
    auto d_bypass = detect::ablation_detect(detect::Mode::kD, &net, cube, cfg);
    EXPECT_EQ(d_bypass.scores.values, a.scores.values);

    // mode A by hand: third-block squared error on the [0,1]-scaled cube
    auto norm = hsi::normalize(cube, hsi::NormalizationMode::kUnit).first;
    nn::Bound p(net, nullptr);
    auto r3 = nn::channels_to_tokens(
        nn::student_forward(p, nn::tokens_to_channels(ad::constant({100, 5}, {norm.data().begin(), norm.data().end()}), 10, 10))[2]);
    for (std::size_t i = 0; i < 100; ++i) {
        double e = 0.0;
        for (std::size_t k = 0; k < 5; ++k) e += std::pow(norm.data()[i * 5 + k] - r3.values()[i * 5 + k], 2);
        EXPECT_NEAR(a.scores.values[i], e, 1e-12);
    }
}

TEST(Ablation, ErrorsAndModeNames) {
    auto cube = unit_cube(7, 4, 4, 3);
    EXPECT_THROW(detect::ablation_detect(detect::Mode::kE, nullptr, cube), ValidationError);
    auto wrong = nn::init_params(1, nn::ModelSpec::student(4, 3));
    EXPECT_THROW(detect::stad_detect(wrong, cube), DimensionError);
    EXPECT_EQ(detect::parse_mode("d"), detect::Mode::kD);
    EXPECT_THROW(detect::parse_mode("F"), ValidationError);
}

TEST(Stad, DeterministicAndNonNegative) {
    auto net = biased_student(8, 6, 10);
    hsi::SceneParams sp;
    sp.height = sp.width = 16;
    sp.bands = 6;
    auto cube = hsi::synth_scene(sp).cube;
    auto a = detect::stad_detect(net, cube), b = detect::stad_detect(net, cube);
    EXPECT_EQ(a.scores.values, b.scores.values);
    for (double s : a.scores.values) EXPECT_GE(s, 0.0);
}

TEST(Export, ConstantMapExportsZerosWithWarning) {
    auto dir = scratch("constant");
    auto r = detect::export_scoremap(ScalarMap(3, 4, 2.5), dir / "flat");
    EXPECT_TRUE(r.constant_warning);
    auto img = hsi::read_pgm(dir / "flat.pgm");
    EXPECT_EQ(img.maxval, 65535);
    for (auto v : img.samples) EXPECT_EQ(v, 0);
}

TEST(Export, MaxMapsToFullScaleAndRankingSurvives) {
    auto dir = scratch("rank");
    std::mt19937_64 rng(9);
    std::vector<double> v(64);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 3.0 + 0.01 * static_cast<double>(i);
    std::shuffle(v.begin(), v.end(), rng);
    ScalarMap s(8, 8, v);
    auto r = detect::export_scoremap(s, dir / "scores");
    EXPECT_FALSE(r.constant_warning);
    auto img = hsi::read_pgm(dir / "scores.pgm");
    const auto top = std::max_element(v.begin(), v.end()) - v.begin();
    EXPECT_EQ(img.samples[static_cast<std::size_t>(top)], 65535);
    std::vector<double> back(img.samples.begin(), img.samples.end());
    EXPECT_EQ(argsort(back), argsort(v));  // Spearman rho = 1
    auto csv = detect::load_scores(dir / "scores.csv");
    EXPECT_EQ(argsort(csv.values), argsort(v));
    EXPECT_EQ(csv.height, 8u);
}

TEST(Export, RawScoresRoundTripExactly) {
    auto dir = scratch("raw");
    std::mt19937_64 rng(10);
    ScalarMap s(5, 7, random_vector(rng, 35, 0.0, 1e6));
    detect::save_scores_raw(s, dir / "img.raw");
    auto back = detect::load_scores(dir / "img.raw");
    EXPECT_EQ(back.values, s.values);
    EXPECT_EQ(back.width, 7u);
}

TEST(Manifest, RecordsThroughput) {
    detect::DetectionManifest m;
    m.height = m.width = 1000;
    m.seconds = 2.0;
    auto j = m.to_json();
    EXPECT_DOUBLE_EQ(j.at("throughput_mpx_s").get<double>(), 0.5);
    EXPECT_EQ(j.at("mode"), "E");
}
