#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fd_oracle.hpp"
#include "stad/hypercube.hpp"

using namespace stad;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("stad_hsi_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

hsi::HyperCube random_cube(std::mt19937_64& rng, std::size_t m, std::size_t n, std::size_t b, bool float_exact) {
    auto v = stad::testing::random_vector(rng, m * n * b, 0.0, 10.0);
    if (float_exact)
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    return hsi::HyperCube("rand", m, n, b, v);
}

void write_floats(const fs::path& path, const std::vector<float>& values) {
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
}

}  // namespace

TEST(HyperCube, RejectsInvalidGeometryAndValues) {
    EXPECT_THROW(hsi::HyperCube("x", 2, 3, 2, std::vector<double>(12)), ValidationError);
    EXPECT_THROW(hsi::HyperCube("x", 3, 3, 1, std::vector<double>(9)), ValidationError);
    EXPECT_THROW(hsi::HyperCube("x", 3, 3, 2, std::vector<double>(17)), ValidationError);
    std::vector<double> v(18, 1.0);
    v[5] = std::nan("");
    EXPECT_THROW(hsi::HyperCube("x", 3, 3, 2, v), ValidationError);
}

TEST(LoadCube, HandBuiltBsqFile) {
    auto dir = scratch_dir("bsq");
    // 3x3x2 BSQ: band 0 holds 0..8, band 1 holds 100..108
    std::vector<float> payload;
    for (int b = 0; b < 2; ++b)
        for (int p = 0; p < 9; ++p) payload.push_back(static_cast<float>(b * 100 + p));
    write_floats(dir / "hand.raw", payload);
    hsi::CubeHeader header{3, 3, 2, "f32", hsi::Interleave::kBsq};
    auto cube = hsi::load_cube(dir / "hand.raw", header);
    EXPECT_EQ(cube.name(), "hand");
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(cube.at(i, j, 0), static_cast<double>(i * 3 + j));
            EXPECT_EQ(cube.at(i, j, 1), static_cast<double>(100 + i * 3 + j));
        }
}

TEST(LoadCube, RoundTripIsBitExact) {
    auto dir = scratch_dir("roundtrip");
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        auto cube = random_cube(rng, 3 + trial, 4, 2 + trial, true);
        hsi::save_cube(cube, dir / "c.raw");
        auto back = hsi::load_cube(dir / "c.raw");
        ASSERT_EQ(back.data().size(), cube.data().size());
        for (std::size_t i = 0; i < cube.data().size(); ++i) EXPECT_EQ(back.data()[i], cube.data()[i]);

        auto wide = random_cube(rng, 4, 3, 3, false);
        hsi::save_cube(wide, dir / "d.raw", hsi::Interleave::kBil, "f64");
        auto wide_back = hsi::load_cube(dir / "d.raw");
        for (std::size_t i = 0; i < wide.data().size(); ++i) EXPECT_EQ(wide_back.data()[i], wide.data()[i]);
    }
}

TEST(LoadCube, InterleavesAgree) {
    auto dir = scratch_dir("interleave");
    std::mt19937_64 rng(2);
    auto cube = random_cube(rng, 5, 4, 6, true);
    hsi::save_cube(cube, dir / "bsq.raw", hsi::Interleave::kBsq);
    hsi::save_cube(cube, dir / "bil.raw", hsi::Interleave::kBil);
    hsi::save_cube(cube, dir / "bip.raw", hsi::Interleave::kBip);
    EXPECT_NE(hsi::detail::read_file(dir / "bsq.raw"), hsi::detail::read_file(dir / "bip.raw"));
    auto a = hsi::load_cube(dir / "bsq.raw"), b = hsi::load_cube(dir / "bil.raw"), c = hsi::load_cube(dir / "bip.raw");
    for (std::size_t i = 0; i < cube.data().size(); ++i) {
        EXPECT_EQ(a.data()[i], c.data()[i]);
        EXPECT_EQ(b.data()[i], c.data()[i]);
    }
}

TEST(LoadCube, Errors) {
    auto dir = scratch_dir("errors");
    write_floats(dir / "short.raw", std::vector<float>(17, 1.0f));
    EXPECT_THROW(hsi::load_cube(dir / "short.raw", {3, 3, 2, "f32", hsi::Interleave::kBsq}), ValidationError);

    std::vector<float> bad(18, 1.0f);
    bad[3] = 2.0f;
    bad[7] = std::numeric_limits<float>::infinity();
    write_floats(dir / "inf.raw", bad);
    EXPECT_THROW(hsi::load_cube(dir / "inf.raw", {3, 3, 2, "f32", hsi::Interleave::kBsq}), ValidationError);

    write_floats(dir / "const.raw", std::vector<float>(18, 4.0f));
    EXPECT_THROW(hsi::load_cube(dir / "const.raw", {3, 3, 2, "f32", hsi::Interleave::kBsq}), ValidationError);
    EXPECT_THROW(hsi::load_cube(dir / "const.raw", {3, 3, 2, "u16", hsi::Interleave::kBsq}), ValidationError);
    EXPECT_THROW(hsi::load_cube(dir / "missing.raw", {3, 3, 2, "f32", hsi::Interleave::kBsq}), IoError);
}

TEST(SelectBands, IdentityPrefixAndComposition) {
    std::mt19937_64 rng(3);
    auto cube = random_cube(rng, 4, 3, 8, false);
    auto same = hsi::select_bands(cube, 8);
    EXPECT_TRUE(std::equal(same.data().begin(), same.data().end(), cube.data().begin()));
    auto four = hsi::select_bands(cube, 4);
    EXPECT_EQ(four.bands(), 4u);
    EXPECT_EQ(four.height(), 4u);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(four.at(i, j, 0), cube.at(i, j, 0));
    auto nested = hsi::select_bands(hsi::select_bands(cube, 6), 3);
    auto direct = hsi::select_bands(cube, 3);
    EXPECT_TRUE(std::equal(nested.data().begin(), nested.data().end(), direct.data().begin()));
    EXPECT_THROW(hsi::select_bands(cube, 1), ValidationError);
    EXPECT_THROW(hsi::select_bands(cube, 9), ValidationError);
}

TEST(SelectBands, FirstFiftyOfFourHundredTwentyFive) {
    std::mt19937_64 rng(4);
    auto cube = random_cube(rng, 3, 3, 425, false);
    auto out = hsi::select_bands(cube, 50);
    EXPECT_EQ(out.bands(), 50u);
    EXPECT_EQ(out.pixels(), 9u);
}

TEST(Normalize, MapsToUnitAndByteRanges) {
    std::mt19937_64 rng(5);
    auto cube = random_cube(rng, 4, 4, 3, false);
    auto [unit, spec] = hsi::normalize(cube);
    auto [lo, hi] = unit.range();
    EXPECT_DOUBLE_EQ(lo, 0.0);
    EXPECT_DOUBLE_EQ(hi, 1.0);
    EXPECT_NEAR(spec.inverse(unit.data()[7]), cube.data()[7], 1e-12);
    auto [byte, bspec] = hsi::normalize(cube, hsi::NormalizationMode::kByte);
    EXPECT_DOUBLE_EQ(byte.range().second, 255.0);
    EXPECT_THROW(hsi::normalize(hsi::HyperCube("c", 3, 3, 2, std::vector<double>(18, 1.0))), ValidationError);
}

TEST(Labels, PgmAndRawRoundTrip) {
    auto dir = scratch_dir("labels");
    hsi::LabelMap labels{3, 4, {0, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1}};
    hsi::save_labels_pgm(labels, dir / "l.pgm");
    auto back = hsi::load_labels(dir / "l.pgm");
    EXPECT_EQ(back.values, labels.values);
    EXPECT_EQ(back.height, 3u);
    EXPECT_EQ(back.width, 4u);
    EXPECT_EQ(back.positives(), 4u);

    std::vector<float> raw(labels.values.begin(), labels.values.end());
    write_floats(dir / "r.raw", raw);
    hsi::write_json(dir / "r.json", hsi::CubeHeader{3, 4, 1, "f32", hsi::Interleave::kBsq}.to_json());
    EXPECT_EQ(hsi::load_labels(dir / "r.raw").values, labels.values);
}

TEST(Synth, NoTargetsMeansNoLabels) {
    hsi::SceneParams p;
    p.n_targets = 0;
    auto scene = hsi::synth_scene(p);
    EXPECT_EQ(scene.labels.positives(), 0u);
}

TEST(Synth, DeterministicPerSeed) {
    hsi::SceneParams p;
    p.seed = 42;
    auto a = hsi::synth_scene(p), b = hsi::synth_scene(p);
    EXPECT_TRUE(std::equal(a.cube.data().begin(), a.cube.data().end(), b.cube.data().begin()));
    EXPECT_EQ(a.labels.values, b.labels.values);
    p.seed = 43;
    auto c = hsi::synth_scene(p);
    EXPECT_FALSE(std::equal(a.cube.data().begin(), a.cube.data().end(), c.cube.data().begin()));
}

TEST(Synth, AnomalyFractionMatchesRequest) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        hsi::SceneParams p;
        p.seed = seed;
        p.n_targets = 5;
        p.target_size_px = 6;
        auto scene = hsi::synth_scene(p);
        EXPECT_EQ(scene.labels.positives(), 30u);
    }
}

TEST(Synth, ZeroContrastTargetsAreIndistinguishable) {
    // Welch two-sample test per band, pooling target pixels vs background
    // pixels over many independent scenes.
    auto max_t = [](double contrast) {
        std::vector<std::vector<double>> groups[2];
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            hsi::SceneParams p;
            p.seed = 100 + seed;
            p.contrast = contrast;
            p.n_targets = 4;
            p.target_size_px = 6;
            auto s = hsi::synth_scene(p);
            for (std::size_t px = 0; px < s.cube.pixels(); ++px) {
                auto spec = s.cube.spectrum(px);
                groups[s.labels.values[px]].emplace_back(spec.begin(), spec.end());
            }
        }
        double worst = 0.0;
        for (std::size_t b = 0; b < groups[0].front().size(); ++b) {
            double mean[2], var[2], cnt[2];
            for (int g = 0; g < 2; ++g) {
                double sum = 0.0, sq = 0.0;
                for (const auto& v : groups[g]) sum += v[b];
                cnt[g] = static_cast<double>(groups[g].size());
                mean[g] = sum / cnt[g];
                for (const auto& v : groups[g]) sq += (v[b] - mean[g]) * (v[b] - mean[g]);
                var[g] = sq / (cnt[g] - 1);
            }
            worst = std::max(worst, std::abs(mean[0] - mean[1]) / std::sqrt(var[0] / cnt[0] + var[1] / cnt[1]));
        }
        return worst;
    };
    EXPECT_LT(max_t(0.0), 3.5);
    EXPECT_GT(max_t(0.8), 10.0);
}

TEST(Synth, PlacementFailureIsReported) {
    hsi::SceneParams p;
    p.height = p.width = 9;
    p.n_targets = 10;
    p.target_size_px = 4;
    try {
        hsi::synth_scene(p);
        FAIL() << "expected placement failure";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("100 attempts"), std::string::npos);
    }
    p.target_size_px = 5;  // more than half the scene: rejected before placement
    EXPECT_THROW(hsi::synth_scene(p), ValidationError);
}
