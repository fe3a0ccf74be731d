#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <random>

#include "fd_oracle.hpp"
#include "grad_check.hpp"
#include "stad/networks.hpp"

using namespace stad;
using stad::testing::random_vector;

namespace {

std::vector<double> vals(const ad::Tensor& t) { return {t.values().begin(), t.values().end()}; }

nn::ModelSpec small_teacher(std::size_t bands) { return nn::ModelSpec::teacher(bands, 8, 2); }

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("stad_networks_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST(Teacher, OutputShapesMatchInput) {
    auto params = nn::init_params(1, small_teacher(50));
    nn::Bound p(params, nullptr);
    std::mt19937_64 rng(1);
    auto x = ad::constant({81, 50}, random_vector(rng, 81 * 50, 0.0, 1.0));
    auto out = nn::teacher_forward(p, x, ad::TokenGroups::uniform(1, 81));
    for (const auto& o : out) EXPECT_EQ(o.shape(), (ad::Shape{81, 50}));
}

TEST(Teacher, DefaultLayoutHasExpectedParameterCount) {
    const std::size_t b = 50, h = 1000;
    auto layout = nn::make_layout(nn::ModelSpec::teacher(b));
    const std::size_t per_block = 4 * (h * h + h) + 2 * (h * h + h) + 4 * h;
    EXPECT_EQ(layout.count(), (b * h + h) + 3 * per_block + 3 * (h * b + b));
    EXPECT_EQ(layout.at("block2.attn.q.w").shape, (ad::Shape{1000, 1000}));
}

TEST(Teacher, ZeroReadoutHeadsGiveZeroOutputs) {
    auto params = nn::init_params(2, small_teacher(6));
    for (const char* head : {"head1", "head2", "head3"}) {
        auto& w = params.at(std::string(head) + ".w").values;
        std::fill(w.begin(), w.end(), 0.0);
    }
    nn::Bound p(params, nullptr);
    std::mt19937_64 rng(2);
    auto x = ad::constant({20, 6}, random_vector(rng, 120, -3.0, 3.0));
    for (const auto& o : nn::teacher_forward(p, x, ad::TokenGroups{{9, 11}}))
        for (double v : o.values()) EXPECT_EQ(v, 0.0);
}

TEST(Teacher, AttentionRowsSumToOne) {
    auto params = nn::init_params(3, small_teacher(5));
    nn::Bound p(params, nullptr);
    std::mt19937_64 rng(3);
    auto x = ad::constant({17, 5}, random_vector(rng, 85));
    nn::TeacherTrace trace;
    nn::teacher_forward(p, x, ad::TokenGroups{{8, 9}}, &trace);
    ASSERT_EQ(trace.attention.size(), 3u);
    for (const auto& block : trace.attention) {
        ASSERT_EQ(block.per_group_head.size(), 4u);  // 2 groups x 2 heads
        for (const auto& probs : block.per_group_head) {
            const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(probs.size()))));
            for (std::size_t r = 0; r < g; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < g; ++c) s += probs[r * g + c];
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
        }
    }
}

TEST(Teacher, PermutationEquivariantWithinGroup) {
    auto params = nn::init_params(4, small_teacher(4));
    nn::Bound p(params, nullptr);
    std::mt19937_64 rng(4);
    const std::size_t t = 12, b = 4;
    auto xv = random_vector(rng, t * b);
    std::vector<std::size_t> perm(t);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> xp(t * b);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < b; ++j) xp[i * b + j] = xv[perm[i] * b + j];

    auto groups = ad::TokenGroups::uniform(1, t);
    auto base = nn::teacher_forward(p, ad::constant({t, b}, xv), groups);
    auto permuted = nn::teacher_forward(p, ad::constant({t, b}, xp), groups);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < b; ++j)
                EXPECT_NEAR(permuted[k].values()[i * b + j], base[k].values()[perm[i] * b + j], 1e-12);
}

TEST(Teacher, GroupsDoNotInteract) {
    auto params = nn::init_params(5, small_teacher(3));
    nn::Bound p(params, nullptr);
    std::mt19937_64 rng(5);
    auto xv = random_vector(rng, 10 * 3);
    auto a = nn::teacher_forward(p, ad::constant({10, 3}, xv), ad::TokenGroups{{4, 6}});
    xv[5 * 3 + 1] += 7.0;  // perturb a token of the second group
    auto b = nn::teacher_forward(p, ad::constant({10, 3}, xv), ad::TokenGroups{{4, 6}});
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < 4 * 3; ++i) EXPECT_EQ(a[k].values()[i], b[k].values()[i]);
}

TEST(Teacher, RejectsBandMismatch) {
    nn::Bound p(nn::init_params(1, small_teacher(4)), nullptr);
    EXPECT_THROW(nn::teacher_forward(p, ad::zeros({9, 5}), ad::TokenGroups::uniform(1, 9)), DimensionError);
}

TEST(Teacher, InputGradientMatchesFiniteDifferences) {
    auto params = nn::init_params(6, small_teacher(3));
    nn::Bound p(params, nullptr);
    std::mt19937_64 rng(6);
    auto build = [&](const std::vector<ad::Tensor>& in) {
        auto out = nn::teacher_forward(p, in[0], ad::TokenGroups{{3, 4}});
        return ad::add(ad::add(ad::sum(ad::square(ad::sub(out[0], in[0]))), ad::sum(ad::square(out[1]))),
                       ad::sum(ad::square(ad::sub(out[2], in[0]))));
    };
    EXPECT_LT(stad::testing::gradient_error(build, {{7, 3}}, {random_vector(rng, 21)}), 1e-5);
}

TEST(Teacher, TiledImageMatchesSingleGroupWhenOneTile) {
    auto params = nn::init_params(7, small_teacher(3));
    nn::Bound p(params, nullptr);
    std::mt19937_64 rng(7);
    auto x = ad::constant({20, 3}, random_vector(rng, 60));
    auto direct = nn::teacher_forward(p, x, ad::TokenGroups::uniform(1, 20));
    auto tiled = nn::teacher_forward_image(p, x, 4, 5, 32);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(vals(direct[k]), vals(tiled[k]));
}

TEST(Tiling, CoversEveryPixelOnceWithBoundedTiles) {
    auto t = nn::make_tiling(70, 45, 32);
    EXPECT_EQ(t.groups.sizes, (std::vector<std::size_t>{32 * 32, 32 * 13, 32 * 32, 32 * 13, 6 * 32, 6 * 13}));
    auto sorted = t.order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
    for (std::size_t i = 0; i < t.order.size(); ++i) EXPECT_EQ(t.inverse[t.order[i]], i);
}

TEST(Student, OutputShapesMatchInput) {
    nn::Bound p(nn::init_params(1, nn::ModelSpec::student(50)), nullptr);
    std::mt19937_64 rng(8);
    auto x = ad::constant({50, 9, 9}, random_vector(rng, 50 * 81, 0.0, 1.0));
    for (const auto& o : nn::student_forward(p, x)) EXPECT_EQ(o.shape(), (ad::Shape{50, 9, 9}));
}

TEST(Student, ZeroWeightsGiveZeroOutputs) {
    nn::Bound p(nn::make_layout(nn::ModelSpec::student(5, 7)), nullptr);
    std::mt19937_64 rng(9);
    auto x = ad::constant({5, 4, 6}, random_vector(rng, 120));
    for (const auto& o : nn::student_forward(p, x))
        for (double v : o.values()) EXPECT_EQ(v, 0.0);
}

TEST(Student, RejectsTinyImagesAndBandMismatch) {
    nn::Bound p(nn::init_params(1, nn::ModelSpec::student(3, 4)), nullptr);
    EXPECT_THROW(nn::student_forward(p, ad::zeros({3, 2, 5})), DimensionError);
    EXPECT_THROW(nn::student_forward(p, ad::zeros({4, 5, 5})), DimensionError);
}

TEST(Student, ThirdBlockGradientMatchesFiniteDifferences) {
    auto params = nn::init_params(10, nn::ModelSpec::student(3, 6));
    // nonzero biases so every relu branch is exercised
    std::mt19937_64 rng(10);
    for (auto& e : params.entries())
        if (e.role == nn::ParamRole::kBias) e.values = random_vector(rng, e.values.size(), -0.2, 0.2);
    nn::Bound p(params, nullptr);
    auto build = [&](const std::vector<ad::Tensor>& in) {
        auto out = nn::student_forward(p, in[0]);
        return ad::sum(ad::square(ad::sub(out[2], in[0])));
    };
    EXPECT_LT(stad::testing::gradient_error(build, {{3, 4, 4}}, {random_vector(rng, 48)}), 1e-5);
}

TEST(Student, ParameterGradientsMatchFiniteDifferences) {
    auto params = nn::init_params(11, nn::ModelSpec::student(2, 3));
    std::mt19937_64 rng(11);
    auto x = ad::constant({2, 3, 3}, random_vector(rng, 18));
    ad::Tape tape;
    nn::Bound p(params, &tape);
    auto loss_of = [&](const nn::Bound& b) {
        auto out = nn::student_forward(b, x);
        return ad::add(ad::add(ad::sum(ad::square(out[0])), ad::sum(ad::square(out[1]))), ad::sum(ad::square(out[2])));
    };
    tape.backward(loss_of(p));
    auto grads = p.gradients(params);
    for (std::size_t i = 0; i < params.entries().size(); ++i) {
        auto f = [&](const std::vector<double>& v) {
            auto moved = params;
            moved.entries()[i].values = v;
            return loss_of(nn::Bound(moved, nullptr)).item();
        };
        auto fd = stad::testing::central_difference(f, params.entries()[i].values);
        EXPECT_LT(stad::testing::relative_error(grads.entries()[i].values, fd), 1e-5) << params.entries()[i].name;
    }
}

TEST(Tokens, ChannelsAndTokensAreInverse) {
    std::mt19937_64 rng(12);
    auto v = random_vector(rng, 3 * 4 * 5);
    auto x = ad::constant({3, 4, 5}, v);
    auto tok = nn::channels_to_tokens(x);
    EXPECT_EQ(tok.shape(), (ad::Shape{20, 3}));
    EXPECT_EQ(tok.values()[7 * 3 + 2], v[2 * 20 + 7]);
    EXPECT_EQ(vals(nn::tokens_to_channels(tok, 4, 5)), v);
}

TEST(InitParams, DeterministicPerSeed) {
    for (auto spec : {small_teacher(5), nn::ModelSpec::student(5, 10)}) {
        auto a = nn::init_params(42, spec), b = nn::init_params(42, spec);
        for (std::size_t i = 0; i < a.entries().size(); ++i) EXPECT_EQ(a.entries()[i].values, b.entries()[i].values);
    }
}

TEST(InitParams, GlorotBoundsZeroBiasesUnitGains) {
    auto p = nn::init_params(3, nn::ModelSpec::teacher(10, 40, 2));
    for (const auto& e : p.entries()) {
        for (double v : e.values) {
            switch (e.role) {
                case nn::ParamRole::kWeight: EXPECT_LE(std::abs(v), e.glorot_limit()); break;
                case nn::ParamRole::kBias: EXPECT_EQ(v, 0.0); break;
                case nn::ParamRole::kGain: EXPECT_EQ(v, 1.0); break;
            }
        }
    }
    EXPECT_DOUBLE_EQ(p.at("proj.w").glorot_limit(), std::sqrt(6.0 / 50.0));
    auto s = nn::make_layout(nn::ModelSpec::student(20));
    EXPECT_DOUBLE_EQ(s.at("conv1.k").glorot_limit(), std::sqrt(6.0 / (20 * 9 + 100 * 9)));
}

TEST(InitParams, DifferentSeedsDifferAlmostEverywhere) {
    for (auto spec : {nn::ModelSpec::teacher(10, 40, 2), nn::ModelSpec::student(10)}) {
        auto a = nn::init_params(1, spec), b = nn::init_params(2, spec);
        std::size_t total = 0, differ = 0;
        for (std::size_t i = 0; i < a.entries().size(); ++i) {
            if (a.entries()[i].role != nn::ParamRole::kWeight) continue;
            for (std::size_t j = 0; j < a.entries()[i].values.size(); ++j) {
                ++total;
                differ += a.entries()[i].values[j] != b.entries()[i].values[j];
            }
        }
        EXPECT_GE(static_cast<double>(differ), 0.99 * static_cast<double>(total));
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto dir = scratch("roundtrip");
    nn::Checkpoint ck;
    ck.params = nn::init_params(5, small_teacher(4));
    ck.ema = nn::init_params(6, small_teacher(4));
    ck.adam_m = nn::init_params(7, small_teacher(4));
    ck.adam_v = nn::init_params(8, small_teacher(4));
    ck.adam_step = 17;
    ck.seed = 5;
    ck.meta = {{"epoch", 3}};
    nn::save_checkpoint(ck, dir / "teacher.json");
    auto back = nn::load_checkpoint(dir / "teacher.json");
    EXPECT_EQ(back.params.spec(), ck.params.spec());
    EXPECT_EQ(back.adam_step, 17u);
    EXPECT_EQ(back.meta.at("epoch"), 3);
    ASSERT_TRUE(back.ema && back.adam_m && back.adam_v);
    for (std::size_t i = 0; i < ck.params.entries().size(); ++i) {
        EXPECT_EQ(back.params.entries()[i].values, ck.params.entries()[i].values);
        EXPECT_EQ(back.ema->entries()[i].values, ck.ema->entries()[i].values);
        EXPECT_EQ(back.adam_v->entries()[i].values, ck.adam_v->entries()[i].values);
    }
    EXPECT_EQ(&back.inference(), &*back.ema);
}

TEST(Checkpoint, ParamsOnlyAndCorruptPayload) {
    auto dir = scratch("corrupt");
    nn::Checkpoint ck;
    ck.params = nn::init_params(1, nn::ModelSpec::student(3, 4));
    nn::save_checkpoint(ck, dir / "s.json");
    auto back = nn::load_checkpoint(dir / "s.json");
    EXPECT_FALSE(back.ema.has_value());
    EXPECT_EQ(&back.inference(), &back.params);

    std::filesystem::resize_file(dir / "s.f64", 16);
    EXPECT_THROW(nn::load_checkpoint(dir / "s.json"), IoError);
    EXPECT_THROW(nn::load_checkpoint(dir / "missing.json"), IoError);
}
