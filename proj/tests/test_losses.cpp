#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "capseg/losses.hpp"
#include "capseg/morphology.hpp"
#include "support.hpp"

using namespace capseg;
using namespace capseg::testing;

namespace {

const double kLn2 = std::numbers::ln2;

LossConfig exact_cfg() {
    LossConfig c;
    c.epsilon = 0.0;
    return c;
}

Mask half_ones(std::size_t rows, std::size_t cols) {
    Mask m(rows, cols);
    for (std::size_t i = 0; i < m.size() / 2; ++i) m[i] = 1;
    return m;
}

}  // namespace

TEST(Logistic, KnownValues) {
    const auto p = logistic_probabilities(RealGrid(1, 3, std::vector<double>{0.0, 20.0, std::log(3.0)}));
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_NEAR(p[1], 1.0, 1e-8);
    EXPECT_NEAR(p[2], 0.75, 1e-15);
}

TEST(Logistic, StrictlyInsideUnitIntervalAndMonotone) {
    RealGrid z(1, 41);
    for (int i = 0; i < 41; ++i) z[i] = -30.0 + 1.5 * i;
    const auto p = logistic_probabilities(z);
    for (std::size_t i = 0; i < p.size(); ++i) {
        EXPECT_GT(p[i], 0.0);
        EXPECT_LT(p[i], 1.0);
        if (i) {
            EXPECT_GE(p[i], p[i - 1]);
        }
    }
}

TEST(Logistic, RejectsNonFinite) {
    EXPECT_THROW(logistic_probabilities(RealGrid(1, 1, std::vector<double>{NAN})), InvalidInput);
    EXPECT_THROW(logistic_probabilities(RealGrid(1, 1, std::vector<double>{INFINITY})), InvalidInput);
}

TEST(FocalMap, HandValues) {
    LossConfig c = exact_cfg();
    RealGrid probs(1, 3, std::vector<double>{1.0, 0.5, 0.5});
    Mask t(1, 3, std::vector<std::uint8_t>{1, 1, 0});
    auto m = focal_loss_map(probs, t, c);
    EXPECT_EQ(m[0], 0.0);
    EXPECT_NEAR(m[1], 0.25 * kLn2, 1e-15);
    EXPECT_NEAR(m[1], 0.17329, 1e-5);
    c.gamma_f = 0.0;
    m = focal_loss_map(probs, t, c);
    EXPECT_NEAR(m[2], kLn2, 1e-15);
}

TEST(FocalMap, MatchesDirectFormula) {
    std::mt19937_64 rng(11);
    LossConfig c;
    c.beta = 0.7;
    c.gamma_f = 1.5;
    const auto probs = random_grid(rng, 6, 7, 0.01, 0.99);
    const auto t = random_mask(rng, 6, 7, 0.5);
    const auto m = focal_loss_map(probs, t, c);
    for (std::size_t i = 0; i < m.size(); ++i)
        EXPECT_NEAR(m[i], oracle_focal(probs[i], t[i], c.beta, c.gamma_f, c.epsilon), 1e-14);
}

TEST(FocalMap, ShapeMismatchThrows) {
    EXPECT_THROW(focal_loss_map(RealGrid(2, 2, 0.5), Mask(2, 3), LossConfig{}), InvalidInput);
}

TEST(HardRegion, IdenticalMasksGiveZero) {
    std::mt19937_64 rng(3);
    const auto m = random_mask(rng, 9, 9, 0.4);
    for (int k : {1, 3, 5, 7}) EXPECT_EQ(count_foreground(hard_region_map(m, m, k)), 0u);
}

TEST(HardRegion, CentrePixelKernel3) {
    Mask a(5, 5), b(5, 5);
    b(2, 2) = 1;
    const auto h = hard_region_map(a, b, 3);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(h(r, c), (r >= 1 && r <= 3 && c >= 1 && c <= 3) ? 1 : 0);
    EXPECT_EQ(h, oracle_dilate(mask_xor(a, b), 3));
}

TEST(HardRegion, KernelOneIsRawXor) {
    std::mt19937_64 rng(5);
    const auto a = random_mask(rng, 10, 12, 0.5), b = random_mask(rng, 10, 12, 0.5);
    EXPECT_EQ(hard_region_map(a, b, 1), mask_xor(a, b));
}

TEST(HardRegion, MatchesBruteForceDilation) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = random_mask(rng, 13, 11, 0.3), b = random_mask(rng, 13, 11, 0.3);
        for (int k : {1, 3, 5, 7, 9}) EXPECT_EQ(hard_region_map(a, b, k), oracle_dilate(mask_xor(a, b), k));
    }
}

TEST(HardRegion, MonotoneInKernelAndSupersetOfXor) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        const auto a = random_mask(rng, 16, 16, 0.1), b = random_mask(rng, 16, 16, 0.1);
        Mask prev = mask_xor(a, b);
        for (int k = 1; k <= 9; k += 2) {
            const auto h = hard_region_map(a, b, k);
            for (std::size_t i = 0; i < h.size(); ++i) ASSERT_GE(h[i], prev[i]);
            prev = h;
        }
    }
}

TEST(HardRegion, Errors) {
    EXPECT_THROW(hard_region_map(Mask(3, 3), Mask(3, 4), 3), InvalidInput);
    EXPECT_THROW(hard_region_map(Mask(3, 3), Mask(3, 3), 2), InvalidInput);
    EXPECT_THROW(hard_region_map(Mask(3, 3, 2), Mask(3, 3), 3), InvalidInput);
}

TEST(SampleDifficulty, Values) {
    EXPECT_DOUBLE_EQ(sample_difficulty(RealGrid(3, 3, 1.0)), 0.0);
    EXPECT_DOUBLE_EQ(sample_difficulty(RealGrid(3, 3, 0.0)), 1.0);
    EXPECT_NEAR(sample_difficulty(RealGrid(2, 2, std::vector<double>{0.2, 0.4, 0.6, 0.8})), 0.5, 1e-15);
    EXPECT_THROW(sample_difficulty(RealGrid()), InvalidInput);
}

TEST(AnnotationVariability, Values) {
    const Mask zero(4, 4), half = half_ones(4, 4);
    EXPECT_DOUBLE_EQ(annotation_variability(zero, half, VariabilityMode::literal), 0.0);
    EXPECT_DOUBLE_EQ(annotation_variability(half, zero, VariabilityMode::literal), 0.5);
    EXPECT_DOUBLE_EQ(annotation_variability(half, half, VariabilityMode::disagreement), 0.0);
    EXPECT_DOUBLE_EQ(annotation_variability(half, zero, VariabilityMode::disagreement), 0.5);
    EXPECT_THROW(annotation_variability(Mask(), Mask(), VariabilityMode::literal), InvalidInput);
}

TEST(AdaptiveGamma, SumAndClamp) {
    LossConfig c;
    EXPECT_DOUBLE_EQ(adaptive_gamma(0.5, 0.5, c), 1.0);
    EXPECT_DOUBLE_EQ(adaptive_gamma(0.0, 0.0, c), 0.05);
    EXPECT_DOUBLE_EQ(adaptive_gamma(1.0, 1.0, c), 2.0);
    EXPECT_DOUBLE_EQ(adaptive_gamma(0.3, 0.4, c), 0.7);
}

TEST(AdaptiveFocal, FourPixelWorkedExample) {
    const Mask masks(2, 2, std::vector<std::uint8_t>{1, 1, 0, 0});
    const RealGrid logits(2, 2, 0.0);
    const auto r = adaptive_focal_loss(logits, masks, masks, exact_cfg());
    const auto& b = r.breakdown;
    EXPECT_EQ(b.n_pixels, 4u);
    EXPECT_EQ(count_foreground(b.hard_map), 0u);
    EXPECT_EQ(count_foreground(b.easy_map), 4u);
    EXPECT_DOUBLE_EQ(b.sample_difficulty, 0.5);
    EXPECT_DOUBLE_EQ(b.annotation_variability, 0.5);
    EXPECT_DOUBLE_EQ(b.gamma_a, 1.0);
    EXPECT_NEAR(r.value, 0.25 * kLn2, 1e-12);
    EXPECT_NEAR(b.recompute_total(), r.value, 1e-12);
}

TEST(AdaptiveFocal, PerfectPredictionTendsToZero) {
    std::mt19937_64 rng(2);
    const auto m = random_mask(rng, 8, 8, 0.5);
    RealGrid z(8, 8);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = m[i] ? 40.0 : -40.0;
    EXPECT_LT(adaptive_focal_loss(z, m, m, exact_cfg()).value, 1e-30);
}

TEST(AdaptiveFocal, PartitionAndBreakdownProperties) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        LossConfig c;
        c.kernel_size = 1 + 2 * static_cast<int>(rng() % 4);
        c.variability_mode = trial % 2 ? VariabilityMode::disagreement : VariabilityMode::literal;
        const auto z = random_grid(rng, 8, 8, -4, 4);
        const auto e = random_blobs(rng, 8, 8, 2), n = random_blobs(rng, 8, 8, 2);
        const auto r = adaptive_focal_loss(z, e, n, c);
        const auto& b = r.breakdown;
        for (std::size_t i = 0; i < b.hard_map.size(); ++i) ASSERT_EQ(b.hard_map[i] + b.easy_map[i], 1);
        EXPECT_GE(b.hard_loss, 0.0);
        EXPECT_GE(b.easy_loss, 0.0);
        EXPECT_GE(r.value, 0.0);
        EXPECT_GE(b.gamma_a, c.gamma_min);
        EXPECT_LE(b.gamma_a, c.gamma_max);
        EXPECT_TRUE(std::isfinite(1.0 / b.gamma_a));
        EXPECT_NEAR(b.recompute_total(), r.value, 1e-12);
        EXPECT_EQ(b.n_pixels, z.size());

        const auto unit = adaptive_focal_loss(z, e, n, c, 1.0);
        EXPECT_NEAR(unit.value, oracle_mean_focal(z, e, c.beta, c.gamma_f, c.epsilon), 1e-9);
    }
}

TEST(AdaptiveFocal, RejectsBadInputs) {
    const Mask m(4, 4);
    EXPECT_THROW(adaptive_focal_loss(RealGrid(4, 4, NAN), m, m, LossConfig{}), InvalidInput);
    EXPECT_THROW(adaptive_focal_loss(RealGrid(4, 4), Mask(4, 4, 3), m, LossConfig{}), InvalidInput);
    EXPECT_THROW(adaptive_focal_loss(RealGrid(4, 4), m, Mask(4, 5), LossConfig{}), InvalidInput);
}

TEST(StandardFocal, ConstantMapAndBceReduction) {
    const Mask ones(3, 3, 1);
    EXPECT_NEAR(standard_focal_loss(RealGrid(3, 3, 0.0), ones, exact_cfg()).value, 0.25 * kLn2, 1e-12);
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        LossConfig c;
        c.gamma_f = 0.0;
        c.beta = 1.0;
        const auto z = random_grid(rng, 8, 8, -5, 5);
        const auto t = random_mask(rng, 8, 8, 0.4);
        EXPECT_NEAR(standard_focal_loss(z, t, c).value, mean_bce(logistic_probabilities(z), t, c.epsilon), 1e-9);
    }
}

TEST(StandardFocal, PerfectPredictionTendsToZero) {
    const Mask t(2, 2, std::vector<std::uint8_t>{1, 0, 0, 1});
    RealGrid z(2, 2, std::vector<double>{50, -50, -50, 50});
    EXPECT_LT(standard_focal_loss(z, t, exact_cfg()).value, 1e-30);
}

TEST(AgBce, EqualWeightsIsMeanBce) {
    std::mt19937_64 rng(19);
    LossConfig c;
    c.hard_weight = c.easy_weight = 1.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto z = random_grid(rng, 8, 8, -5, 5);
        const auto e = random_mask(rng, 8, 8, 0.4), n = random_mask(rng, 8, 8, 0.4);
        EXPECT_NEAR(ag_bce_loss(z, e, n, c).value, oracle_mean_bce(z, e, c.epsilon), 1e-9);
    }
}

TEST(AgBce, NoHardRegionScalesByEasyWeight) {
    std::mt19937_64 rng(23);
    LossConfig c;
    c.hard_weight = 7.0;
    c.easy_weight = 0.5;
    const auto z = random_grid(rng, 8, 8, -3, 3);
    const auto e = random_mask(rng, 8, 8, 0.5);
    EXPECT_NEAR(ag_bce_loss(z, e, e, c).value, 0.5 * oracle_mean_bce(z, e, c.epsilon), 1e-12);
}

TEST(AgBce, HardRegionWeighting) {
    std::mt19937_64 rng(29);
    LossConfig c;
    const auto z = random_grid(rng, 8, 8, -3, 3);
    const auto e = random_blobs(rng, 8, 8, 2), n = random_blobs(rng, 8, 8, 2);
    const auto hard = oracle_dilate(mask_xor(e, n), c.kernel_size);
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i)
        s += (hard[i] ? c.hard_weight : c.easy_weight) * oracle_focal(oracle_sigmoid(z[i]), e[i], 1, 0, c.epsilon);
    EXPECT_NEAR(ag_bce_loss(z, e, n, c).value, s / 64.0, 1e-12);
}

TEST(AgBce, PerfectPredictionTendsToZero) {
    const Mask e(2, 2, std::vector<std::uint8_t>{1, 0, 0, 1});
    const Mask n(2, 2, std::vector<std::uint8_t>{1, 1, 0, 1});
    RealGrid z(2, 2, std::vector<double>{50, -50, -50, 50});
    EXPECT_LT(ag_bce_loss(z, e, n, exact_cfg()).value, 1e-20);
}

TEST(DiceLoss, Values) {
    EXPECT_DOUBLE_EQ(dice_loss(RealGrid(3, 3, 1.0), Mask(3, 3, 1), 0.0).value, 0.0);
    EXPECT_DOUBLE_EQ(dice_loss(RealGrid(3, 3, 0.0), Mask(3, 3, 1), 0.0).value, 1.0);
    const Mask half = half_ones(4, 4);
    EXPECT_NEAR(dice_loss(to_real(half), half, 0.0).value, 0.0, 1e-15);
    EXPECT_THROW(dice_loss(RealGrid(2, 2), Mask(3, 3), 1.0), InvalidInput);
}

TEST(DiceLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(37);
    const auto z = random_grid(rng, 6, 6, -2, 2);
    const auto t = random_mask(rng, 6, 6, 0.5);
    const auto lv = dice_loss_logits(z, t, 1.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
        auto up = z, down = z;
        up[i] += 1e-5;
        down[i] -= 1e-5;
        const double num = (dice_loss_logits(up, t, 1.0).value - dice_loss_logits(down, t, 1.0).value) / 2e-5;
        EXPECT_NEAR(lv.grad[i], num, 1e-8);
    }
}

TEST(Losses, NonNegativeOnRandomInputs) {
    std::mt19937_64 rng(41);
    LossConfig c;
    for (int trial = 0; trial < 50; ++trial) {
        const auto z = random_grid(rng, 8, 8, -10, 10);
        const auto e = random_mask(rng, 8, 8, 0.3), n = random_mask(rng, 8, 8, 0.3);
        for (auto kind : {LossKind::adaptive_focal, LossKind::standard_focal, LossKind::ag_bce})
            EXPECT_GE(evaluate_loss(kind, z, e, n, c).value, 0.0);
        EXPECT_GE(dice_loss_logits(z, e).value, 0.0);
    }
}

TEST(Losses, LogitGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(43);
    LossConfig c;
    for (int trial = 0; trial < 10; ++trial) {
        const auto z = random_grid(rng, 8, 8, -3, 3);
        const auto e = random_blobs(rng, 8, 8, 2), n = random_blobs(rng, 8, 8, 2);
        const double gamma = adaptive_focal_loss(z, e, n, c).breakdown.gamma_a;
        const std::vector<std::function<LossValue(const RealGrid&)>> fns{
            [&](const RealGrid& x) {
                auto r = adaptive_focal_loss(x, e, n, c, gamma);
                return LossValue{r.value, r.grad};
            },
            [&](const RealGrid& x) { return standard_focal_loss(x, e, c); },
            [&](const RealGrid& x) { return ag_bce_loss(x, e, n, c); }};
        for (const auto& f : fns) {
            const auto g = f(z).grad;
            for (std::size_t i = 0; i < z.size(); ++i) {
                auto up = z, down = z;
                up[i] += 1e-4;
                down[i] -= 1e-4;
                const double num = (f(up).value - f(down).value) / 2e-4;
                EXPECT_LE(std::abs(num - g[i]), 1e-5 * std::max({std::abs(num), std::abs(g[i]), 1e-6}));
            }
        }
    }
}

TEST(LossConfig, Validation) {
    LossConfig c;
    EXPECT_NO_THROW(c.validate());
    auto bad = [](auto mutate) {
        LossConfig x;
        mutate(x);
        EXPECT_THROW(x.validate(), ConfigError);
    };
    bad([](LossConfig& x) { x.beta = 0; });
    bad([](LossConfig& x) { x.gamma_f = -1; });
    bad([](LossConfig& x) { x.epsilon = 1e-2; });
    bad([](LossConfig& x) { x.kernel_size = 4; });
    bad([](LossConfig& x) { x.gamma_min = 3; });
    bad([](LossConfig& x) { x.hard_weight = 0; });
}

TEST(LossKind, NamesRoundTrip) {
    for (auto k : {LossKind::adaptive_focal, LossKind::standard_focal, LossKind::ag_bce})
        EXPECT_EQ(parse_loss_kind(to_string(k)), k);
    EXPECT_FALSE(parse_loss_kind("dice").has_value());
}
