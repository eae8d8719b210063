#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "srunmix/error.hpp"
#include "srunmix/metrics.hpp"
#include "srunmix/model_fit.hpp"
#include "srunmix/unmix.hpp"
#include "synth.hpp"
#include "test_support.hpp"

using namespace srunmix;
using srunmix::testing::band_from;
using srunmix::testing::random_band;
using srunmix::testing::uniform;

namespace {

MixingModel flat_model(int w, int h, int factor, std::vector<double> values) {
    MixingModel m;
    m.width = w;
    m.height = h;
    m.factor = factor;
    m.weights.assign(4 * static_cast<std::size_t>(w * h), 0.25);
    for (std::size_t b = 0; b < values.size(); ++b) {
        m.band_ids.push_back("H" + std::to_string(b));
        m.ranges.push_back({0, 1});
        m.shared.push_back(LatticeGrid::filled(w + 1, h + 1, values[b]));
    }
    return m;
}

// Uniform coefficients on every lattice point of a w x h grid.
NeighborCoeffs uniform_coeffs(int w, int h, int factor) {
    const MixingModel m = flat_model(w, h, factor, {0.5});
    const std::vector<BandGrid> low = {BandGrid::filled(w / factor, h / factor, 0.5)};
    return fit_neighbor_coeffs(m, low, SolverOptions{});
}

struct Pipeline {
    MixingModel model;
    NeighborCoeffs coeffs;
    std::vector<BandGrid> low_down;
};

Pipeline build(const synth::Scene& scene, bool uniform_weights = false) {
    const auto& high = scene.manifest.high_bands;
    const int f = scene.manifest.factor;
    Pipeline p;
    p.model = uniform_weights ? initial_model(high, f) : fit_geometry(high, f, SolverOptions{});
    for (const auto& b : high) p.low_down.push_back(downsample(b, f));
    p.coeffs = fit_neighbor_coeffs(p.model, p.low_down, SolverOptions{});
    return p;
}

double relative_block_error(const BandGrid& out, const BandGrid& low, int factor) {
    const BandGrid back = block_mean(out, factor);
    double worst = 0;
    for (std::size_t i = 0; i < back.size(); ++i) {
        worst = std::max(worst, std::abs(back.values[i] - low.values[i]) / std::max(std::abs(low.values[i]), 1e-300));
    }
    return worst;
}

}  // namespace

TEST(EstimateShared, UniformCoefficientsAverageTheNeighbours) {
    const NeighborCoeffs nc = uniform_coeffs(4, 4, 2);
    const BandGrid low = band_from(2, 2, {1, 2, 3, 4});
    const LatticeGrid s = estimate_shared(nc, low);
    EXPECT_DOUBLE_EQ(s.at(2, 2), 2.5);
}

TEST(EstimateShared, ConstantBandGivesConstant) {
    const NeighborCoeffs nc = uniform_coeffs(8, 8, 2);
    const LatticeGrid s = estimate_shared(nc, BandGrid::filled(4, 4, 0.37));
    for (double v : s.values) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(EstimateShared, MiddlePointMatchesDotProduct) {
    NeighborCoeffs nc = uniform_coeffs(8, 8, 2);
    const std::size_t li = nc.lattice.index(2, 3);
    ASSERT_EQ(nc.patterns[li].kind, NeighborhoodKind::middle);
    ASSERT_EQ(nc.patterns[li].offsets.size(), 6u);
    std::mt19937_64 rng(5);
    for (std::size_t n = 0; n < 6; ++n) nc.coeffs[li * NeighborCoeffs::kMaxNeighbors + n] = uniform(rng, -1, 1);
    const BandGrid low = random_band(4, 4, 9);
    double expected = 0;
    for (std::size_t n = 0; n < 6; ++n) {
        const auto& o = nc.patterns[li].offsets[n];
        expected += nc.coeffs[li * NeighborCoeffs::kMaxNeighbors + n] * low.at(o.x, o.y);
    }
    EXPECT_NEAR(estimate_shared(nc, low).at(2, 3), expected, 1e-15);
}

TEST(EstimateShared, DimensionMismatch) {
    const NeighborCoeffs nc = uniform_coeffs(8, 8, 2);
    EXPECT_THROW(estimate_shared(nc, BandGrid::filled(3, 4, 0.1)), DimensionError);
}

TEST(SharpeningRatios, Examples) {
    const NeighborCoeffs nc = uniform_coeffs(4, 4, 2);
    const MixingModel m = flat_model(4, 4, 2, {0.5, 0.5, 0.3});
    const std::vector<BandGrid> low = {BandGrid::filled(2, 2, 0.5), BandGrid::filled(2, 2, 0.0),
                                       BandGrid::filled(2, 2, 0.6)};
    const auto q = sharpening_ratios(m, nc, low, SharpeningOptions{});
    ASSERT_EQ(q.size(), 3u);
    for (std::size_t i = 0; i < q[0].values.size(); ++i) {
        EXPECT_NEAR(q[0].values[i], 1.0, 1e-12);
        EXPECT_DOUBLE_EQ(q[1].values[i], 10.0);
        EXPECT_NEAR(q[2].values[i], 0.5, 1e-12);
    }
}

TEST(ProximityWeights, Examples) {
    auto point = [](double v) { return LatticeGrid::filled(1, 1, v); };
    {
        const std::vector<LatticeGrid> high = {point(0.5), point(0.7)};
        const auto p = proximity_weights(point(0.5), high, 1e-9);
        EXPECT_DOUBLE_EQ(p[0].values[0], 0.0);
        EXPECT_DOUBLE_EQ(p[1].values[0], 1.0);
    }
    {
        const std::vector<LatticeGrid> high = {point(0.3), point(0.3), point(0.3)};
        for (const auto& g : proximity_weights(point(0.3), high, 1e-9)) EXPECT_EQ(g.values[0], 1.0);
    }
    {
        const std::vector<LatticeGrid> high = {point(0.5), point(0.6), point(0.8)};
        const auto p = proximity_weights(point(0.4), high, 1e-9);
        const double expected[] = {0.1 / 0.4, 0.2 / 0.4, 0.4 / 0.4};
        for (int b = 0; b < 3; ++b) EXPECT_NEAR(p[static_cast<std::size_t>(b)].values[0], expected[b], 1e-12);
        const auto c = proximity_weights(point(0.4), high, 1e-9, ProximityMode::complement);
        for (int b = 0; b < 3; ++b) EXPECT_NEAR(c[static_cast<std::size_t>(b)].values[0], 1.0 - expected[b], 1e-12);
    }
}

TEST(AverageRatio, Examples) {
    auto point = [](double v) { return LatticeGrid::filled(1, 1, v); };
    {
        const std::vector<LatticeGrid> q = {point(1), point(1)}, p = {point(0.3), point(1)};
        EXPECT_DOUBLE_EQ(average_ratio(q, p).values[0], 1.0);
    }
    {
        const std::vector<LatticeGrid> q = {point(2), point(0.5)}, p = {point(1), point(1)};
        EXPECT_NEAR(average_ratio(q, p).values[0], 1.0, 1e-15);
    }
    {
        const std::vector<LatticeGrid> q = {point(2), point(4)}, p = {point(1), point(3)};
        const double oracle = std::exp((std::log(2.0) + 3 * std::log(4.0)) / 4);
        EXPECT_NEAR(average_ratio(q, p).values[0], oracle, 1e-14);
        EXPECT_NEAR(oracle, 3.3636, 1e-4);
    }
    {
        const std::vector<LatticeGrid> q = {point(50)}, p = {point(1)};
        EXPECT_DOUBLE_EQ(average_ratio(q, p).values[0], 10.0);
    }
}

TEST(Reconstruct, Examples) {
    LatticeGrid s = LatticeGrid::filled(2, 2, 0);
    s.values = {1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(reconstruct(std::vector<double>{1, 0, 0, 0}, 1, 1, s).values[0], 1.0);
    EXPECT_DOUBLE_EQ(reconstruct(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 1, 1, s).values[0], 2.5);
}

TEST(Reconstruct, RandomSimplexMatchesDotProduct) {
    std::mt19937_64 rng(11);
    const int w = 5, h = 4;
    LatticeGrid s = LatticeGrid::filled(w + 1, h + 1, 0);
    for (double& v : s.values) v = uniform(rng);
    std::vector<double> weights(4 * static_cast<std::size_t>(w * h));
    for (std::size_t p = 0; p < weights.size(); p += 4) {
        double sum = 0;
        for (int k = 0; k < 4; ++k) sum += weights[p + static_cast<std::size_t>(k)] = uniform(rng);
        for (int k = 0; k < 4; ++k) weights[p + static_cast<std::size_t>(k)] /= sum;
    }
    const BandGrid out = reconstruct(weights, w, h, s);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t p = 4 * static_cast<std::size_t>(y * w + x);
            const double oracle = weights[p] * s.at(x, y) + weights[p + 1] * s.at(x + 1, y) +
                                  weights[p + 2] * s.at(x, y + 1) + weights[p + 3] * s.at(x + 1, y + 1);
            EXPECT_NEAR(out.at(x, y), oracle, 1e-15);
        }
    }
}

TEST(Rescale, MultiplicativeExample) {
    BandGrid high = band_from(2, 2, {1, 2, 3, 4});
    high.range = {0, 10};
    BandGrid low = BandGrid::filled(1, 1, 5, {0, 10});
    const BandGrid out = rescale_to_reflectance(high, low, 2, 1e-6);
    EXPECT_EQ(out.values, (std::vector<double>{2, 4, 6, 8}));
}

TEST(Rescale, MatchingBlockUnchanged) {
    const BandGrid high = band_from(2, 2, {0.1, 0.2, 0.3, 0.4});
    const BandGrid low = BandGrid::filled(1, 1, 0.25);
    const BandGrid out = rescale_to_reflectance(high, low, 2, 1e-6);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.values[i], high.values[i], 1e-15);
}

TEST(Rescale, AdditiveFallbackNearZeroMean) {
    BandGrid high = band_from(2, 2, {-0.001, 0.001, 0, 0});
    high.range = {-1, 1};
    const BandGrid low = BandGrid::filled(1, 1, 0.2, {-1, 1});
    const BandGrid out = rescale_to_reflectance(high, low, 2, 1e-6);
    EXPECT_NEAR(out.values[0], 0.199, 1e-15);
    EXPECT_NEAR(out.values[1], 0.201, 1e-15);
    EXPECT_NEAR(out.values[2], 0.2, 1e-15);
}

TEST(Rescale, SaturatedCellsPushDeficitElsewhere) {
    const BandGrid high = band_from(2, 2, {0.1, 0.1, 0.1, 0.9});
    const BandGrid low = BandGrid::filled(1, 1, 0.6);
    const BandGrid out = rescale_to_reflectance(high, low, 2, 1e-6);
    double mean = 0;
    for (double v : out.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        mean += v / 4;
    }
    EXPECT_NEAR(mean, 0.6, 1e-14);
}

TEST(Rescale, ConservesRandomBlocks) {
    for (int factor : {2, 3}) {
        const BandGrid high = random_band(12, 12, 40 + static_cast<std::uint64_t>(factor));
        const BandGrid low = random_band(12 / factor, 12 / factor, 50 + static_cast<std::uint64_t>(factor), 0.1, 0.8);
        EXPECT_LE(relative_block_error(rescale_to_reflectance(high, low, factor, 1e-6), low, factor), 1e-12);
    }
}

TEST(Superresolve, ConstantScene) {
    const MixingModel m = flat_model(8, 8, 2, {0.3, 0.6});
    const std::vector<BandGrid> low_down = {BandGrid::filled(4, 4, 0.3), BandGrid::filled(4, 4, 0.6)};
    const NeighborCoeffs nc = fit_neighbor_coeffs(m, low_down, SolverOptions{});
    for (Ablation a : {Ablation::none, Ablation::no_ratio_sharpening, Ablation::uniform_weights}) {
        SharpeningOptions opts;
        opts.ablation = a;
        const BandGrid out = superresolve_band(m, nc, low_down, BandGrid::filled(4, 4, 0.45), opts);
        for (double v : out.values) EXPECT_NEAR(v, 0.45, 1e-12);
    }
}

TEST(Superresolve, BeatsNearestNeighbourOnLinearMixTruth) {
    synth::Spec spec;
    spec.seed = 2;
    const synth::Scene scene = synth::generate(spec);
    const Pipeline p = build(scene);
    for (std::size_t b = 0; b < scene.manifest.low_bands.size(); ++b) {
        const BandGrid& low = scene.manifest.low_bands[b];
        const BandGrid out = superresolve_band(p.model, p.coeffs, p.low_down, low, SharpeningOptions{});
        EXPECT_GT(q_index(scene.truth[b], out), q_index(scene.truth[b], upsample_nearest(low, 2)));
        EXPECT_LE(relative_block_error(out, low, 2), 1e-10);
        EXPECT_EQ(out.band_id, low.band_id);
    }
}

TEST(Superresolve, EveryAblationConservesReflectance) {
    synth::Spec spec;
    spec.width = spec.height = 24;
    spec.seed = 3;
    const synth::Scene scene = synth::generate(spec);
    const Pipeline p = build(scene);
    const Pipeline flat = build(scene, true);
    for (Ablation a : {Ablation::none, Ablation::no_shared_values, Ablation::no_ratio_sharpening,
                       Ablation::uniform_weights}) {
        SharpeningOptions opts;
        opts.ablation = a;
        const Pipeline& use = a == Ablation::uniform_weights ? flat : p;
        for (const auto& low : scene.manifest.low_bands) {
            const BandGrid out = superresolve_band(use.model, use.coeffs, use.low_down, low, opts,
                                                   scene.manifest.high_bands);
            EXPECT_LE(relative_block_error(out, low, 2), 1e-10) << to_string(a);
        }
    }
}

TEST(Superresolve, NoSharedNeedsHighBands) {
    const MixingModel m = flat_model(4, 4, 2, {0.3});
    const std::vector<BandGrid> low_down = {BandGrid::filled(2, 2, 0.3)};
    const NeighborCoeffs nc = fit_neighbor_coeffs(m, low_down, SolverOptions{});
    SharpeningOptions opts;
    opts.ablation = Ablation::no_shared_values;
    EXPECT_THROW(superresolve_band(m, nc, low_down, BandGrid::filled(2, 2, 0.4), opts), PreconditionError);
}

TEST(Superresolve, Deterministic) {
    synth::Spec spec;
    spec.width = spec.height = 24;
    const synth::Scene scene = synth::generate(spec);
    const Pipeline a = build(scene);
    const Pipeline b = build(scene);
    const auto& low = scene.manifest.low_bands[0];
    EXPECT_EQ(superresolve_band(a.model, a.coeffs, a.low_down, low, SharpeningOptions{}).values,
              superresolve_band(b.model, b.coeffs, b.low_down, low, SharpeningOptions{}).values);
}
