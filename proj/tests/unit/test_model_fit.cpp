#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "srunmix/error.hpp"
#include "srunmix/model_fit.hpp"
#include "synth.hpp"
#include "test_support.hpp"

using namespace srunmix;
using srunmix::testing::random_band;
using srunmix::testing::TempDir;

namespace {

double rms_error(const MixingModel& m, const BandGrid& band, std::size_t b) {
    double acc = 0;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            const auto c = corner_indices(x, y);
            double h = 0;
            for (int k = 0; k < 4; ++k) h += m.weight(x, y, k) * m.shared[b].at(c[static_cast<std::size_t>(k)].x, c[static_cast<std::size_t>(k)].y);
            acc += (band.at(x, y) - h) * (band.at(x, y) - h);
        }
    }
    return std::sqrt(acc / static_cast<double>(band.size()));
}

std::vector<BandGrid> synthetic_high(std::uint64_t seed, int size = 32) {
    synth::Spec spec;
    spec.width = spec.height = size;
    spec.seed = seed;
    return synth::generate(spec).manifest.high_bands;
}

MixingModel hand_model(int w, int h, int factor, const std::vector<LatticeGrid>& shared) {
    MixingModel m;
    m.width = w;
    m.height = h;
    m.factor = factor;
    m.weights.assign(4 * static_cast<std::size_t>(w * h), 0.25);
    m.shared = shared;
    for (std::size_t b = 0; b < shared.size(); ++b) {
        m.band_ids.push_back("H" + std::to_string(b));
        m.ranges.push_back({0, 1});
    }
    return m;
}

}  // namespace

TEST(FitGeometry, ConstantBandsReconstructExactly) {
    std::vector<BandGrid> bands = {BandGrid::filled(8, 8, 0.3), BandGrid::filled(8, 8, 0.6)};
    const MixingModel m = fit_geometry(bands, 2, SolverOptions{});
    EXPECT_LE(m.objective, 1e-20);
    for (double w : m.weights) EXPECT_NEAR(w, 0.25, 1e-9);
}

TEST(FitGeometry, StepEdgeImprovesOnInitialization) {
    BandGrid g = BandGrid::filled(8, 8, 0.2);
    for (int y = 0; y < 8; ++y) {
        g.at(3, y) = 0.5;  // edge through the middle of column 3
        for (int x = 4; x < 8; ++x) g.at(x, y) = 0.8;
    }
    const std::vector<BandGrid> bands = {g};
    const MixingModel init = initial_model(bands, 2);
    const MixingModel fit = fit_geometry(bands, 2, SolverOptions{});
    EXPECT_LT(rms_error(fit, g, 0), rms_error(init, g, 0));
}

TEST(FitGeometry, DifferentSizesArePrecondition) {
    const std::vector<BandGrid> bands = {BandGrid::filled(8, 8, 0.3), BandGrid::filled(8, 6, 0.3)};
    EXPECT_THROW(fit_geometry(bands, 2, SolverOptions{}), PreconditionError);
    const std::vector<BandGrid> none;
    EXPECT_THROW(fit_geometry(none, 2, SolverOptions{}), PreconditionError);
    const std::vector<BandGrid> odd = {BandGrid::filled(9, 9, 0.3)};
    EXPECT_THROW(fit_geometry(odd, 2, SolverOptions{}), DimensionError);
}

TEST(FitGeometry, SimplexAndRangeInvariants) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto bands = synthetic_high(seed);
        const MixingModel m = fit_geometry(bands, 2, SolverOptions{});
        for (std::size_t p = 0; p < m.weights.size(); p += 4) {
            double sum = 0;
            for (int k = 0; k < 4; ++k) {
                EXPECT_GE(m.weights[p + static_cast<std::size_t>(k)], -1e-3);
                sum += m.weights[p + static_cast<std::size_t>(k)];
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
        for (std::size_t b = 0; b < m.shared.size(); ++b) {
            const double tol = 1e-3 * m.ranges[b].width();
            for (double v : m.shared[b].values) {
                EXPECT_GE(v, m.ranges[b].min - tol);
                EXPECT_LE(v, m.ranges[b].max + tol);
            }
        }
        EXPECT_LE(m.objective, m.initial_objective);
    }
}

TEST(FitGeometry, ObjectiveEqualsSumOfPerBandResiduals) {
    const auto bands = synthetic_high(4, 16);
    const MixingModel m = fit_geometry(bands, 2, SolverOptions{});
    double total = 0;
    for (std::size_t b = 0; b < bands.size(); ++b) {
        const double r = rms_error(m, bands[b], b);
        total += r * r * static_cast<double>(bands[b].size());
    }
    EXPECT_NEAR(m.objective, total, 1e-12 * std::max(1.0, total));
}

TEST(FitGeometry, ReconstructionIsReflectanceConsistent) {
    const auto bands = synthetic_high(5);
    const MixingModel m = fit_geometry(bands, 2, SolverOptions{});
    for (std::size_t b = 0; b < bands.size(); ++b) {
        BandGrid rec = bands[b];
        for (int y = 0; y < m.height; ++y) {
            for (int x = 0; x < m.width; ++x) {
                const auto c = corner_indices(x, y);
                double h = 0;
                for (int k = 0; k < 4; ++k) h += m.weight(x, y, k) * m.shared[b].at(c[static_cast<std::size_t>(k)].x, c[static_cast<std::size_t>(k)].y);
                rec.at(x, y) = h;
            }
        }
        const BandGrid a = downsample(rec, 2);
        const BandGrid d = downsample(bands[b], 2);
        double acc = 0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += (a.values[i] - d.values[i]) * (a.values[i] - d.values[i]);
        EXPECT_LE(std::sqrt(acc / static_cast<double>(a.size())), 1e-3);
    }
}

TEST(FitGeometry, FactorThree) {
    synth::Spec spec;
    spec.width = spec.height = 24;
    spec.factor = 3;
    spec.high_bands = 8;
    const auto bands = synth::generate(spec).manifest.high_bands;
    const MixingModel m = fit_geometry(bands, 3, SolverOptions{});
    EXPECT_EQ(m.lattice().width, 25);
    EXPECT_LT(m.objective, m.initial_objective);
}

TEST(NeighborCoeffs, ConstantBandsGiveUniformCoefficients) {
    std::vector<LatticeGrid> shared;
    std::vector<BandGrid> low;
    const double values[] = {0.2, 0.4, 0.7};
    for (double c : values) {
        shared.push_back(LatticeGrid::filled(9, 9, c));
        low.push_back(BandGrid::filled(4, 4, c));
    }
    const MixingModel m = hand_model(8, 8, 2, shared);
    const NeighborCoeffs nc = fit_neighbor_coeffs(m, low, SolverOptions{});
    for (std::size_t li = 0; li < nc.lattice.size(); ++li) {
        ASSERT_TRUE(nc.valid[li]);
        const auto v = nc.at(li);
        for (double e : v) EXPECT_NEAR(e, 1.0 / static_cast<double>(v.size()), 1e-12);
    }
}

TEST(NeighborCoeffs, FullRankCornerMatchesExactSolve) {
    std::vector<LatticeGrid> shared;
    std::vector<BandGrid> low;
    for (std::uint64_t b = 0; b < 4; ++b) {
        low.push_back(random_band(2, 2, 10 + b));
        LatticeGrid s = LatticeGrid::filled(5, 5, 0.5);
        s.at(2, 2) = 0.1 + 0.2 * static_cast<double>(b);
        shared.push_back(s);
    }
    const MixingModel m = hand_model(4, 4, 2, shared);
    SolverOptions opts;
    opts.ridge_lambda = 1e-14;
    const NeighborCoeffs nc = fit_neighbor_coeffs(m, low, opts);
    const std::size_t li = nc.lattice.index(2, 2);
    ASSERT_EQ(nc.patterns[li].offsets.size(), 4u);
    Eigen::Matrix4d A;
    Eigen::Vector4d t;
    for (int b = 0; b < 4; ++b) {
        for (int c = 0; c < 4; ++c) {
            const auto& o = nc.patterns[li].offsets[static_cast<std::size_t>(c)];
            A(b, c) = low[static_cast<std::size_t>(b)].at(o.x, o.y);
        }
        t(b) = shared[static_cast<std::size_t>(b)].at(2, 2);
    }
    const Eigen::Vector4d exact = A.fullPivLu().solve(t);
    const auto v = nc.at(li);
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(v[static_cast<std::size_t>(c)], exact(c), 1e-8);
}

TEST(NeighborCoeffs, InnerPointMatchesRegularizedNormalEquations) {
    std::vector<LatticeGrid> shared;
    std::vector<BandGrid> low;
    for (std::uint64_t b = 0; b < 4; ++b) {
        low.push_back(random_band(3, 3, 20 + b));
        LatticeGrid s = LatticeGrid::filled(7, 7, 0.5);
        s.at(3, 3) = 0.15 + 0.17 * static_cast<double>(b);
        shared.push_back(s);
    }
    const MixingModel m = hand_model(6, 6, 2, shared);
    const SolverOptions opts;
    const NeighborCoeffs nc = fit_neighbor_coeffs(m, low, opts);
    const std::size_t li = nc.lattice.index(3, 3);
    ASSERT_EQ(nc.patterns[li].kind, NeighborhoodKind::inner);
    ASSERT_EQ(nc.patterns[li].offsets.size(), 9u);
    // Oracle: normal equations (A^T A + lambda I) v = A^T t + lambda v0 by a dense solve.
    Eigen::MatrixXd A(4, 9);
    Eigen::VectorXd t(4);
    for (int b = 0; b < 4; ++b) {
        for (int c = 0; c < 9; ++c) {
            const auto& o = nc.patterns[li].offsets[static_cast<std::size_t>(c)];
            A(b, c) = low[static_cast<std::size_t>(b)].at(o.x, o.y);
        }
        t(b) = shared[static_cast<std::size_t>(b)].at(3, 3);
    }
    Eigen::MatrixXd N = A.transpose() * A + opts.ridge_lambda * Eigen::MatrixXd::Identity(9, 9);
    const Eigen::VectorXd rhs = A.transpose() * t + opts.ridge_lambda * Eigen::VectorXd::Constant(9, 1.0 / 9.0);
    const Eigen::VectorXd oracle = N.fullPivLu().solve(rhs);
    const auto v = nc.at(li);
    for (int c = 0; c < 9; ++c) EXPECT_NEAR(v[static_cast<std::size_t>(c)], oracle(c), 1e-10);
}

TEST(NeighborCoeffs, CountsMatchClippedNeighbourhoods) {
    const auto bands = synthetic_high(6, 12);
    const MixingModel m = fit_geometry(bands, 2, SolverOptions{});
    std::vector<BandGrid> low;
    for (const auto& b : bands) low.push_back(downsample(b, 2));
    const NeighborCoeffs nc = fit_neighbor_coeffs(m, low, SolverOptions{});
    for (int y = 0; y < nc.lattice.height; ++y) {
        for (int x = 0; x < nc.lattice.width; ++x) {
            const std::size_t li = nc.lattice.index(x, y);
            EXPECT_EQ(nc.patterns[li].offsets.size(), classify_shared(x, y, 2, 6, 6).offsets.size());
            for (double v : nc.at(li)) EXPECT_TRUE(std::isfinite(v));
        }
    }
}

TEST(NeighborCoeffs, Deterministic) {
    const auto bands = synthetic_high(7, 12);
    const MixingModel m = fit_geometry(bands, 2, SolverOptions{});
    std::vector<BandGrid> low;
    for (const auto& b : bands) low.push_back(downsample(b, 2));
    EXPECT_EQ(fit_neighbor_coeffs(m, low, SolverOptions{}).coeffs, fit_neighbor_coeffs(m, low, SolverOptions{}).coeffs);
}

TEST(ModelFile, RoundTrip) {
    TempDir dir("model");
    const auto bands = synthetic_high(8, 12);
    const MixingModel m = fit_geometry(bands, 2, SolverOptions{});
    save_model(m, dir / "m.srmx");
    const MixingModel r = load_model(dir / "m.srmx");
    EXPECT_EQ(r.width, m.width);
    EXPECT_EQ(r.factor, m.factor);
    EXPECT_EQ(r.band_ids, m.band_ids);
    ASSERT_EQ(r.weights.size(), m.weights.size());
    for (std::size_t i = 0; i < m.weights.size(); ++i) EXPECT_NEAR(r.weights[i], m.weights[i], 1e-6);
    for (std::size_t p = 0; p < r.weights.size(); p += 4) {
        EXPECT_NEAR(r.weights[p] + r.weights[p + 1] + r.weights[p + 2] + r.weights[p + 3], 1.0, 1e-15);
    }
    for (std::size_t b = 0; b < m.shared.size(); ++b) {
        for (std::size_t i = 0; i < m.shared[b].values.size(); ++i) {
            EXPECT_EQ(r.shared[b].values[i], static_cast<double>(static_cast<float>(m.shared[b].values[i])));
        }
    }
}

TEST(ModelFile, RejectsGarbage) {
    TempDir dir("model");
    std::ofstream(dir / "bad.srmx") << "SRMX2\n2\n{}";
    EXPECT_THROW(load_model(dir / "bad.srmx"), FormatError);
    std::ofstream(dir / "short.srmx") << "SRMX1\n100\n{}";
    EXPECT_THROW(load_model(dir / "short.srmx"), TruncationError);
}
