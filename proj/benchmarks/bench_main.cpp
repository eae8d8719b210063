#include <benchmark/benchmark.h>

#include <random>

#include "srunmix/model_fit.hpp"
#include "srunmix/parallel.hpp"
#include "srunmix/unmix.hpp"
#include "synth.hpp"

using namespace srunmix;

namespace {

synth::Scene scene(int size) {
    synth::Spec spec;
    spec.width = spec.height = size;
    spec.seed = 3;
    return synth::generate(spec);
}

void BM_FitGeometry(benchmark::State& state) {
    set_thread_count(1);
    const synth::Scene s = scene(static_cast<int>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(fit_geometry(s.manifest.high_bands, 2, SolverOptions{}).objective);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}
BENCHMARK(BM_FitGeometry)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_SolveRidge(benchmark::State& state) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    const Eigen::MatrixXd A = Eigen::MatrixXd::NullaryExpr(4, 9, [&] { return u(rng); });
    const Eigen::VectorXd t = Eigen::VectorXd::NullaryExpr(4, [&] { return u(rng); });
    const Eigen::VectorXd v0 = Eigen::VectorXd::Constant(9, 1.0 / 9);
    for (auto _ : state) benchmark::DoNotOptimize(solve_ridge(A, t, v0, 1e-3));
}
BENCHMARK(BM_SolveRidge);

void BM_SuperresolveBand(benchmark::State& state) {
    set_thread_count(1);
    const synth::Scene s = scene(static_cast<int>(state.range(0)));
    MixingModel model = fit_geometry(s.manifest.high_bands, 2, SolverOptions{});
    std::vector<BandGrid> low_down;
    for (const auto& b : s.manifest.high_bands) low_down.push_back(downsample(b, 2));
    NeighborCoeffs coeffs = fit_neighbor_coeffs(model, low_down, SolverOptions{});
    const UnmixContext ctx = prepare_unmix(std::move(model), std::move(coeffs), s.manifest.high_bands,
                                           std::move(low_down), SharpeningOptions{});
    for (auto _ : state) {
        benchmark::DoNotOptimize(superresolve_band(ctx, s.manifest.low_bands[0], SharpeningOptions{}).values.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}
BENCHMARK(BM_SuperresolveBand)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
