#pragma once

#include <span>
#include <vector>

#include "srunmix/geometry.hpp"
#include "srunmix/model_fit.hpp"
#include "srunmix/raster.hpp"

namespace srunmix {

enum class ProximityMode {
    literal,     // p = |S_b - S_beta| / max_alpha |S_b - S_alpha|
    complement,  // 1 - p
};

enum class Ablation {
    none,
    no_shared_values,     // ratio sharpening on upsampled pixel values, no lattice
    no_ratio_sharpening,  // q_bar = 1
    uniform_weights,      // W = 1/4 and S^opt = S^ini (applied when the model is built)
};

const char* to_string(ProximityMode mode);
const char* to_string(Ablation ablation);

struct SharpeningOptions {
    double epsilon_fraction = 1e-6;  // reflectance floor, as a fraction of the band's range width
    double q_min = 0.1;
    double q_max = 10.0;
    ProximityMode proximity = ProximityMode::literal;
    Ablation ablation = Ablation::none;

    double epsilon_for(const ValueRange& r) const { return epsilon_fraction * r.width(); }
};

/// S^fit_b: each shared value predicted from the low-resolution neighbourhood.
/// Points whose coefficients are invalid, or with missing neighbours, take the
/// mean of their valid neighbours.
LatticeGrid estimate_shared(const NeighborCoeffs& coeffs, const BandGrid& low_band);

/// q_beta = S^opt_beta / max(S^fit_beta, eps), clamped to [q_min, q_max].
std::vector<LatticeGrid> sharpening_ratios(const MixingModel& model, const NeighborCoeffs& coeffs,
                                           std::span<const BandGrid> low_down, const SharpeningOptions& opts);

/// Normalized spectral proximity of each high band to the low band, per lattice point.
/// All weights are 1 where the largest discrepancy is below `epsilon`.
std::vector<LatticeGrid> proximity_weights(const LatticeGrid& fit_low, std::span<const LatticeGrid> fit_high,
                                           double epsilon, ProximityMode mode = ProximityMode::literal);

/// Proximity-weighted geometric mean of the ratios, clamped to [q_min, q_max].
LatticeGrid average_ratio(std::span<const LatticeGrid> q, std::span<const LatticeGrid> p, double q_min = 0.1,
                          double q_max = 10.0);

/// Mixes corner shared values with the per-pixel weights. Pixels with an
/// invalid corner use the remaining corners renormalized; none left means invalid.
BandGrid reconstruct(std::span<const double> weights, int width, int height, const LatticeGrid& shared);

/// Rescales every factor x factor block so its mean equals the low-resolution
/// pixel: multiplicative when the block mean is away from zero, additive
/// otherwise. Values are then clamped to the band range and the remaining
/// mean error is redistributed over the unsaturated cells.
BandGrid rescale_to_reflectance(const BandGrid& high, const BandGrid& low_band, int factor, double epsilon);

/// Everything derived from the high-resolution bands that is shared by all
/// low-resolution bands of a pass.
struct UnmixContext {
    MixingModel model;
    NeighborCoeffs coeffs;
    std::vector<BandGrid> high_bands;       // H^o
    std::vector<BandGrid> low_down;         // L^d
    std::vector<LatticeGrid> fit_high;      // S^fit_beta
    std::vector<LatticeGrid> ratios;        // q_beta
};

UnmixContext prepare_unmix(MixingModel model, NeighborCoeffs coeffs, std::vector<BandGrid> high_bands,
                           std::vector<BandGrid> low_down, const SharpeningOptions& opts);

/// Full unmixing of one low-resolution band onto the high-resolution grid.
BandGrid superresolve_band(const UnmixContext& ctx, const BandGrid& low_band, const SharpeningOptions& opts);

/// Convenience form for one-off calls. `high_bands` is only read by the
/// no-shared-values ablation.
BandGrid superresolve_band(const MixingModel& model, const NeighborCoeffs& coeffs, std::span<const BandGrid> low_down,
                           const BandGrid& low_band, const SharpeningOptions& opts,
                           std::span<const BandGrid> high_bands = {});

}  // namespace srunmix
