#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "srunmix/geometry.hpp"
#include "srunmix/raster.hpp"
#include "srunmix/solver.hpp"

namespace srunmix {

/// Band-independent sub-pixel weights plus per-band shared values,
/// learned from the high-resolution bands.
struct MixingModel {
    int width = 0;   // high-resolution grid
    int height = 0;
    int factor = 2;
    std::vector<double> weights;  // W_{x,y,0..3}, 4 per pixel, row-major
    std::vector<std::string> band_ids;
    std::vector<ValueRange> ranges;
    std::vector<LatticeGrid> shared;  // S^opt per high-resolution band

    // Fit diagnostics.
    double objective = 0.0;          // sum over bands and pixels of (H^o - H^r)^2
    double initial_objective = 0.0;
    int iterations = 0;
    int cg_iterations = 0;

    SharedLattice lattice() const { return SharedLattice::for_high(width, height, factor); }
    double weight(int x, int y, int k) const {
        return weights[4 * (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) +
                       static_cast<std::size_t>(k)];
    }
};

/// Jointly fits W (shared by every band) and one S grid per band, starting
/// from W = 1/4 and S = S^ini.
MixingModel fit_geometry(std::span<const BandGrid> high_bands, int factor, const SolverOptions& opts);

/// The starting point of fit_geometry without any optimization (W = 1/4, S = S^ini).
MixingModel initial_model(std::span<const BandGrid> high_bands, int factor);

/// Sum of squared reconstruction errors of `model` against the bands.
double model_objective(const MixingModel& model, std::span<const BandGrid> high_bands);

/// Linear predictor of each shared value from its low-resolution neighbourhood.
struct NeighborCoeffs {
    SharedLattice lattice;
    int low_width = 0;
    int low_height = 0;
    std::vector<NeighborhoodPattern> patterns;  // per lattice point, clipped and filtered to usable neighbours
    std::vector<double> coeffs;                 // kMaxNeighbors slots per lattice point
    std::vector<std::uint8_t> valid;

    static constexpr std::size_t kMaxNeighbors = 9;

    std::span<const double> at(std::size_t lattice_index) const {
        return {coeffs.data() + lattice_index * kMaxNeighbors, patterns[lattice_index].offsets.size()};
    }
};

/// Fits V by one ridge problem per lattice point, one equation per high band.
/// `low_down` must be the downsampled high bands, in the model's band order.
NeighborCoeffs fit_neighbor_coeffs(const MixingModel& model, std::span<const BandGrid> low_down,
                                   const SolverOptions& opts);

/// Model cache container: "SRMX1" line, JSON index length, JSON index, then
/// float32 little-endian payloads (weights, then each shared grid).
void save_model(const MixingModel& model, const std::filesystem::path& path);
MixingModel load_model(const std::filesystem::path& path);

}  // namespace srunmix
