#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "srunmix/raster.hpp"
#include "srunmix/solver.hpp"
#include "srunmix/unmix.hpp"

namespace srunmix {

struct BandInfo {
    std::string id;
    double wavelength_nm = 0.0;
    double bandwidth_nm = 0.0;
    double pixel_size_m = 0.0;
};

/// Built-in Sentinel-2 MSI band table (2A and 2B share it).
std::span<const BandInfo> sentinel2_bands();
const BandInfo* find_sentinel2_band(const std::string& id);

struct PipelineOptions {
    int tile_size = 128;     // in pixels of the first low-resolution class
    int tile_overlap = 8;
    SolverOptions solver;
    SharpeningOptions sharpening;
    std::vector<std::string> bands;  // low-resolution bands to produce; empty means all
    std::optional<std::filesystem::path> model_cache_dir;

    void validate() const;
};

struct PassSummary {
    std::string name;
    int factor = 2;
    std::size_t high_bands = 0;
    std::size_t low_bands = 0;
    double initial_objective = 0.0;
    double objective = 0.0;
    int iterations = 0;
    int cg_iterations = 0;
    bool model_from_cache = false;
    double fit_seconds = 0.0;
    double unmix_seconds = 0.0;
};

struct TileReport {
    int index = 0;
    int x0 = 0;  // core window, high-resolution pixels
    int y0 = 0;
    int width = 0;
    int height = 0;
    double seam_max_abs = 0.0;  // disagreement with neighbouring cores on the discarded margins
};

struct SceneResult {
    std::vector<BandGrid> outputs;  // at the high resolution, in manifest order
    std::vector<PassSummary> passes;
    std::vector<TileReport> tiles;
    std::vector<std::string> warnings;
    double seconds = 0.0;
};

/// Super-resolves every requested low-resolution band of the manifest to the
/// high resolution in one piece. Bands six times coarser than the high grid go
/// through a x3 pass (20 m class plus the x2-downsampled high bands as
/// constraints) and then the x2 pass.
SceneResult superresolve_scene(const SceneManifest& manifest, const PipelineOptions& opts);

/// Same result assembled from overlapping tiles. Tile edges follow the
/// coarsest low-resolution grid, so every block stays inside one tile core.
SceneResult run_tiled(const SceneManifest& manifest, const PipelineOptions& opts);

}  // namespace srunmix
