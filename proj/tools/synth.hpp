#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "srunmix/raster.hpp"

namespace srunmix::synth {

enum class Kind { polygons, steps, gradients };

Kind parse_kind(const std::string& text);
const char* to_string(Kind kind);

struct Spec {
    Kind kind = Kind::polygons;
    int width = 64;   // high-resolution pixels
    int height = 64;
    int high_bands = 4;
    int low_bands = 2;
    int factor = 2;
    int materials = 6;
    double noise = 0.0;  // standard deviation added to every observed band
    std::uint64_t seed = 1;
    bool sentinel2 = false;  // full 10/20/60 m band complement instead of high/low counts

    void validate() const;
};

/// A generated scene plus the hidden high-resolution version of each low band.
struct Scene {
    SceneManifest manifest;
    std::vector<BandGrid> truth;                   // one per manifest low band, same order
    std::vector<std::vector<double>> truth_mixes;  // high-band coefficients of each truth (generic mode)
};

/// Builds a scene from sub-pixel abundance maps of a few materials; every
/// pixel is a linear mix of material reflectances, as in the mixing model.
Scene generate(const Spec& spec);

/// Writes manifest.json, band files and truth/ under `dir`.
void write(const Scene& scene, const std::filesystem::path& dir);

/// Reads truth.json written by `write`.
std::vector<BandGrid> load_truth(const std::filesystem::path& dir);

}  // namespace srunmix::synth
