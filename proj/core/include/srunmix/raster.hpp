#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace srunmix {

struct ValueRange {
    double min = 0.0;
    double max = 1.0;

    double width() const { return max - min; }
    bool contains(double v) const { return v >= min && v <= max; }
    double clamp(double v) const { return v < min ? min : (v > max ? max : v); }
};

/// One band of reflectance values, row-major with the origin at the top-left.
/// Values are held in double precision whatever the on-disk precision.
struct BandGrid {
    int width = 0;
    int height = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> valid;  // 1 = valid
    std::string band_id;
    double wavelength_nm = 0.0;
    double pixel_size_m = 0.0;
    ValueRange range{};

    static BandGrid filled(int width, int height, double value, ValueRange range = {});

    std::size_t size() const { return values.size(); }
    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
    }
    double at(int x, int y) const { return values[index(x, y)]; }
    double& at(int x, int y) { return values[index(x, y)]; }
    bool is_valid(int x, int y) const { return valid[index(x, y)] != 0; }

    /// Copy of the metadata with a fresh value buffer of the given size.
    BandGrid like(int new_width, int new_height) const;

    bool all_valid() const;
};

/// Throws PreconditionError when storage sizes or value ranges are inconsistent.
void check_grid(const BandGrid& grid, int min_extent = 1);

struct LoadReport {
    std::size_t clamped = 0;
    std::size_t non_finite = 0;
};

/// Reads an SRB1 band file. Out-of-range values are clamped, non-finite values
/// are marked invalid; both are counted in `report` when given.
BandGrid load_band(const std::filesystem::path& path, LoadReport* report = nullptr);

/// Writes an SRB1 band file (float32 little-endian payload, NaN for invalid).
void save_band(const BandGrid& grid, const std::filesystem::path& path);

/// Block mean over valid cells for the two supported resolution factors.
BandGrid downsample(const BandGrid& grid, int factor);

/// Same block-mean operator for any positive integer factor.
BandGrid block_mean(const BandGrid& grid, int factor);

/// Pixel replication; the baseline that every super-resolution result is compared to.
BandGrid upsample_nearest(const BandGrid& grid, int factor);

BandGrid crop(const BandGrid& grid, int x0, int y0, int width, int height);

/// Copies `tile` into `dest` at (x0, y0), clipped to the destination bounds.
void paste(BandGrid& dest, const BandGrid& tile, int x0, int y0);

/// Band set with a common high resolution plus low-resolution bands.
///
/// Low bands sit either at `factor` times the high pixel size, or, when
/// factor is 2, at six times (the 60 m class of a 10/20/60 m sensor).
struct SceneManifest {
    std::string scene_id;
    int factor = 2;
    std::vector<BandGrid> high_bands;
    std::vector<BandGrid> low_bands;

    int high_width() const { return high_bands.empty() ? 0 : high_bands.front().width; }
    int high_height() const { return high_bands.empty() ? 0 : high_bands.front().height; }

    /// Ratio between the high grid and the given low band (factor or 6).
    int ratio_of(const BandGrid& low) const;
};

/// Validates the manifest invariants; returns human-readable warnings.
std::vector<std::string> validate_manifest(const SceneManifest& manifest);

/// Loads a JSON manifest; band paths are resolved relative to the manifest file.
SceneManifest load_manifest(const std::filesystem::path& path);

/// Writes every band as `<dir>/<band_id>.srb` and the JSON manifest at `path`.
void save_manifest(const SceneManifest& manifest, const std::filesystem::path& path);

}  // namespace srunmix
