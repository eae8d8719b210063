#pragma once

#include <span>
#include <string>
#include <vector>

#include "srunmix/pipeline.hpp"
#include "srunmix/raster.hpp"

namespace srunmix {

/// Universal image quality index over the jointly valid pixels of x and y.
double q_index(const BandGrid& x, const BandGrid& y);

enum class ErgasMode {
    literal,   // MSE / mean
    standard,  // MSE / mean^2, as in most of the pansharpening literature
};

const char* to_string(ErgasMode mode);

/// ERGAS with xs as the reference bands. `resolution_ratio` is the high over
/// low pixel size (0.5 for 40 m -> 20 m).
double ergas(std::span<const BandGrid> xs, std::span<const BandGrid> ys, double resolution_ratio,
             ErgasMode mode = ErgasMode::literal);

/// Spectral angle between the two images seen as vectors, in degrees.
double sam(const BandGrid& x, const BandGrid& y);

struct BandQuality {
    std::string band_id;
    double wavelength_nm = 0.0;
    double q = 0.0;
    double ergas = 0.0;
    double sam = 0.0;
};

struct QualityReport {
    std::vector<BandQuality> bands;
    double global_q = 0.0;      // geometric mean of the per-band Q
    double global_ergas = 0.0;  // N-band ERGAS
    double global_sam = 0.0;    // arithmetic mean of the per-band angles
    double resolution_ratio = 0.5;
    ErgasMode ergas_mode = ErgasMode::literal;
    std::string reference = "original";  // which argument the metrics treat as x
};

/// Scores `tested` against `reference` band by band and globally.
QualityReport quality_report(std::span<const BandGrid> reference, std::span<const BandGrid> tested,
                             double resolution_ratio, ErgasMode mode = ErgasMode::literal);

/// Reduced-resolution protocol: both resolution classes are degraded by 2, each
/// degraded low band is restored with the degraded high bands as constraints,
/// and the restored bands are scored against the original low bands.
QualityReport evaluate_proxy(const SceneManifest& manifest, const PipelineOptions& opts,
                             ErgasMode mode = ErgasMode::literal);

std::string report_json(const QualityReport& report);
/// Aligned text table: Band, Q, ERGAS, SAM, then a Global row.
std::string report_table(const QualityReport& report);

}  // namespace srunmix
