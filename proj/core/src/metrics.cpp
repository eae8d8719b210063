#include "srunmix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "srunmix/error.hpp"

namespace srunmix {
namespace {

void check_pair(const BandGrid& x, const BandGrid& y) {
    if (x.width != y.width || x.height != y.height) {
        throw DimensionError("cannot compare '" + x.band_id + "' and '" + y.band_id + "' of different sizes");
    }
}

struct Moments {
    double n = 0;
    double mean_x = 0;
    double mean_y = 0;
    double var_x = 0;
    double var_y = 0;
    double cov = 0;
    double mse = 0;
};

Moments moments(const BandGrid& x, const BandGrid& y) {
    check_pair(x, y);
    Moments m;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x.valid[i] || !y.valid[i]) continue;
        m.n += 1;
        m.mean_x += x.values[i];
        m.mean_y += y.values[i];
    }
    if (m.n == 0) throw UndefinedMetricError("'" + x.band_id + "' and '" + y.band_id + "' share no valid pixel");
    m.mean_x /= m.n;
    m.mean_y /= m.n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x.valid[i] || !y.valid[i]) continue;
        const double dx = x.values[i] - m.mean_x;
        const double dy = y.values[i] - m.mean_y;
        m.var_x += dx * dx;
        m.var_y += dy * dy;
        m.cov += dx * dy;
        m.mse += (x.values[i] - y.values[i]) * (x.values[i] - y.values[i]);
    }
    m.var_x /= m.n;
    m.var_y /= m.n;
    m.cov /= m.n;
    m.mse /= m.n;
    return m;
}

std::string label(const BandQuality& b) {
    std::ostringstream os;
    os << b.band_id;
    if (b.wavelength_nm > 0) os << " (" << std::llround(b.wavelength_nm) << "nm)";
    return os.str();
}

}  // namespace

const char* to_string(ErgasMode mode) { return mode == ErgasMode::literal ? "literal" : "standard"; }

double q_index(const BandGrid& x, const BandGrid& y) {
    const Moments m = moments(x, y);
    const double denom = (m.var_x + m.var_y) * (m.mean_x * m.mean_x + m.mean_y * m.mean_y);
    if (!(std::abs(denom) >= 1e-30)) {
        throw UndefinedMetricError("Q is undefined for '" + x.band_id + "' vs '" + y.band_id +
                                   "': both images are constant");
    }
    return 4.0 * m.cov * m.mean_x * m.mean_y / denom;
}

double ergas(std::span<const BandGrid> xs, std::span<const BandGrid> ys, double resolution_ratio, ErgasMode mode) {
    if (xs.empty() || xs.size() != ys.size()) throw PreconditionError("ERGAS needs aligned, non-empty band lists");
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const Moments m = moments(xs[i], ys[i]);
        const double denom = mode == ErgasMode::literal ? m.mean_x : m.mean_x * m.mean_x;
        if (!(denom >= 1e-30)) {
            throw UndefinedMetricError("ERGAS is undefined: reference band '" + xs[i].band_id + "' has mean " +
                                       std::to_string(m.mean_x));
        }
        acc += m.mse / denom;
    }
    return 100.0 * resolution_ratio * std::sqrt(acc / static_cast<double>(xs.size()));
}

double sam(const BandGrid& x, const BandGrid& y) {
    check_pair(x, y);
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x.valid[i] || !y.valid[i]) continue;
        xy += x.values[i] * y.values[i];
        xx += x.values[i] * x.values[i];
        yy += y.values[i] * y.values[i];
    }
    if (!(xx > 0.0) || !(yy > 0.0)) {
        throw UndefinedMetricError("SAM is undefined for '" + x.band_id + "' vs '" + y.band_id + "': zero-norm image");
    }
    const double c = std::clamp(xy / (std::sqrt(xx) * std::sqrt(yy)), -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
}

QualityReport quality_report(std::span<const BandGrid> reference, std::span<const BandGrid> tested,
                             double resolution_ratio, ErgasMode mode) {
    if (reference.empty() || reference.size() != tested.size()) {
        throw PreconditionError("quality report needs aligned, non-empty band lists");
    }
    QualityReport r;
    r.resolution_ratio = resolution_ratio;
    r.ergas_mode = mode;
    double log_q = 0.0;
    bool q_positive = true;
    double sam_sum = 0.0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        BandQuality b;
        b.band_id = reference[i].band_id;
        b.wavelength_nm = reference[i].wavelength_nm;
        b.q = q_index(reference[i], tested[i]);
        b.ergas = ergas(reference.subspan(i, 1), tested.subspan(i, 1), resolution_ratio, mode);
        b.sam = sam(reference[i], tested[i]);
        q_positive = q_positive && b.q > 0.0;
        if (b.q > 0.0) log_q += std::log(b.q);
        sam_sum += b.sam;
        r.bands.push_back(b);
    }
    const auto n = static_cast<double>(reference.size());
    // The geometric mean is only defined for positive Q values.
    r.global_q = q_positive ? std::exp(log_q / n) : std::numeric_limits<double>::quiet_NaN();
    r.global_ergas = ergas(reference, tested, resolution_ratio, mode);
    r.global_sam = sam_sum / n;
    return r;
}

QualityReport evaluate_proxy(const SceneManifest& manifest, const PipelineOptions& opts, ErgasMode mode) {
    validate_manifest(manifest);
    if (manifest.factor != 2) {
        throw ManifestError("the reduced-resolution protocol needs a factor-2 manifest (10 m and 20 m classes)");
    }
    SceneManifest degraded;
    degraded.scene_id = manifest.scene_id + "_proxy";
    degraded.factor = 2;
    std::vector<BandGrid> references;
    for (const auto& b : manifest.high_bands) degraded.high_bands.push_back(downsample(b, 2));
    for (const auto& b : manifest.low_bands) {
        if (manifest.ratio_of(b) != 2) continue;
        degraded.low_bands.push_back(downsample(b, 2));
        references.push_back(b);
    }
    if (references.empty()) throw ManifestError("the manifest holds no band at twice the high-resolution pixel size");
    PipelineOptions proxy_opts = opts;
    proxy_opts.bands.clear();
    proxy_opts.model_cache_dir.reset();
    const SceneResult restored = run_tiled(degraded, proxy_opts);
    QualityReport report = quality_report(references, restored.outputs, 0.5, mode);
    report.reference = "original 20 m-class band (x); restored band is y";
    return report;
}

std::string report_json(const QualityReport& r) {
    nlohmann::json doc;
    doc["reference"] = r.reference;
    doc["resolution_ratio"] = r.resolution_ratio;
    doc["ergas_mode"] = to_string(r.ergas_mode);
    doc["bands"] = nlohmann::json::array();
    for (const auto& b : r.bands) {
        doc["bands"].push_back(
            {{"band_id", b.band_id}, {"wavelength_nm", b.wavelength_nm}, {"Q", b.q}, {"ERGAS", b.ergas}, {"SAM", b.sam}});
    }
    auto number_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    doc["global"] = {{"Q", number_or_null(r.global_q)},
                     {"ERGAS", number_or_null(r.global_ergas)},
                     {"SAM", number_or_null(r.global_sam)}};
    return doc.dump(2) + "\n";
}

std::string report_table(const QualityReport& r) {
    std::size_t width = std::string("Global").size();
    for (const auto& b : r.bands) width = std::max(width, label(b).size());
    width += 2;
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(width)) << "Band" << std::right << std::setw(8) << "Q"
       << std::setw(9) << "ERGAS" << std::setw(8) << "SAM" << '\n';
    auto row = [&](const std::string& name, double q, double e, double s) {
        os << std::left << std::setw(static_cast<int>(width)) << name << std::right << std::fixed << std::setprecision(3)
           << std::setw(8) << q << std::setprecision(2) << std::setw(9) << e << std::setw(8) << s << '\n';
    };
    for (const auto& b : r.bands) row(label(b), b.q, b.ergas, b.sam);
    row("Global", r.global_q, r.global_ergas, r.global_sam);
    return os.str();
}

}  // namespace srunmix
