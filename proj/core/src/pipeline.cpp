#include "srunmix/pipeline.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "srunmix/error.hpp"
#include "srunmix/model_fit.hpp"
#include "srunmix/parallel.hpp"

namespace srunmix {
namespace {

const std::array<BandInfo, 13> kSentinel2 = {{
    {"B2", 490, 65, 10},
    {"B3", 560, 35, 10},
    {"B4", 665, 30, 10},
    {"B8", 842, 115, 10},
    {"B5", 705, 15, 20},
    {"B6", 740, 15, 20},
    {"B7", 783, 20, 20},
    {"B8A", 865, 20, 20},
    {"B11", 1610, 90, 20},
    {"B12", 2190, 180, 20},
    {"B1", 443, 20, 60},
    {"B9", 945, 20, 60},
    {"B10", 1375, 30, 60},  // cirrus band; only present in top-of-atmosphere products
}};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool same_layout(const MixingModel& m, std::span<const BandGrid> bands, int factor) {
    if (m.factor != factor || m.shared.size() != bands.size()) return false;
    if (m.width != bands.front().width || m.height != bands.front().height) return false;
    for (std::size_t b = 0; b < bands.size(); ++b) {
        if (m.band_ids[b] != bands[b].band_id) return false;
    }
    return true;
}

UnmixContext build_context(const std::string& name, int factor, std::vector<BandGrid> high,
                           const PipelineOptions& opts, const std::string& cache_key, PassSummary& summary) {
    const auto t0 = Clock::now();
    summary.name = name;
    summary.factor = factor;
    summary.high_bands = high.size();

    MixingModel model;
    bool loaded = false;
    std::filesystem::path cache_file;
    const bool use_cache = opts.model_cache_dir && opts.sharpening.ablation != Ablation::uniform_weights;
    if (use_cache) {
        cache_file = *opts.model_cache_dir / (cache_key + "_" + name + ".srmx");
        if (std::filesystem::exists(cache_file)) {
            try {
                model = load_model(cache_file);
                loaded = same_layout(model, high, factor);
            } catch (const Error&) {
                loaded = false;
            }
        }
    }
    if (!loaded) {
        model = opts.sharpening.ablation == Ablation::uniform_weights ? initial_model(high, factor)
                                                                       : fit_geometry(high, factor, opts.solver);
        if (use_cache) {
            std::filesystem::create_directories(*opts.model_cache_dir);
            save_model(model, cache_file);
        }
    }
    summary.model_from_cache = loaded;
    summary.initial_objective = model.initial_objective;
    summary.objective = model.objective;
    summary.iterations = model.iterations;
    summary.cg_iterations = model.cg_iterations;

    std::vector<BandGrid> low_down;
    low_down.reserve(high.size());
    for (const auto& b : high) low_down.push_back(downsample(b, factor));
    NeighborCoeffs coeffs = fit_neighbor_coeffs(model, low_down, opts.solver);
    UnmixContext ctx = prepare_unmix(std::move(model), std::move(coeffs), std::move(high), std::move(low_down),
                                     opts.sharpening);
    summary.fit_seconds = seconds_since(t0);
    return ctx;
}

struct Selection {
    std::vector<std::size_t> requested;  // indices into low_bands, manifest order
    std::vector<std::size_t> single;     // ratio == factor
    std::vector<std::size_t> sixfold;    // ratio == 6
    std::vector<std::size_t> twenty;     // every ratio-2 band of a factor-2 scene
};

Selection select_bands(const SceneManifest& m, const PipelineOptions& opts) {
    Selection s;
    if (opts.bands.empty()) {
        for (std::size_t i = 0; i < m.low_bands.size(); ++i) s.requested.push_back(i);
    } else {
        for (const auto& id : opts.bands) {
            const auto it = std::find_if(m.low_bands.begin(), m.low_bands.end(),
                                         [&](const BandGrid& b) { return b.band_id == id; });
            if (it == m.low_bands.end()) {
                throw ManifestError("requested band '" + id + "' is not a low-resolution band of the manifest");
            }
            s.requested.push_back(static_cast<std::size_t>(it - m.low_bands.begin()));
        }
        std::sort(s.requested.begin(), s.requested.end());
        s.requested.erase(std::unique(s.requested.begin(), s.requested.end()), s.requested.end());
    }
    for (std::size_t i = 0; i < m.low_bands.size(); ++i) {
        if (m.factor == 2 && m.ratio_of(m.low_bands[i]) == 2) s.twenty.push_back(i);
    }
    for (std::size_t i : s.requested) {
        (m.ratio_of(m.low_bands[i]) == 6 ? s.sixfold : s.single).push_back(i);
    }
    if (!s.sixfold.empty() && s.twenty.empty()) {
        throw ManifestError("bands six times coarser than the high-resolution grid need an intermediate "
                            "(twice as coarse) band set for the first pass");
    }
    return s;
}

}  // namespace

std::span<const BandInfo> sentinel2_bands() { return kSentinel2; }

const BandInfo* find_sentinel2_band(const std::string& id) {
    for (const auto& b : kSentinel2) {
        if (b.id == id) return &b;
    }
    return nullptr;
}

void PipelineOptions::validate() const {
    if (tile_size < 2 || tile_overlap < 0) throw PreconditionError("tile size must be >= 2 and overlap >= 0");
    if (tile_size <= 2 * tile_overlap) throw PreconditionError("tile size must exceed twice the tile overlap");
    solver.validate();
    if (!(sharpening.epsilon_fraction > 0) || !(sharpening.q_min > 0) || !(sharpening.q_min <= 1.0) ||
        !(sharpening.q_max >= 1.0)) {
        throw PreconditionError("sharpening needs epsilon > 0 and 0 < q_min <= 1 <= q_max");
    }
}

SceneResult superresolve_scene(const SceneManifest& manifest, const PipelineOptions& opts) {
    const auto t0 = Clock::now();
    opts.validate();
    SceneResult result;
    result.warnings = validate_manifest(manifest);
    const Selection sel = select_bands(manifest, opts);
    if (sel.requested.empty()) return result;

    const std::string key = manifest.scene_id.empty() ? std::string("scene") : manifest.scene_id;
    std::map<std::size_t, BandGrid> produced;

    PassSummary main_summary;
    const UnmixContext main = build_context("x" + std::to_string(manifest.factor), manifest.factor,
                                            manifest.high_bands, opts, key, main_summary);
    auto t_unmix = Clock::now();
    for (std::size_t i : sel.single) produced[i] = superresolve_band(main, manifest.low_bands[i], opts.sharpening);
    main_summary.low_bands = sel.single.size() + sel.sixfold.size();

    if (!sel.sixfold.empty()) {
        // First pass at the intermediate resolution: the twice-coarser bands and
        // the downsampled high bands together constrain the x3 geometry.
        std::vector<BandGrid> constraints;
        for (std::size_t i : sel.twenty) constraints.push_back(manifest.low_bands[i]);
        for (const auto& b : manifest.high_bands) constraints.push_back(downsample(b, 2));
        PassSummary first;
        const double unmix_before = seconds_since(t_unmix);
        const UnmixContext ctx3 = build_context("x3", 3, std::move(constraints), opts, key, first);
        const auto t_first = Clock::now();
        for (std::size_t i : sel.sixfold) {
            const BandGrid intermediate = superresolve_band(ctx3, manifest.low_bands[i], opts.sharpening);
            produced[i] = superresolve_band(main, intermediate, opts.sharpening);
        }
        first.low_bands = sel.sixfold.size();
        first.unmix_seconds = seconds_since(t_first);
        main_summary.unmix_seconds = unmix_before;
        result.passes.push_back(first);
    } else {
        main_summary.unmix_seconds = seconds_since(t_unmix);
    }
    result.passes.insert(result.passes.begin(), main_summary);

    for (std::size_t i : sel.requested) result.outputs.push_back(std::move(produced.at(i)));
    result.seconds = seconds_since(t0);
    return result;
}

SceneResult run_tiled(const SceneManifest& manifest, const PipelineOptions& opts) {
    const auto t0 = Clock::now();
    opts.validate();
    std::vector<std::string> warnings = validate_manifest(manifest);
    const Selection sel = select_bands(manifest, opts);
    if (opts.tile_overlap == 0) warnings.push_back("tile overlap is 0; visible seams are expected between tiles");

    const int unit = sel.sixfold.empty() ? manifest.factor : 6;
    const int tile = std::max(unit, (opts.tile_size * manifest.factor) / unit * unit);
    const int overlap = (opts.tile_overlap * manifest.factor + unit - 1) / unit * unit;
    const int W = manifest.high_width();
    const int H = manifest.high_height();

    if (W <= tile && H <= tile) {
        SceneResult single = superresolve_scene(manifest, opts);
        single.tiles.push_back({0, 0, 0, W, H, 0.0});
        single.warnings.insert(single.warnings.begin(), warnings.begin(), warnings.end());
        return single;
    }

    PipelineOptions tile_opts = opts;
    if (tile_opts.model_cache_dir) {
        warnings.push_back("model cache is not used for tiled runs");
        tile_opts.model_cache_dir.reset();
    }

    struct Tile {
        int x0, y0, x1, y1;      // core
        int ex0, ey0, ex1, ey1;  // with overlap
        SceneResult result;
    };
    std::vector<Tile> tiles;
    for (int y = 0; y < H; y += tile) {
        for (int x = 0; x < W; x += tile) {
            Tile t{};
            t.x0 = x;
            t.y0 = y;
            t.x1 = std::min(W, x + tile);
            t.y1 = std::min(H, y + tile);
            t.ex0 = std::max(0, t.x0 - overlap);
            t.ey0 = std::max(0, t.y0 - overlap);
            t.ex1 = std::min(W, t.x1 + overlap);
            t.ey1 = std::min(H, t.y1 + overlap);
            tiles.push_back(std::move(t));
        }
    }

    parallel_for(tiles.size(), 1, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t ti = lo; ti < hi; ++ti) {
            Tile& t = tiles[ti];
            SceneManifest sub;
            sub.scene_id = manifest.scene_id + "_tile" + std::to_string(ti);
            sub.factor = manifest.factor;
            for (const auto& b : manifest.high_bands) {
                sub.high_bands.push_back(crop(b, t.ex0, t.ey0, t.ex1 - t.ex0, t.ey1 - t.ey0));
            }
            for (const auto& b : manifest.low_bands) {
                const int r = manifest.ratio_of(b);
                sub.low_bands.push_back(crop(b, t.ex0 / r, t.ey0 / r, (t.ex1 - t.ex0) / r, (t.ey1 - t.ey0) / r));
            }
            t.result = superresolve_scene(sub, tile_opts);
        }
    });

    SceneResult result;
    const std::size_t nout = tiles.front().result.outputs.size();
    for (std::size_t o = 0; o < nout; ++o) {
        BandGrid full = tiles.front().result.outputs[o].like(W, H);
        std::fill(full.values.begin(), full.values.end(), std::numeric_limits<double>::quiet_NaN());
        std::fill(full.valid.begin(), full.valid.end(), 0);
        for (const auto& t : tiles) {
            const BandGrid core = crop(t.result.outputs[o], t.x0 - t.ex0, t.y0 - t.ey0, t.x1 - t.x0, t.y1 - t.y0);
            paste(full, core, t.x0, t.y0);
        }
        result.outputs.push_back(std::move(full));
    }

    std::set<std::string> seen(warnings.begin(), warnings.end());
    result.warnings = warnings;
    for (std::size_t ti = 0; ti < tiles.size(); ++ti) {
        const Tile& t = tiles[ti];
        double seam = 0.0;
        for (std::size_t o = 0; o < nout; ++o) {
            const BandGrid& mine = t.result.outputs[o];
            const BandGrid& full = result.outputs[o];
            for (int y = t.ey0; y < t.ey1; ++y) {
                for (int x = t.ex0; x < t.ex1; ++x) {
                    if (x >= t.x0 && x < t.x1 && y >= t.y0 && y < t.y1) continue;
                    const int lx = x - t.ex0;
                    const int ly = y - t.ey0;
                    if (!mine.is_valid(lx, ly) || !full.is_valid(x, y)) continue;
                    seam = std::max(seam, std::abs(mine.at(lx, ly) - full.at(x, y)));
                }
            }
        }
        result.tiles.push_back({static_cast<int>(ti), t.x0, t.y0, t.x1 - t.x0, t.y1 - t.y0, seam});
        for (auto p : t.result.passes) {
            p.name = "tile" + std::to_string(ti) + ":" + p.name;
            result.passes.push_back(std::move(p));
        }
        for (const auto& w : t.result.warnings) {
            if (seen.insert(w).second) result.warnings.push_back(w);
        }
    }
    result.seconds = seconds_since(t0);
    return result;
}

}  // namespace srunmix
