#include "srunmix/unmix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "srunmix/error.hpp"
#include "srunmix/parallel.hpp"

namespace srunmix {

const char* to_string(ProximityMode mode) {
    return mode == ProximityMode::literal ? "literal" : "complement";
}

const char* to_string(Ablation ablation) {
    switch (ablation) {
        case Ablation::none: return "none";
        case Ablation::no_shared_values: return "no-shared";
        case Ablation::no_ratio_sharpening: return "no-ratio";
        case Ablation::uniform_weights: return "uniform-weights";
    }
    return "?";
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Proximity weights of one lattice point or pixel; writes one weight per high band.
void proximity_at(double fit_low, std::span<const double> fit_high, double epsilon, ProximityMode mode,
                  std::span<double> out) {
    double max_gap = 0.0;
    for (double f : fit_high) max_gap = std::max(max_gap, std::abs(fit_low - f));
    if (!(max_gap >= epsilon)) {
        std::fill(out.begin(), out.end(), 1.0);
        return;
    }
    for (std::size_t i = 0; i < fit_high.size(); ++i) {
        const double p = std::abs(fit_low - fit_high[i]) / max_gap;
        out[i] = mode == ProximityMode::literal ? p : 1.0 - p;
    }
}

double weighted_log_mean(std::span<const double> q, std::span<const double> p, double q_min, double q_max) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        num += p[i] * std::log(q[i]);
        den += p[i];
    }
    if (!(den > 1e-300)) {
        // Every weight vanished (complement mode with a single band): plain geometric mean.
        num = 0.0;
        for (double v : q) num += std::log(v);
        den = static_cast<double>(q.size());
    }
    return std::clamp(std::exp(num / den), q_min, q_max);
}

double ratio(double numer, double denom, double epsilon, double q_min, double q_max) {
    return std::clamp(numer / std::max(denom, epsilon), q_min, q_max);
}

void check_lattice_match(const LatticeGrid& a, const LatticeGrid& b) {
    if (a.width != b.width || a.height != b.height) throw DimensionError("lattice grids are not aligned");
}

}  // namespace

LatticeGrid estimate_shared(const NeighborCoeffs& coeffs, const BandGrid& low_band) {
    if (low_band.width != coeffs.low_width || low_band.height != coeffs.low_height) {
        throw DimensionError("band '" + low_band.band_id + "' is " + std::to_string(low_band.width) + "x" +
                             std::to_string(low_band.height) + " but the coefficients expect " +
                             std::to_string(coeffs.low_width) + "x" + std::to_string(coeffs.low_height));
    }
    const SharedLattice& lat = coeffs.lattice;
    LatticeGrid out = LatticeGrid::filled(lat.width, lat.height, 0.0);
    parallel_for(lat.size(), kDefaultGrain, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t li = lo; li < hi; ++li) {
            const auto& offsets = coeffs.patterns[li].offsets;
            bool all_valid = !offsets.empty();
            double mean = 0.0;
            int count = 0;
            for (const auto& o : offsets) {
                if (low_band.is_valid(o.x, o.y)) {
                    mean += low_band.at(o.x, o.y);
                    ++count;
                } else {
                    all_valid = false;
                }
            }
            if (coeffs.valid[li] && all_valid) {
                const auto v = coeffs.at(li);
                double s = 0.0;
                for (std::size_t n = 0; n < offsets.size(); ++n) s += v[n] * low_band.at(offsets[n].x, offsets[n].y);
                out.values[li] = s;
            } else if (count > 0) {
                out.values[li] = mean / count;
            } else {
                // Clipped pattern lost every neighbour; fall back to the unfiltered pattern.
                const int lx = static_cast<int>(li % static_cast<std::size_t>(lat.width));
                const int ly = static_cast<int>(li / static_cast<std::size_t>(lat.width));
                const auto full = classify_shared(lx, ly, lat.factor, low_band.width, low_band.height);
                for (const auto& o : full.offsets) {
                    if (low_band.is_valid(o.x, o.y)) {
                        mean += low_band.at(o.x, o.y);
                        ++count;
                    }
                }
                if (count > 0) {
                    out.values[li] = mean / count;
                } else {
                    out.values[li] = kNaN;
                    out.valid[li] = 0;
                }
            }
        }
    });
    return out;
}

std::vector<LatticeGrid> sharpening_ratios(const MixingModel& model, const NeighborCoeffs& coeffs,
                                           std::span<const BandGrid> low_down, const SharpeningOptions& opts) {
    if (low_down.size() != model.shared.size()) throw PreconditionError("need one downsampled band per modelled band");
    std::vector<LatticeGrid> out;
    out.reserve(low_down.size());
    for (std::size_t b = 0; b < low_down.size(); ++b) {
        const LatticeGrid fit = estimate_shared(coeffs, low_down[b]);
        const LatticeGrid& opt = model.shared[b];
        check_lattice_match(fit, opt);
        const double eps = opts.epsilon_for(model.ranges[b]);
        LatticeGrid q = LatticeGrid::filled(fit.width, fit.height, 1.0);
        for (std::size_t i = 0; i < q.values.size(); ++i) {
            if (fit.valid[i] && opt.valid[i]) q.values[i] = ratio(opt.values[i], fit.values[i], eps, opts.q_min, opts.q_max);
        }
        out.push_back(std::move(q));
    }
    return out;
}

std::vector<LatticeGrid> proximity_weights(const LatticeGrid& fit_low, std::span<const LatticeGrid> fit_high,
                                           double epsilon, ProximityMode mode) {
    std::vector<LatticeGrid> out;
    for (const auto& g : fit_high) {
        check_lattice_match(fit_low, g);
        out.push_back(LatticeGrid::filled(g.width, g.height, 1.0));
    }
    const std::size_t nb = fit_high.size();
    std::vector<double> fh(nb), p(nb);
    for (std::size_t i = 0; i < fit_low.values.size(); ++i) {
        bool ok = fit_low.valid[i] != 0;
        for (std::size_t b = 0; b < nb && ok; ++b) {
            ok = fit_high[b].valid[i] != 0;
            fh[b] = fit_high[b].values[i];
        }
        if (!ok) continue;  // uniform weights where any estimate is missing
        proximity_at(fit_low.values[i], fh, epsilon, mode, p);
        for (std::size_t b = 0; b < nb; ++b) out[b].values[i] = p[b];
    }
    return out;
}

LatticeGrid average_ratio(std::span<const LatticeGrid> q, std::span<const LatticeGrid> p, double q_min, double q_max) {
    if (q.empty() || q.size() != p.size()) throw PreconditionError("ratio and proximity lists disagree");
    for (std::size_t b = 0; b < q.size(); ++b) {
        check_lattice_match(q[0], q[b]);
        check_lattice_match(q[0], p[b]);
    }
    LatticeGrid out = LatticeGrid::filled(q[0].width, q[0].height, 1.0);
    const std::size_t nb = q.size();
    std::vector<double> qs(nb), ps(nb);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        for (std::size_t b = 0; b < nb; ++b) {
            qs[b] = std::clamp(q[b].values[i], q_min, q_max);
            ps[b] = p[b].values[i];
        }
        out.values[i] = weighted_log_mean(qs, ps, q_min, q_max);
    }
    return out;
}

BandGrid reconstruct(std::span<const double> weights, int width, int height, const LatticeGrid& shared) {
    if (shared.width != width + 1 || shared.height != height + 1) {
        throw DimensionError("shared-value lattice does not match the high-resolution grid");
    }
    if (weights.size() != 4 * static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
        throw DimensionError("weight count does not match the high-resolution grid");
    }
    BandGrid out = BandGrid::filled(width, height, 0.0);
    parallel_for(static_cast<std::size_t>(height), 64, [&](std::size_t y0, std::size_t y1) {
        for (std::size_t yy = y0; yy < y1; ++yy) {
            const int y = static_cast<int>(yy);
            for (int x = 0; x < width; ++x) {
                const std::size_t p = out.index(x, y);
                const auto corners = corner_indices(x, y);
                double acc = 0.0;
                double wsum = 0.0;
                bool complete = true;
                for (int k = 0; k < 4; ++k) {
                    const auto& c = corners[static_cast<std::size_t>(k)];
                    const double w = weights[4 * p + static_cast<std::size_t>(k)];
                    if (!shared.is_valid(c.x, c.y)) {
                        complete = false;
                        continue;
                    }
                    acc += w * shared.at(c.x, c.y);
                    wsum += w;
                }
                if (complete) {
                    out.values[p] = acc;
                } else if (wsum > 1e-12) {
                    out.values[p] = acc / wsum;
                } else {
                    // Remaining corners carry no weight: average them instead.
                    double s = 0.0;
                    int n = 0;
                    for (const auto& c : corners) {
                        if (shared.is_valid(c.x, c.y)) {
                            s += shared.at(c.x, c.y);
                            ++n;
                        }
                    }
                    if (n > 0) {
                        out.values[p] = s / n;
                    } else {
                        out.values[p] = kNaN;
                        out.valid[p] = 0;
                    }
                }
            }
        }
    });
    return out;
}

BandGrid rescale_to_reflectance(const BandGrid& high, const BandGrid& low_band, int factor, double epsilon) {
    if (factor < 1 || high.width != low_band.width * factor || high.height != low_band.height * factor) {
        throw DimensionError("band '" + high.band_id + "' is not " + std::to_string(factor) +
                             " times the size of its low-resolution source");
    }
    BandGrid out = high;
    out.range = low_band.range;
    const ValueRange range = low_band.range;
    const std::size_t cells = static_cast<std::size_t>(factor) * static_cast<std::size_t>(factor);

    parallel_for(static_cast<std::size_t>(low_band.height), 8, [&](std::size_t Y0, std::size_t Y1) {
        std::vector<std::size_t> idx;
        idx.reserve(cells);
        for (std::size_t YY = Y0; YY < Y1; ++YY) {
            const int Y = static_cast<int>(YY);
            for (int X = 0; X < low_band.width; ++X) {
                idx.clear();
                for (int j = 0; j < factor; ++j) {
                    for (int i = 0; i < factor; ++i) idx.push_back(out.index(X * factor + i, Y * factor + j));
                }
                if (!low_band.is_valid(X, Y)) {
                    for (auto k : idx) {
                        out.values[k] = kNaN;
                        out.valid[k] = 0;
                    }
                    continue;
                }
                const double target = low_band.at(X, Y);
                std::vector<std::size_t> live;
                for (auto k : idx) {
                    if (out.valid[k]) live.push_back(k);
                }
                if (live.empty()) {
                    for (auto k : idx) {
                        out.values[k] = target;
                        out.valid[k] = 1;
                    }
                    continue;
                }
                // Cells lost upstream take the target value; they then take part in the correction.
                for (auto k : idx) {
                    if (!out.valid[k]) {
                        out.values[k] = target;
                        out.valid[k] = 1;
                    }
                }
                const auto n = static_cast<double>(cells);
                auto block_mean = [&] {
                    double s = 0.0;
                    for (auto k : idx) s += out.values[k];
                    return s / n;
                };
                const double mean = block_mean();
                if (std::abs(mean) > epsilon) {
                    const double scale = target / mean;
                    for (auto k : idx) out.values[k] *= scale;
                } else {
                    for (auto k : idx) out.values[k] += target - mean;
                }
                for (auto k : idx) out.values[k] = range.clamp(out.values[k]);
                // Clamping may move the mean; push the deficit into cells that still have room.
                for (std::size_t pass = 0; pass <= cells; ++pass) {
                    const double deficit = (target - block_mean()) * n;
                    if (std::abs(deficit) <= 1e-15 * n * std::max(1.0, std::abs(target))) break;
                    std::size_t free = 0;
                    for (auto k : idx) {
                        if ((deficit > 0 && out.values[k] < range.max) || (deficit < 0 && out.values[k] > range.min)) ++free;
                    }
                    if (free == 0) break;
                    const double share = deficit / static_cast<double>(free);
                    for (auto k : idx) {
                        if ((deficit > 0 && out.values[k] < range.max) || (deficit < 0 && out.values[k] > range.min)) {
                            out.values[k] = range.clamp(out.values[k] + share);
                        }
                    }
                }
            }
        }
    });
    return out;
}

UnmixContext prepare_unmix(MixingModel model, NeighborCoeffs coeffs, std::vector<BandGrid> high_bands,
                           std::vector<BandGrid> low_down, const SharpeningOptions& opts) {
    UnmixContext ctx;
    ctx.fit_high.reserve(low_down.size());
    for (const auto& b : low_down) ctx.fit_high.push_back(estimate_shared(coeffs, b));
    ctx.ratios = sharpening_ratios(model, coeffs, low_down, opts);
    ctx.model = std::move(model);
    ctx.coeffs = std::move(coeffs);
    ctx.high_bands = std::move(high_bands);
    ctx.low_down = std::move(low_down);
    return ctx;
}

namespace {

BandGrid superresolve_pixels(const UnmixContext& ctx, const BandGrid& low_band, const SharpeningOptions& opts) {
    const int f = ctx.model.factor;
    if (ctx.high_bands.size() != ctx.low_down.size()) {
        throw PreconditionError("the no-shared-values ablation needs the observed high-resolution bands");
    }
    const BandGrid up = upsample_nearest(low_band, f);
    std::vector<BandGrid> up_high;
    for (const auto& b : ctx.low_down) up_high.push_back(upsample_nearest(b, f));
    const std::size_t nb = up_high.size();
    const double eps_b = opts.epsilon_for(low_band.range);
    BandGrid out = up;
    std::vector<double> fh(nb), p(nb), q(nb);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!up.valid[i]) continue;
        bool ok = true;
        for (std::size_t b = 0; b < nb; ++b) {
            ok = ok && up_high[b].valid[i] && ctx.high_bands[b].valid[i];
            fh[b] = up_high[b].values[i];
            q[b] = ok ? ratio(ctx.high_bands[b].values[i], fh[b], opts.epsilon_for(ctx.high_bands[b].range), opts.q_min,
                              opts.q_max)
                      : 1.0;
        }
        if (!ok) continue;
        proximity_at(up.values[i], fh, eps_b, opts.proximity, p);
        out.values[i] = low_band.range.clamp(weighted_log_mean(q, p, opts.q_min, opts.q_max) * up.values[i]);
    }
    return rescale_to_reflectance(out, low_band, f, eps_b);
}

}  // namespace

BandGrid superresolve_band(const UnmixContext& ctx, const BandGrid& low_band, const SharpeningOptions& opts) {
    const MixingModel& model = ctx.model;
    check_grid(low_band, 1);
    if (low_band.width * model.factor != model.width || low_band.height * model.factor != model.height) {
        throw DimensionError("band '" + low_band.band_id + "' does not match the model grid");
    }
    BandGrid result;
    if (opts.ablation == Ablation::no_shared_values) {
        result = superresolve_pixels(ctx, low_band, opts);
    } else {
        const double eps = opts.epsilon_for(low_band.range);
        const LatticeGrid fit = estimate_shared(ctx.coeffs, low_band);
        LatticeGrid corrected = fit;
        if (opts.ablation != Ablation::no_ratio_sharpening) {
            const auto prox = proximity_weights(fit, ctx.fit_high, eps, opts.proximity);
            const LatticeGrid qbar = average_ratio(ctx.ratios, prox, opts.q_min, opts.q_max);
            for (std::size_t i = 0; i < corrected.values.size(); ++i) corrected.values[i] *= qbar.values[i];
        }
        for (std::size_t i = 0; i < corrected.values.size(); ++i) {
            if (corrected.valid[i]) corrected.values[i] = low_band.range.clamp(corrected.values[i]);
        }
        const BandGrid mixed = reconstruct(model.weights, model.width, model.height, corrected);
        result = rescale_to_reflectance(mixed, low_band, model.factor, eps);
    }
    result.band_id = low_band.band_id;
    result.wavelength_nm = low_band.wavelength_nm;
    result.pixel_size_m = low_band.pixel_size_m / model.factor;
    result.range = low_band.range;
    return result;
}

BandGrid superresolve_band(const MixingModel& model, const NeighborCoeffs& coeffs, std::span<const BandGrid> low_down,
                           const BandGrid& low_band, const SharpeningOptions& opts,
                           std::span<const BandGrid> high_bands) {
    UnmixContext ctx = prepare_unmix(model, coeffs, {high_bands.begin(), high_bands.end()},
                                     {low_down.begin(), low_down.end()}, opts);
    return superresolve_band(ctx, low_band, opts);
}

}  // namespace srunmix
