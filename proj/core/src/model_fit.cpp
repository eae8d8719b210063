#include "srunmix/model_fit.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "srunmix/error.hpp"
#include "srunmix/parallel.hpp"

namespace srunmix {
namespace {

void check_high_bands(std::span<const BandGrid> bands, int factor) {
    if (bands.empty()) throw PreconditionError("geometry fit needs at least one high-resolution band");
    if (factor != 2 && factor != 3) throw PreconditionError("factor must be 2 or 3");
    const int w = bands.front().width;
    const int h = bands.front().height;
    for (const auto& b : bands) {
        check_grid(b, 2);
        if (b.width != w || b.height != h) {
            throw PreconditionError("high-resolution band '" + b.band_id + "' differs in size from '" +
                                    bands.front().band_id + "'");
        }
    }
    if (w % factor != 0 || h % factor != 0) {
        throw DimensionError("high-resolution grid " + std::to_string(w) + "x" + std::to_string(h) +
                             " is not divisible by factor " + std::to_string(factor));
    }
}

struct Normalization {
    double mean = 0.0;
    double scale = 1.0;
};

Normalization band_normalization(const BandGrid& b) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (!b.valid[i]) continue;
        sum += b.values[i];
        ++n;
    }
    Normalization norm;
    if (n == 0) return norm;
    norm.mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b.valid[i]) ss += (b.values[i] - norm.mean) * (b.values[i] - norm.mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    norm.scale = sd > 1e-12 * std::max(1.0, std::abs(norm.mean)) ? sd : 1.0;
    return norm;
}

MixingModel make_initial(std::span<const BandGrid> bands, int factor) {
    MixingModel m;
    m.width = bands.front().width;
    m.height = bands.front().height;
    m.factor = factor;
    m.weights.assign(4 * bands.front().size(), 0.25);
    for (const auto& b : bands) {
        m.band_ids.push_back(b.band_id);
        m.ranges.push_back(b.range);
        m.shared.push_back(init_shared_values(b));
    }
    return m;
}

}  // namespace

double model_objective(const MixingModel& model, std::span<const BandGrid> bands) {
    JointProblem prob;
    prob.width = model.width;
    prob.height = model.height;
    JointState state;
    state.weights = model.weights;
    for (std::size_t b = 0; b < bands.size(); ++b) {
        prob.observed.emplace_back(bands[b].values);
        prob.valid.emplace_back(bands[b].valid);
        prob.bounds.push_back(bands[b].range);
        std::vector<double> s = model.shared[b].values;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!model.shared[b].valid[i]) s[i] = 0.0;  // only touches invalid pixels
        }
        state.shared.push_back(std::move(s));
    }
    JointSystem sys(prob, 1.0);
    return sys.data_objective(sys.pack(state));
}

MixingModel initial_model(std::span<const BandGrid> high_bands, int factor) {
    check_high_bands(high_bands, factor);
    MixingModel m = make_initial(high_bands, factor);
    m.objective = m.initial_objective = model_objective(m, high_bands);
    return m;
}

MixingModel fit_geometry(std::span<const BandGrid> high_bands, int factor, const SolverOptions& opts) {
    check_high_bands(high_bands, factor);
    opts.validate();
    MixingModel model = make_initial(high_bands, factor);
    const std::size_t nb = high_bands.size();

    // Solve in per-band standardized units; the mixing equation is affine
    // invariant because the weights sum to one.
    std::vector<Normalization> norms(nb);
    std::vector<std::vector<double>> scaled(nb);
    JointProblem prob;
    prob.width = model.width;
    prob.height = model.height;
    JointState init;
    init.weights = model.weights;
    for (std::size_t b = 0; b < nb; ++b) {
        const BandGrid& band = high_bands[b];
        norms[b] = band_normalization(band);
        scaled[b].resize(band.size());
        for (std::size_t i = 0; i < band.size(); ++i) {
            scaled[b][i] = band.valid[i] ? (band.values[i] - norms[b].mean) / norms[b].scale : 0.0;
        }
        const ValueRange r{(band.range.min - norms[b].mean) / norms[b].scale,
                           (band.range.max - norms[b].mean) / norms[b].scale};
        prob.bounds.push_back(r);
        std::vector<double> s(model.shared[b].values.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = model.shared[b].valid[i] ? r.clamp((model.shared[b].values[i] - norms[b].mean) / norms[b].scale)
                                            : r.clamp(0.0);
        }
        init.shared.push_back(std::move(s));
    }
    for (std::size_t b = 0; b < nb; ++b) {
        prob.observed.emplace_back(scaled[b]);
        prob.valid.emplace_back(high_bands[b].valid);
    }

    const JointResult res = solve_joint(prob, init, opts);

    model.weights = res.state.weights;
    for (std::size_t b = 0; b < nb; ++b) {
        auto& grid = model.shared[b];
        for (std::size_t i = 0; i < grid.values.size(); ++i) {
            const double v = norms[b].mean + norms[b].scale * res.state.shared[b][i];
            grid.values[i] = grid.valid[i] ? v : std::numeric_limits<double>::quiet_NaN();
        }
    }
    model.iterations = res.iterations;
    model.cg_iterations = res.cg_iterations;
    model.initial_objective = model_objective(make_initial(high_bands, factor), high_bands);
    model.objective = model_objective(model, high_bands);
    return model;
}

NeighborCoeffs fit_neighbor_coeffs(const MixingModel& model, std::span<const BandGrid> low_down,
                                   const SolverOptions& opts) {
    if (low_down.size() != model.shared.size()) {
        throw PreconditionError("need one downsampled band per modelled band");
    }
    const SharedLattice lattice = model.lattice();
    NeighborCoeffs nc;
    nc.lattice = lattice;
    nc.low_width = model.width / model.factor;
    nc.low_height = model.height / model.factor;
    for (const auto& b : low_down) {
        if (b.width != nc.low_width || b.height != nc.low_height) {
            throw DimensionError("downsampled band '" + b.band_id + "' does not match the model's low-resolution grid");
        }
    }
    const std::size_t points = lattice.size();
    nc.patterns.resize(points);
    nc.coeffs.assign(points * NeighborCoeffs::kMaxNeighbors, 0.0);
    nc.valid.assign(points, 0);
    const std::size_t nb = low_down.size();

    parallel_for(static_cast<std::size_t>(lattice.height), 4, [&](std::size_t y0, std::size_t y1) {
        for (std::size_t ly = y0; ly < y1; ++ly) {
            for (int lx = 0; lx < lattice.width; ++lx) {
                const std::size_t li = lattice.index(lx, static_cast<int>(ly));
                NeighborhoodPattern pat = classify_shared(lx, static_cast<int>(ly), model.factor, nc.low_width, nc.low_height);
                // Neighbours must be observed in every band to enter the design.
                std::erase_if(pat.offsets, [&](const LowPixel& o) {
                    for (const auto& b : low_down) {
                        if (!b.is_valid(o.x, o.y)) return true;
                    }
                    return false;
                });
                const auto n = static_cast<Eigen::Index>(pat.offsets.size());
                if (n == 0) {
                    nc.patterns[li] = std::move(pat);
                    continue;
                }
                std::vector<std::size_t> rows;
                for (std::size_t b = 0; b < nb; ++b) {
                    if (model.shared[b].valid[li]) rows.push_back(b);
                }
                Eigen::MatrixXd design(static_cast<Eigen::Index>(rows.size()), n);
                Eigen::VectorXd target(static_cast<Eigen::Index>(rows.size()));
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    const auto& band = low_down[rows[r]];
                    for (Eigen::Index c = 0; c < n; ++c) {
                        const auto& o = pat.offsets[static_cast<std::size_t>(c)];
                        design(static_cast<Eigen::Index>(r), c) = band.at(o.x, o.y);
                    }
                    target(static_cast<Eigen::Index>(r)) = model.shared[rows[r]].values[li];
                }
                const Eigen::VectorXd v0 = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
                const Eigen::VectorXd v = solve_ridge(design, target, v0, opts.ridge_lambda);
                bool finite = true;
                for (Eigen::Index c = 0; c < n; ++c) {
                    nc.coeffs[li * NeighborCoeffs::kMaxNeighbors + static_cast<std::size_t>(c)] = v(c);
                    finite = finite && std::isfinite(v(c));
                }
                nc.valid[li] = finite ? 1 : 0;
                nc.patterns[li] = std::move(pat);
            }
        }
    });
    return nc;
}

// ---------------------------------------------------------------------------
// Model cache

namespace {

void write_floats(std::ostream& out, std::span<const double> values) {
    std::vector<float> raw(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) raw[i] = static_cast<float>(values[i]);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
}

std::vector<double> read_floats(std::istream& in, std::size_t count, const std::string& what) {
    std::vector<float> raw(count);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float)) {
        throw TruncationError("model file payload for " + what + " is truncated");
    }
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(raw[i]);
    return out;
}

}  // namespace

void save_model(const MixingModel& model, const std::filesystem::path& path) {
    nlohmann::json index;
    index["width"] = model.width;
    index["height"] = model.height;
    index["factor"] = model.factor;
    index["encoding"] = "float32-le";
    index["objective"] = model.objective;
    index["initial_objective"] = model.initial_objective;
    index["weights"] = {{"offset", 0}, {"count", model.weights.size()}};
    std::size_t offset = model.weights.size() * sizeof(float);
    index["bands"] = nlohmann::json::array();
    for (std::size_t b = 0; b < model.shared.size(); ++b) {
        const auto& g = model.shared[b];
        index["bands"].push_back({{"band_id", model.band_ids[b]},
                                  {"range", {model.ranges[b].min, model.ranges[b].max}},
                                  {"lattice_width", g.width},
                                  {"lattice_height", g.height},
                                  {"offset", offset},
                                  {"count", g.values.size()}});
        offset += g.values.size() * sizeof(float);
    }
    const std::string text = index.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write model file " + path.string());
    out << "SRMX1\n" << text.size() << '\n' << text;
    write_floats(out, model.weights);
    for (const auto& g : model.shared) {
        std::vector<double> v = g.values;  // NaN marks invalid points
        write_floats(out, v);
    }
    if (!out) throw IoError("short write on model file " + path.string());
}

MixingModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model file " + path.string());
    std::string magic, length_line;
    if (!std::getline(in, magic) || magic != "SRMX1") throw FormatError(path.string() + ": magic field is not SRMX1");
    if (!std::getline(in, length_line)) throw FormatError(path.string() + ": missing index length");
    std::size_t length = 0;
    try {
        length = std::stoul(length_line);
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": malformed index length");
    }
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (static_cast<std::size_t>(in.gcount()) != length) throw TruncationError(path.string() + ": index truncated");
    MixingModel m;
    try {
        const auto index = nlohmann::json::parse(text);
        m.width = index.at("width").get<int>();
        m.height = index.at("height").get<int>();
        m.factor = index.at("factor").get<int>();
        m.objective = index.value("objective", 0.0);
        m.initial_objective = index.value("initial_objective", 0.0);
        m.weights = read_floats(in, index.at("weights").at("count").get<std::size_t>(), "weights");
        for (const auto& b : index.at("bands")) {
            m.band_ids.push_back(b.at("band_id").get<std::string>());
            m.ranges.push_back({b.at("range").at(0).get<double>(), b.at("range").at(1).get<double>()});
            LatticeGrid g = LatticeGrid::filled(b.at("lattice_width").get<int>(), b.at("lattice_height").get<int>(), 0.0);
            g.values = read_floats(in, b.at("count").get<std::size_t>(), m.band_ids.back());
            if (g.values.size() != g.valid.size()) throw FormatError(path.string() + ": lattice size mismatch");
            for (std::size_t i = 0; i < g.values.size(); ++i) g.valid[i] = std::isfinite(g.values[i]) ? 1 : 0;
            m.shared.push_back(std::move(g));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (m.weights.size() != 4 * static_cast<std::size_t>(m.width) * static_cast<std::size_t>(m.height)) {
        throw FormatError(path.string() + ": weight count does not match the grid");
    }
    // float32 storage loses the exact sum to one; restore it.
    for (std::size_t p = 0; p < m.weights.size(); p += 4) {
        m.weights[p + 3] = 1.0 - m.weights[p] - m.weights[p + 1] - m.weights[p + 2];
    }
    return m;
}

}  // namespace srunmix
