#include "synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>

#include "json.hpp"
#include "srunmix/error.hpp"
#include "srunmix/pipeline.hpp"

namespace srunmix::synth {
namespace {

constexpr int kSubsamples = 4;  // per pixel side, for sub-pixel coverage

// Portable draws on top of mt19937_64 (the std distributions are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int integer(int lo, int hi) { return lo + static_cast<int>(uniform() * (hi - lo + 1)) % (hi - lo + 1); }
    double normal() {
        const double u1 = std::max(uniform(), 1e-300);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

struct Point {
    double x, y;
};

bool inside(const std::vector<Point>& poly, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        if ((poly[i].y > y) != (poly[j].y > y) &&
            x < (poly[j].x - poly[i].x) * (y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x) {
            in = !in;
        }
    }
    return in;
}

// Abundances, K values per pixel summing to one.
using Abundances = std::vector<double>;

Abundances label_coverage(const Spec& spec, const std::function<int(double, double)>& label_at) {
    const int K = spec.materials;
    Abundances a(static_cast<std::size_t>(spec.width) * static_cast<std::size_t>(spec.height) * static_cast<std::size_t>(K), 0.0);
    const double w = 1.0 / (kSubsamples * kSubsamples);
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            double* px = &a[(static_cast<std::size_t>(y) * static_cast<std::size_t>(spec.width) + static_cast<std::size_t>(x)) * static_cast<std::size_t>(K)];
            for (int j = 0; j < kSubsamples; ++j) {
                for (int i = 0; i < kSubsamples; ++i) {
                    const double sx = x + (i + 0.5) / kSubsamples;
                    const double sy = y + (j + 0.5) / kSubsamples;
                    px[label_at(sx, sy)] += w;
                }
            }
        }
    }
    return a;
}

Abundances polygons(const Spec& spec, Rng& rng) {
    struct Shape {
        std::vector<Point> poly;
        int label;
    };
    std::vector<Shape> shapes;
    const int count = 6 + spec.width * spec.height / 300;
    const double rmax = 0.3 * std::min(spec.width, spec.height);
    for (int s = 0; s < count; ++s) {
        Shape shape;
        shape.label = rng.integer(0, spec.materials - 1);
        const double cx = rng.uniform(0, spec.width);
        const double cy = rng.uniform(0, spec.height);
        const double radius = rng.uniform(2.5, std::max(3.0, rmax));
        const int vertices = rng.integer(3, 7);
        std::vector<double> angles(static_cast<std::size_t>(vertices));
        for (auto& t : angles) t = rng.uniform(0, 2 * std::numbers::pi);
        std::sort(angles.begin(), angles.end());
        for (double t : angles) {
            const double r = radius * rng.uniform(0.5, 1.0);
            shape.poly.push_back({cx + r * std::cos(t), cy + r * std::sin(t)});
        }
        shapes.push_back(std::move(shape));
    }
    const int background = rng.integer(0, spec.materials - 1);
    return label_coverage(spec, [&](double x, double y) {
        for (auto it = shapes.rbegin(); it != shapes.rend(); ++it) {
            if (inside(it->poly, x, y)) return it->label;
        }
        return background;
    });
}

Abundances steps(const Spec& spec, Rng& rng) {
    struct Line {
        double nx, ny, offset;
    };
    std::vector<Line> lines;
    const int count = 3 + spec.width / 32;
    for (int i = 0; i < count; ++i) {
        const double t = rng.uniform(0, std::numbers::pi);
        const double px = rng.uniform(0, spec.width);
        const double py = rng.uniform(0, spec.height);
        lines.push_back({std::cos(t), std::sin(t), std::cos(t) * px + std::sin(t) * py});
    }
    std::vector<int> table(std::size_t{1} << lines.size());
    for (auto& v : table) v = rng.integer(0, spec.materials - 1);
    return label_coverage(spec, [&](double x, double y) {
        std::size_t code = 0;
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (lines[i].nx * x + lines[i].ny * y > lines[i].offset) code |= std::size_t{1} << i;
        }
        return table[code];
    });
}

Abundances gradients(const Spec& spec, Rng& rng) {
    const int K = spec.materials;
    struct Wave {
        double kx, ky, phase, amp;
    };
    std::vector<std::vector<Wave>> waves(static_cast<std::size_t>(K));
    for (auto& list : waves) {
        for (int i = 0; i < 3; ++i) {
            const double period = rng.uniform(8.0, 3.0 * std::max(spec.width, spec.height));
            const double t = rng.uniform(0, 2 * std::numbers::pi);
            list.push_back({2 * std::numbers::pi / period * std::cos(t), 2 * std::numbers::pi / period * std::sin(t),
                            rng.uniform(0, 2 * std::numbers::pi), rng.uniform(0.5, 2.0)});
        }
    }
    Abundances a(static_cast<std::size_t>(spec.width) * static_cast<std::size_t>(spec.height) * static_cast<std::size_t>(K), 0.0);
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            double* px = &a[(static_cast<std::size_t>(y) * static_cast<std::size_t>(spec.width) + static_cast<std::size_t>(x)) * static_cast<std::size_t>(K)];
            double total = 0.0;
            for (int m = 0; m < K; ++m) {
                double e = 0.0;
                for (const auto& wv : waves[static_cast<std::size_t>(m)]) {
                    e += wv.amp * std::sin(wv.kx * (x + 0.5) + wv.ky * (y + 0.5) + wv.phase);
                }
                px[m] = std::exp(e);
                total += px[m];
            }
            for (int m = 0; m < K; ++m) px[m] /= total;
        }
    }
    return a;
}

// Rounds through float32 so that in-memory scenes equal their files exactly.
double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

BandGrid render(const Spec& spec, const Abundances& a, const std::vector<double>& reflectance) {
    BandGrid g = BandGrid::filled(spec.width, spec.height, 0.0, {0.0, 1.0});
    const auto K = static_cast<std::size_t>(spec.materials);
    for (std::size_t p = 0; p < g.size(); ++p) {
        double v = 0.0;
        for (std::size_t m = 0; m < K; ++m) v += a[p * K + m] * reflectance[m];
        g.values[p] = v;
    }
    return g;
}

void add_noise(BandGrid& g, double sigma, Rng& rng) {
    for (double& v : g.values) {
        if (sigma > 0) v += sigma * rng.normal();
        v = quantize(g.range.clamp(v));
    }
}

void label(BandGrid& g, const std::string& id, double wavelength, double pixel_size) {
    g.band_id = id;
    g.wavelength_nm = wavelength;
    g.pixel_size_m = pixel_size;
}

}  // namespace

Kind parse_kind(const std::string& text) {
    if (text == "polygons") return Kind::polygons;
    if (text == "steps") return Kind::steps;
    if (text == "gradients") return Kind::gradients;
    throw PreconditionError("unknown scene kind '" + text + "' (expected polygons, steps or gradients)");
}

const char* to_string(Kind kind) {
    switch (kind) {
        case Kind::polygons: return "polygons";
        case Kind::steps: return "steps";
        case Kind::gradients: return "gradients";
    }
    return "?";
}

void Spec::validate() const {
    if (width < 2 || height < 2) throw PreconditionError("scene must be at least 2x2");
    if (factor != 2 && factor != 3) throw PreconditionError("factor must be 2 or 3");
    const int unit = sentinel2 ? 6 : factor;
    if (width % unit != 0 || height % unit != 0) {
        throw DimensionError("scene size " + std::to_string(width) + "x" + std::to_string(height) +
                             " is not divisible by " + std::to_string(unit));
    }
    if (!sentinel2 && (high_bands < 1 || low_bands < 0)) throw PreconditionError("need at least one high band");
    if (materials < 2) throw PreconditionError("need at least two materials");
    if (noise < 0) throw PreconditionError("noise must be non-negative");
}

Scene generate(const Spec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Abundances a;
    switch (spec.kind) {
        case Kind::polygons: a = polygons(spec, rng); break;
        case Kind::steps: a = steps(spec, rng); break;
        case Kind::gradients: a = gradients(spec, rng); break;
    }

    Scene scene;
    scene.manifest.scene_id = std::string(to_string(spec.kind)) + "_" + std::to_string(spec.seed);
    const auto K = static_cast<std::size_t>(spec.materials);

    if (spec.sentinel2) {
        scene.manifest.factor = 2;
        // Smooth random spectra sampled at the band centres.
        const std::vector<double> knots = {400, 550, 700, 850, 1000, 1400, 1800, 2400};
        std::vector<std::vector<double>> spectra(K);
        for (auto& s : spectra) {
            for (std::size_t i = 0; i < knots.size(); ++i) s.push_back(rng.uniform(0.03, 0.7));
        }
        auto sample = [&](const std::vector<double>& s, double wl) {
            std::size_t i = 0;
            while (i + 2 < knots.size() && wl > knots[i + 1]) ++i;
            const double t = std::clamp((wl - knots[i]) / (knots[i + 1] - knots[i]), 0.0, 1.0);
            return s[i] + t * (s[i + 1] - s[i]);
        };
        for (const auto& info : sentinel2_bands()) {
            std::vector<double> refl(K);
            for (std::size_t m = 0; m < K; ++m) refl[m] = sample(spectra[m], info.wavelength_nm);
            BandGrid truth = render(spec, a, refl);
            for (double& v : truth.values) v = quantize(v);
            label(truth, info.id, info.wavelength_nm, 10.0);
            const int ratio = static_cast<int>(info.pixel_size_m / 10.0);
            if (ratio == 1) {
                add_noise(truth, spec.noise, rng);
                scene.manifest.high_bands.push_back(std::move(truth));
            } else {
                BandGrid low = block_mean(truth, ratio);
                label(low, info.id, info.wavelength_nm, info.pixel_size_m);
                add_noise(low, spec.noise, rng);
                scene.manifest.low_bands.push_back(std::move(low));
                scene.truth.push_back(std::move(truth));
                scene.truth_mixes.emplace_back();
            }
        }
        return scene;
    }

    scene.manifest.factor = spec.factor;
    std::vector<BandGrid> clean;
    for (int b = 0; b < spec.high_bands; ++b) {
        std::vector<double> refl(K);
        for (auto& r : refl) r = rng.uniform(0.05, 0.7);
        BandGrid h = render(spec, a, refl);
        label(h, "H" + std::to_string(b + 1), 450.0 + 100.0 * b, 10.0);
        clean.push_back(h);
        add_noise(h, spec.noise, rng);
        scene.manifest.high_bands.push_back(std::move(h));
    }
    for (int b = 0; b < spec.low_bands; ++b) {
        // Hidden truth: a fixed convex combination of the noiseless high bands.
        std::vector<double> mix(static_cast<std::size_t>(spec.high_bands));
        double total = 0.0;
        for (auto& c : mix) {
            c = rng.uniform(0.0, 1.0);
            total += c;
        }
        for (auto& c : mix) c /= total;
        BandGrid truth = BandGrid::filled(spec.width, spec.height, 0.0, {0.0, 1.0});
        for (std::size_t p = 0; p < truth.size(); ++p) {
            double v = 0.0;
            for (std::size_t j = 0; j < mix.size(); ++j) v += mix[j] * clean[j].values[p];
            truth.values[p] = quantize(v);
        }
        label(truth, "L" + std::to_string(b + 1), 700.0 + 150.0 * b, 10.0);
        BandGrid low = block_mean(truth, spec.factor);
        label(low, truth.band_id, truth.wavelength_nm, 10.0 * spec.factor);
        add_noise(low, spec.noise, rng);
        scene.manifest.low_bands.push_back(std::move(low));
        scene.truth.push_back(std::move(truth));
        scene.truth_mixes.push_back(std::move(mix));
    }
    return scene;
}

void write(const Scene& scene, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "truth");
    save_manifest(scene.manifest, dir / "manifest.json");
    nlohmann::json doc;
    doc["scene_id"] = scene.manifest.scene_id;
    doc["truth"] = nlohmann::json::array();
    for (std::size_t i = 0; i < scene.truth.size(); ++i) {
        const auto& t = scene.truth[i];
        const std::string rel = "truth/" + t.band_id + ".srb";
        save_band(t, dir / rel);
        nlohmann::json entry = {{"band_id", t.band_id}, {"wavelength_nm", t.wavelength_nm},
                                {"pixel_size_m", t.pixel_size_m}, {"path", rel}};
        if (i < scene.truth_mixes.size() && !scene.truth_mixes[i].empty()) entry["high_band_mix"] = scene.truth_mixes[i];
        doc["truth"].push_back(entry);
    }
    std::ofstream out(dir / "truth.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "truth.json").string());
    out << doc.dump(2) << '\n';
}

std::vector<BandGrid> load_truth(const std::filesystem::path& dir) {
    std::ifstream in(dir / "truth.json");
    if (!in) throw IoError("cannot open " + (dir / "truth.json").string());
    const auto doc = nlohmann::json::parse(in);
    std::vector<BandGrid> out;
    for (const auto& e : doc.at("truth")) {
        BandGrid g = load_band(dir / e.at("path").get<std::string>());
        g.band_id = e.at("band_id").get<std::string>();
        g.wavelength_nm = e.value("wavelength_nm", 0.0);
        g.pixel_size_m = e.value("pixel_size_m", 0.0);
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace srunmix::synth
