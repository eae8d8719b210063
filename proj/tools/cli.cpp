#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>

#include "CLI11.hpp"
#include "json.hpp"
#include "srunmix/error.hpp"
#include "srunmix/metrics.hpp"
#include "srunmix/parallel.hpp"
#include "srunmix/pipeline.hpp"
#include "synth.hpp"

namespace srunmix::cli {
namespace fs = std::filesystem;
namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

const std::map<std::string, Ablation> kAblations = {
    {"no-shared", Ablation::no_shared_values},
    {"no-ratio", Ablation::no_ratio_sharpening},
    {"uniform-weights", Ablation::uniform_weights},
};

const std::map<std::string, ProximityMode> kProximity = {
    {"literal", ProximityMode::literal},
    {"complement", ProximityMode::complement},
};

const std::map<std::string, ErgasMode> kErgas = {
    {"literal", ErgasMode::literal},
    {"standard", ErgasMode::standard},
};

template <class Map>
std::vector<std::string> keys(const Map& m) {
    std::vector<std::string> out;
    for (const auto& [k, v] : m) out.push_back(k);
    return out;
}

// Options shared by superres and evaluate.
struct PipelineFlags {
    PipelineOptions opts;
    std::vector<std::string> ablate;
    std::string proximity = "literal";
    std::string model_cache;
    unsigned threads = 0;

    void attach(CLI::App& app) {
        app.add_option("--ablate", ablate, "Disable one stage of the method (at most once)")
            ->check(CLI::IsMember(keys(kAblations)))
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        app.add_option("--proximity", proximity, "Proximity weighting of the high bands")
            ->check(CLI::IsMember(keys(kProximity)))
            ->capture_default_str();
        app.add_option("--tile-size", opts.tile_size, "Tile size in low-resolution pixels")->capture_default_str();
        app.add_option("--tile-overlap", opts.tile_overlap, "Tile overlap in low-resolution pixels")
            ->capture_default_str();
        app.add_option("--threads", threads, "Worker threads (0 = all cores)")
            ->envname("SRUNMIX_THREADS")
            ->capture_default_str();
        app.add_option("--bands", opts.bands, "Low-resolution band ids to produce (default: all)");
        app.add_option("--model-cache", model_cache, "Directory for cached geometry fits");

        auto& s = opts.solver;
        app.add_option("--max-iterations", s.max_outer_iterations, "Outer solver iterations per penalty stage")
            ->capture_default_str();
        app.add_option("--gradient-tolerance", s.gradient_tolerance, "Relative gradient tolerance")
            ->capture_default_str();
        app.add_option("--function-tolerance", s.function_tolerance, "Relative objective decrease tolerance")
            ->capture_default_str();
        app.add_option("--cg-max-iterations", s.cg_max_iterations, "Conjugate-gradient iterations per step")
            ->capture_default_str();
        app.add_option("--cg-tolerance", s.cg_relative_tolerance, "Conjugate-gradient relative residual")
            ->capture_default_str();
        app.add_option("--bound-penalty", s.bound_penalty_weight, "Soft-bound penalty weight")->capture_default_str();
        app.add_option("--bound-tolerance", s.bound_tolerance, "Allowed soft-bound violation")->capture_default_str();
        app.add_option("--max-penalty-increases", s.max_penalty_increases, "Penalty continuation stages")
            ->capture_default_str();
        app.add_option("--ridge-lambda", s.ridge_lambda, "Ridge weight of the neighbourhood fit")->capture_default_str();

        auto& sh = opts.sharpening;
        app.add_option("--epsilon-fraction", sh.epsilon_fraction, "Reflectance floor as a fraction of the range")
            ->capture_default_str();
        app.add_option("--q-min", sh.q_min, "Lower sharpening-ratio clamp")->capture_default_str();
        app.add_option("--q-max", sh.q_max, "Upper sharpening-ratio clamp")->capture_default_str();
    }

    PipelineOptions resolve() {
        if (ablate.size() > 1) throw UsageError("--ablate may be given at most once (ablations are exclusive)");
        if (!ablate.empty()) opts.sharpening.ablation = kAblations.at(ablate.front());
        opts.sharpening.proximity = kProximity.at(proximity);
        if (!model_cache.empty()) opts.model_cache_dir = model_cache;
        try {
            opts.validate();
        } catch (const PreconditionError& e) {
            throw UsageError(e.what());
        }
        set_thread_count(threads);
        return opts;
    }
};

nlohmann::json summary_json(const SceneResult& r, const PipelineOptions& opts, const std::vector<std::string>& files) {
    nlohmann::json doc;
    doc["seconds"] = r.seconds;
    doc["threads"] = thread_count();
    doc["ablation"] = to_string(opts.sharpening.ablation);
    doc["proximity"] = to_string(opts.sharpening.proximity);
    doc["tile_size"] = opts.tile_size;
    doc["tile_overlap"] = opts.tile_overlap;
    doc["outputs"] = files;
    doc["passes"] = nlohmann::json::array();
    for (const auto& p : r.passes) {
        doc["passes"].push_back({{"name", p.name},
                                 {"factor", p.factor},
                                 {"high_bands", p.high_bands},
                                 {"low_bands", p.low_bands},
                                 {"initial_objective", p.initial_objective},
                                 {"objective", p.objective},
                                 {"iterations", p.iterations},
                                 {"cg_iterations", p.cg_iterations},
                                 {"model_from_cache", p.model_from_cache},
                                 {"fit_seconds", p.fit_seconds},
                                 {"unmix_seconds", p.unmix_seconds}});
    }
    doc["tiles"] = nlohmann::json::array();
    for (const auto& t : r.tiles) {
        doc["tiles"].push_back({{"index", t.index},
                                {"x0", t.x0},
                                {"y0", t.y0},
                                {"width", t.width},
                                {"height", t.height},
                                {"seam_max_abs", t.seam_max_abs}});
    }
    doc["warnings"] = r.warnings;
    return doc;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

// Removes the files it tracks unless released.
class OutputGuard {
public:
    explicit OutputGuard(fs::path dir) : dir_(std::move(dir)), created_dir_(!fs::exists(dir_)) {}
    ~OutputGuard() {
        if (released_) return;
        std::error_code ec;
        for (const auto& f : files_) fs::remove(f, ec);
        if (created_dir_) fs::remove(dir_, ec);  // only succeeds when empty
    }
    void track(const fs::path& p) { files_.push_back(p); }
    void release() { released_ = true; }

private:
    fs::path dir_;
    bool created_dir_;
    bool released_ = false;
    std::vector<fs::path> files_;
};

int cmd_downsample(const std::string& in, int factor, const std::string& out_path, std::ostream& out) {
    const BandGrid g = load_band(in);
    save_band(downsample(g, factor), out_path);
    out << "wrote " << out_path << '\n';
    return kOk;
}

int cmd_superres(const std::string& manifest_path, const std::string& out_dir, PipelineFlags& flags,
                 std::ostream& out, std::ostream& err) {
    const PipelineOptions opts = flags.resolve();
    const SceneManifest manifest = load_manifest(manifest_path);
    OutputGuard guard(out_dir);
    fs::create_directories(out_dir);
    const SceneResult result = run_tiled(manifest, opts);
    std::vector<std::string> files;
    for (const auto& b : result.outputs) {
        const fs::path p = fs::path(out_dir) / (b.band_id + ".srb");
        guard.track(p);
        save_band(b, p);
        files.push_back(p.filename().string());
    }
    const fs::path summary = fs::path(out_dir) / "run_summary.json";
    guard.track(summary);
    write_text(summary, summary_json(result, opts, files).dump(2) + "\n");
    guard.release();
    for (const auto& w : result.warnings) err << "warning: " << w << '\n';
    out << "super-resolved " << result.outputs.size() << " band(s) into " << out_dir << " in " << result.seconds
        << " s\n";
    return kOk;
}

int cmd_evaluate(const std::string& manifest_path, const std::string& out_dir, const std::string& mode,
                 PipelineFlags& flags, std::ostream& out) {
    const PipelineOptions opts = flags.resolve();
    const SceneManifest manifest = load_manifest(manifest_path);
    const QualityReport report = evaluate_proxy(manifest, opts, kErgas.at(mode));
    const std::string table = report_table(report);
    if (!out_dir.empty()) {
        OutputGuard guard(out_dir);
        fs::create_directories(out_dir);
        guard.track(fs::path(out_dir) / "quality.json");
        write_text(fs::path(out_dir) / "quality.json", report_json(report));
        guard.track(fs::path(out_dir) / "quality.txt");
        write_text(fs::path(out_dir) / "quality.txt", table);
        guard.release();
    }
    out << table;
    return kOk;
}

synth::Spec parse_synth(const std::string& kind, const std::string& size, const std::string& bands, int factor,
                        int materials, double noise, std::uint64_t seed, bool sentinel2) {
    synth::Spec spec;
    spec.kind = synth::parse_kind(kind);
    std::smatch m;
    if (std::regex_match(size, m, std::regex(R"((\d+)(?:x(\d+))?)"))) {
        spec.width = std::stoi(m[1]);
        spec.height = m[2].matched ? std::stoi(m[2]) : spec.width;
    } else {
        throw UsageError("--size expects N or WxH, got '" + size + "'");
    }
    if (std::regex_match(bands, m, std::regex(R"((\d+)\+(\d+))"))) {
        spec.high_bands = std::stoi(m[1]);
        spec.low_bands = std::stoi(m[2]);
    } else {
        throw UsageError("--bands expects HIGH+LOW, got '" + bands + "'");
    }
    spec.factor = factor;
    spec.materials = materials;
    spec.noise = noise;
    spec.seed = seed;
    spec.sentinel2 = sentinel2;
    spec.validate();
    return spec;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multispectral super-resolution by sub-pixel unmixing"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every command");

    std::string ds_in, ds_out;
    int ds_factor = 2;
    auto* ds = app.add_subcommand("downsample", "Block-mean downsampling of one band file");
    ds->add_option("--in", ds_in, "Input band file")->required();
    ds->add_option("--factor", ds_factor, "Resolution factor")->check(CLI::IsMember({2, 3}))->capture_default_str();
    ds->add_option("--out", ds_out, "Output band file")->required();

    std::string sr_manifest, sr_out;
    PipelineFlags sr_flags;
    auto* sr = app.add_subcommand("superres", "Super-resolve every low-resolution band of a scene");
    sr->add_option("--manifest", sr_manifest, "Scene manifest (JSON)")->required();
    sr->add_option("--out", sr_out, "Output directory")->required();
    sr_flags.attach(*sr);

    std::string ev_manifest, ev_out, ev_mode = "literal";
    PipelineFlags ev_flags;
    auto* ev = app.add_subcommand("evaluate", "Reduced-resolution quality assessment (Q, ERGAS, SAM)");
    ev->add_option("--manifest", ev_manifest, "Scene manifest (JSON)")->required();
    ev->add_option("--out", ev_out, "Directory for quality.json and quality.txt");
    ev->add_option("--ergas-mode", ev_mode, "ERGAS denominator: mean (literal) or mean squared (standard)")
        ->check(CLI::IsMember(keys(kErgas)))
        ->capture_default_str();
    ev_flags.attach(*ev);

    std::string sy_kind = "polygons", sy_size = "64", sy_bands = "4+2", sy_out;
    int sy_factor = 2, sy_materials = 6;
    double sy_noise = 0.0;
    std::uint64_t sy_seed = 1;
    bool sy_s2 = false;
    auto* sy = app.add_subcommand("synth", "Generate a synthetic scene with hidden ground truth");
    sy->add_option("--kind", sy_kind, "polygons, steps or gradients")
        ->check(CLI::IsMember({"polygons", "steps", "gradients"}))
        ->capture_default_str();
    sy->add_option("--size", sy_size, "High-resolution size, N or WxH")->capture_default_str();
    sy->add_option("--bands", sy_bands, "High and low band counts, HIGH+LOW")->capture_default_str();
    sy->add_option("--factor", sy_factor, "Resolution factor")->check(CLI::IsMember({2, 3}))->capture_default_str();
    sy->add_option("--materials", sy_materials, "Number of materials")->capture_default_str();
    sy->add_option("--noise", sy_noise, "Gaussian noise standard deviation")->capture_default_str();
    sy->add_option("--seed", sy_seed, "Random seed")->capture_default_str();
    sy->add_flag("--sentinel2", sy_s2, "Emit the 13 Sentinel-2 bands at 10/20/60 m instead");
    sy->add_option("--out", sy_out, "Output directory")->required();

    std::vector<std::string> storage = args;
    storage.insert(storage.begin(), "srunmix");
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*ds) return cmd_downsample(ds_in, ds_factor, ds_out, out);
        if (*sr) return cmd_superres(sr_manifest, sr_out, sr_flags, out, err);
        if (*ev) return cmd_evaluate(ev_manifest, ev_out, ev_mode, ev_flags, out);
        if (*sy) {
            synth::Spec spec;
            try {
                spec = parse_synth(sy_kind, sy_size, sy_bands, sy_factor, sy_materials, sy_noise, sy_seed, sy_s2);
            } catch (const Error& e) {
                throw UsageError(e.what());
            }
            const synth::Scene scene = synth::generate(spec);
            synth::write(scene, sy_out);
            out << "wrote scene '" << scene.manifest.scene_id << "' to " << sy_out << '\n';
            return kOk;
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kData;
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed JSON: " << e.what() << '\n';
        return kData;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kUsage;
}

}  // namespace srunmix::cli
