#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"
#include "srunmix/parallel.hpp"
#include "srunmix/raster.hpp"
#include "test_support.hpp"

using namespace srunmix;
using srunmix::testing::TempDir;

namespace {

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

CliRun run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    set_thread_count(1);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string synth_scene(const TempDir& dir, const std::string& name, std::vector<std::string> extra = {}) {
    const std::string out = (dir / name).string();
    std::vector<std::string> args = {"synth", "--size", "24", "--out", out};
    args.insert(args.end(), extra.begin(), extra.end());
    EXPECT_EQ(run(args).code, 0);
    return out;
}

}  // namespace

TEST(Cli, HelpAndUsage) {
    EXPECT_EQ(run({"--help"}).code, 0);
    const CliRun help = run({"superres", "--help"});
    EXPECT_EQ(help.code, 0);
    EXPECT_NE(help.out.find("--ridge-lambda"), std::string::npos);
    EXPECT_NE(help.out.find("0.001"), std::string::npos);
    EXPECT_EQ(run({}).code, 2);
    EXPECT_EQ(run({"frobnicate"}).code, 2);
    EXPECT_EQ(run({"superres", "--manifest", "m.json", "--out", "o", "--no-such-flag"}).code, 2);
}

TEST(Cli, Downsample) {
    TempDir dir("cli");
    BandGrid g = BandGrid::filled(4, 4, 0.2);
    g.at(0, 0) = 0.6;
    save_band(g, dir / "b.srb");
    const std::string out = (dir / "b40.srb").string();
    EXPECT_EQ(run({"downsample", "--in", (dir / "b.srb").string(), "--factor", "2", "--out", out}).code, 0);
    const BandGrid d = load_band(out);
    EXPECT_EQ(d.width, 2);
    EXPECT_NEAR(d.at(0, 0), 0.3, 1e-7);
    EXPECT_EQ(run({"downsample", "--in", (dir / "b.srb").string(), "--factor", "5", "--out", out}).code, 2);
    save_band(BandGrid::filled(5, 4, 0.2), dir / "odd.srb");
    EXPECT_EQ(run({"downsample", "--in", (dir / "odd.srb").string(), "--factor", "2", "--out", out}).code, 3);
    EXPECT_EQ(run({"downsample", "--in", (dir / "missing.srb").string(), "--factor", "2", "--out", out}).code, 3);
}

TEST(Cli, SynthIsDeterministic) {
    TempDir dir("cli");
    const std::string a = synth_scene(dir, "a", {"--seed", "7", "--bands", "4+2"});
    const std::string b = synth_scene(dir, "b", {"--seed", "7", "--bands", "4+2"});
    std::size_t files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(e.path(), a);
        EXPECT_EQ(slurp(e.path()), slurp(std::filesystem::path(b) / rel)) << rel;
        ++files;
    }
    EXPECT_EQ(files, 1u + 6u + 1u + 2u);
    const std::string c = synth_scene(dir, "c", {"--seed", "8"});
    EXPECT_NE(slurp(std::filesystem::path(a) / "manifest.json").size(), 0u);
    EXPECT_NE(slurp(std::filesystem::path(a) / "H1.srb"), slurp(std::filesystem::path(c) / "H1.srb"));
}

TEST(Cli, SynthRejectsNonDivisibleSize) {
    TempDir dir("cli");
    EXPECT_EQ(run({"synth", "--size", "25", "--out", (dir / "x").string()}).code, 2);
    EXPECT_EQ(run({"synth", "--size", "30", "--sentinel2", "--out", (dir / "y").string()}).code, 0);
    EXPECT_EQ(run({"synth", "--size", "32", "--sentinel2", "--out", (dir / "z").string()}).code, 2);
    EXPECT_EQ(run({"synth", "--bands", "four", "--out", (dir / "w").string()}).code, 2);
}

TEST(Cli, SuperresWritesBandsAndSummary) {
    TempDir dir("cli");
    const std::string scene = synth_scene(dir, "s");
    const std::string out = (dir / "out").string();
    const CliRun r = run({"superres", "--manifest", scene + "/manifest.json", "--out", out, "--threads", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::filesystem::exists(out + "/L1.srb"));
    EXPECT_TRUE(std::filesystem::exists(out + "/L2.srb"));
    const auto summary = nlohmann::json::parse(slurp(out + "/run_summary.json"));
    EXPECT_EQ(summary["outputs"].size(), 2u);
    EXPECT_GE(summary["passes"][0]["iterations"].get<int>(), 1);
    EXPECT_EQ(load_band(out + "/L1.srb").width, 24);
}

TEST(Cli, AblationsAreExclusive) {
    TempDir dir("cli");
    const std::string scene = synth_scene(dir, "s");
    const std::string out = (dir / "out").string();
    EXPECT_EQ(run({"superres", "--manifest", scene + "/manifest.json", "--out", out, "--ablate", "no-shared",
                   "--ablate", "no-ratio"})
                  .code,
              2);
    EXPECT_FALSE(std::filesystem::exists(out));
    EXPECT_EQ(run({"superres", "--manifest", scene + "/manifest.json", "--out", out, "--ablate", "sideways"}).code, 2);
    EXPECT_EQ(run({"superres", "--manifest", scene + "/manifest.json", "--out", out, "--ablate", "uniform-weights"})
                  .code,
              0);
    EXPECT_EQ(nlohmann::json::parse(slurp(out + "/run_summary.json"))["ablation"], "uniform-weights");
}

TEST(Cli, BadOptionValuesAreUsageErrors) {
    TempDir dir("cli");
    const std::string scene = synth_scene(dir, "s");
    const std::string out = (dir / "out").string();
    EXPECT_EQ(run({"superres", "--manifest", scene + "/manifest.json", "--out", out, "--tile-size", "4",
                   "--tile-overlap", "2"})
                  .code,
              2);
    EXPECT_EQ(run({"superres", "--manifest", scene + "/manifest.json", "--out", out, "--ridge-lambda", "0"}).code, 2);
}

TEST(Cli, DataErrorsLeaveNoOutputs) {
    TempDir dir("cli");
    std::ofstream(dir / "bad.json") << "{ not json";
    const std::string out = (dir / "out").string();
    EXPECT_EQ(run({"superres", "--manifest", (dir / "bad.json").string(), "--out", out}).code, 3);
    EXPECT_FALSE(std::filesystem::exists(out));
    EXPECT_EQ(run({"superres", "--manifest", (dir / "none.json").string(), "--out", out}).code, 3);
}

TEST(Cli, EvaluateWritesReports) {
    TempDir dir("cli");
    const std::string scene = synth_scene(dir, "s");
    const std::string lit = (dir / "lit").string();
    const std::string std_dir = (dir / "std").string();
    const CliRun a = run({"evaluate", "--manifest", scene + "/manifest.json", "--out", lit});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_NE(a.out.find("Global"), std::string::npos);
    ASSERT_EQ(run({"evaluate", "--manifest", scene + "/manifest.json", "--out", std_dir, "--ergas-mode", "standard"})
                  .code,
              0);
    const auto j1 = nlohmann::json::parse(slurp(lit + "/quality.json"));
    const auto j2 = nlohmann::json::parse(slurp(std_dir + "/quality.json"));
    EXPECT_TRUE(std::filesystem::exists(lit + "/quality.txt"));
    EXPECT_EQ(j1["ergas_mode"], "literal");
    EXPECT_EQ(j2["ergas_mode"], "standard");
    for (std::size_t b = 0; b < j1["bands"].size(); ++b) {
        EXPECT_EQ(j1["bands"][b]["Q"], j2["bands"][b]["Q"]);
        EXPECT_EQ(j1["bands"][b]["SAM"], j2["bands"][b]["SAM"]);
        EXPECT_NE(j1["bands"][b]["ERGAS"], j2["bands"][b]["ERGAS"]);
    }
    EXPECT_EQ(j1["global"]["Q"], j2["global"]["Q"]);
    EXPECT_NE(j1["global"]["ERGAS"], j2["global"]["ERGAS"]);
}

TEST(Cli, EvaluateWithoutHighBandsIsDataError) {
    TempDir dir("cli");
    const std::string scene = synth_scene(dir, "s");
    auto doc = nlohmann::json::parse(slurp(scene + "/manifest.json"));
    doc["high"] = nlohmann::json::array();
    std::ofstream(scene + "/nohigh.json") << doc.dump();
    EXPECT_EQ(run({"evaluate", "--manifest", scene + "/nohigh.json"}).code, 3);
}
