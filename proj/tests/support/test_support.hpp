#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "srunmix/raster.hpp"

namespace srunmix::testing {

inline double uniform(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

inline BandGrid random_band(int w, int h, std::uint64_t seed, double lo = 0.05, double hi = 0.9) {
    std::mt19937_64 rng(seed);
    BandGrid g = BandGrid::filled(w, h, 0.0);
    for (double& v : g.values) v = uniform(rng, lo, hi);
    return g;
}

inline BandGrid band_from(int w, int h, std::initializer_list<double> values) {
    BandGrid g = BandGrid::filled(w, h, 0.0);
    std::size_t i = 0;
    for (double v : values) g.values[i++] = v;
    return g;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("srunmix_" + tag + "_" + std::to_string(rd()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace srunmix::testing
