#include "srunmix/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "srunmix/error.hpp"

namespace srunmix {
namespace fs = std::filesystem;

BandGrid BandGrid::filled(int width, int height, double value, ValueRange range) {
    BandGrid g;
    g.width = width;
    g.height = height;
    g.values.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), value);
    g.valid.assign(g.values.size(), 1);
    g.range = range;
    return g;
}

BandGrid BandGrid::like(int new_width, int new_height) const {
    BandGrid g = filled(new_width, new_height, 0.0, range);
    g.band_id = band_id;
    g.wavelength_nm = wavelength_nm;
    g.pixel_size_m = pixel_size_m;
    return g;
}

bool BandGrid::all_valid() const {
    return std::all_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; });
}

void check_grid(const BandGrid& grid, int min_extent) {
    if (grid.width < min_extent || grid.height < min_extent) {
        throw PreconditionError("band '" + grid.band_id + "' has dimensions " + std::to_string(grid.width) +
                                "x" + std::to_string(grid.height) + ", need at least " +
                                std::to_string(min_extent) + " in each direction");
    }
    const auto n = static_cast<std::size_t>(grid.width) * static_cast<std::size_t>(grid.height);
    if (grid.values.size() != n || grid.valid.size() != n) {
        throw PreconditionError("band '" + grid.band_id + "' storage does not match its dimensions");
    }
    if (!(grid.range.min <= grid.range.max)) {
        throw PreconditionError("band '" + grid.band_id + "' has an empty value range");
    }
}

namespace {

float to_le(float v) {
    if constexpr (std::endian::native == std::endian::big) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        bits = __builtin_bswap32(bits);
        std::memcpy(&v, &bits, 4);
    }
    return v;
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string read_header_line(std::istream& in, const char* field) {
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError(std::string("SRB1 header ends before the ") + field + " line");
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

}  // namespace

BandGrid load_band(const fs::path& path, LoadReport* report) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open band file " + path.string());

    if (read_header_line(in, "magic") != "SRB1") {
        throw FormatError(path.string() + ": magic field is not SRB1");
    }
    long long w = 0, h = 0;
    {
        std::istringstream dims(read_header_line(in, "dimensions"));
        std::string rest;
        if (!(dims >> w >> h) || (dims >> rest) || w <= 0 || h <= 0) {
            throw FormatError(path.string() + ": malformed dimensions field");
        }
    }
    if (read_header_line(in, "encoding") != "float32-le") {
        throw FormatError(path.string() + ": unsupported encoding field");
    }
    ValueRange range;
    {
        std::istringstream rs(read_header_line(in, "range"));
        std::string rest;
        if (!(rs >> range.min >> range.max) || (rs >> rest) || !(range.min <= range.max)) {
            throw FormatError(path.string() + ": malformed range field");
        }
    }

    const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    std::vector<float> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(float)));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got != n * sizeof(float) || in.peek() != std::char_traits<char>::eof()) {
        throw TruncationError(path.string() + ": header declares " + std::to_string(n) +
                              " values but the payload size does not match");
    }

    BandGrid g = BandGrid::filled(static_cast<int>(w), static_cast<int>(h), 0.0, range);
    LoadReport local;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(to_le(raw[i]));
        if (!std::isfinite(v)) {
            g.values[i] = std::numeric_limits<double>::quiet_NaN();
            g.valid[i] = 0;
            ++local.non_finite;
            continue;
        }
        if (!range.contains(v)) {
            g.values[i] = range.clamp(v);
            ++local.clamped;
        } else {
            g.values[i] = v;
        }
    }
    if (report) *report = local;
    return g;
}

void save_band(const BandGrid& grid, const fs::path& path) {
    check_grid(grid, 1);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write band file " + path.string());
    out << "SRB1\n"
        << grid.width << ' ' << grid.height << '\n'
        << "float32-le\n"
        << format_double(grid.range.min) << ' ' << format_double(grid.range.max) << '\n';
    std::vector<float> raw(grid.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const float v = grid.valid[i] ? static_cast<float>(grid.values[i]) : std::numeric_limits<float>::quiet_NaN();
        raw[i] = to_le(v);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!out) throw IoError("short write on band file " + path.string());
}

BandGrid block_mean(const BandGrid& grid, int factor) {
    check_grid(grid, 1);
    if (factor < 1) throw PreconditionError("block factor must be positive");
    if (grid.width % factor != 0 || grid.height % factor != 0) {
        throw DimensionError("band '" + grid.band_id + "' (" + std::to_string(grid.width) + "x" +
                             std::to_string(grid.height) + ") is not divisible by factor " +
                             std::to_string(factor) + "; crop the input to a multiple of the factor");
    }
    BandGrid out = grid.like(grid.width / factor, grid.height / factor);
    out.pixel_size_m = grid.pixel_size_m * factor;
    for (int Y = 0; Y < out.height; ++Y) {
        for (int X = 0; X < out.width; ++X) {
            double sum = 0.0;
            int count = 0;
            for (int j = 0; j < factor; ++j) {
                for (int i = 0; i < factor; ++i) {
                    const int x = X * factor + i;
                    const int y = Y * factor + j;
                    if (grid.is_valid(x, y)) {
                        sum += grid.at(x, y);
                        ++count;
                    }
                }
            }
            if (count > 0) {
                out.at(X, Y) = sum / count;
            } else {
                out.at(X, Y) = std::numeric_limits<double>::quiet_NaN();
                out.valid[out.index(X, Y)] = 0;
            }
        }
    }
    return out;
}

BandGrid downsample(const BandGrid& grid, int factor) {
    if (factor != 2 && factor != 3) {
        throw PreconditionError("downsample factor must be 2 or 3, got " + std::to_string(factor));
    }
    return block_mean(grid, factor);
}

BandGrid upsample_nearest(const BandGrid& grid, int factor) {
    check_grid(grid, 1);
    BandGrid out = grid.like(grid.width * factor, grid.height * factor);
    out.pixel_size_m = grid.pixel_size_m / factor;
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const auto src = grid.index(x / factor, y / factor);
            out.at(x, y) = grid.values[src];
            out.valid[out.index(x, y)] = grid.valid[src];
        }
    }
    return out;
}

BandGrid crop(const BandGrid& grid, int x0, int y0, int width, int height) {
    if (x0 < 0 || y0 < 0 || width <= 0 || height <= 0 || x0 + width > grid.width || y0 + height > grid.height) {
        throw DimensionError("crop window outside band '" + grid.band_id + "'");
    }
    BandGrid out = grid.like(width, height);
    for (int y = 0; y < height; ++y) {
        const auto src = grid.index(x0, y0 + y);
        std::copy_n(grid.values.begin() + static_cast<std::ptrdiff_t>(src), width,
                    out.values.begin() + static_cast<std::ptrdiff_t>(out.index(0, y)));
        std::copy_n(grid.valid.begin() + static_cast<std::ptrdiff_t>(src), width,
                    out.valid.begin() + static_cast<std::ptrdiff_t>(out.index(0, y)));
    }
    return out;
}

void paste(BandGrid& dest, const BandGrid& tile, int x0, int y0) {
    for (int y = 0; y < tile.height; ++y) {
        const int dy = y0 + y;
        if (dy < 0 || dy >= dest.height) continue;
        for (int x = 0; x < tile.width; ++x) {
            const int dx = x0 + x;
            if (dx < 0 || dx >= dest.width) continue;
            dest.at(dx, dy) = tile.at(x, y);
            dest.valid[dest.index(dx, dy)] = tile.valid[tile.index(x, y)];
        }
    }
}

int SceneManifest::ratio_of(const BandGrid& low) const {
    const int hw = high_width();
    const int hh = high_height();
    for (int r : {factor, 6}) {
        if (r == 6 && factor != 2) continue;
        if (low.width * r == hw && low.height * r == hh) return r;
    }
    return 0;
}

std::vector<std::string> validate_manifest(const SceneManifest& m) {
    std::vector<std::string> warnings;
    if (m.factor != 2 && m.factor != 3) {
        throw ManifestError("manifest factor must be 2 or 3, got " + std::to_string(m.factor));
    }
    if (m.high_bands.empty()) throw ManifestError("manifest has no high-resolution bands");
    std::set<std::string> ids;
    for (const auto& b : m.high_bands) {
        check_grid(b, 2);
        if (b.width != m.high_width() || b.height != m.high_height()) {
            throw ManifestError("high-resolution band '" + b.band_id + "' differs in size from the others");
        }
        if (!ids.insert(b.band_id).second) throw ManifestError("duplicate band id '" + b.band_id + "'");
    }
    for (const auto& b : m.low_bands) {
        check_grid(b, 1);
        if (m.ratio_of(b) == 0) {
            throw ManifestError("low-resolution band '" + b.band_id + "' (" + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + ") is not a supported fraction of the " +
                                std::to_string(m.high_width()) + "x" + std::to_string(m.high_height()) +
                                " high-resolution grid");
        }
        if (!ids.insert(b.band_id).second) throw ManifestError("duplicate band id '" + b.band_id + "'");
    }
    if (m.factor == 3 && m.high_bands.size() < 8) {
        warnings.push_back("factor 3 with only " + std::to_string(m.high_bands.size()) +
                           " high-resolution bands; at least 8 are recommended to constrain the weights");
    }
    return warnings;
}

namespace {

BandGrid load_entry(const nlohmann::json& entry, const fs::path& base) {
    for (const char* key : {"band_id", "path"}) {
        if (!entry.contains(key) || !entry.at(key).is_string()) {
            throw FormatError(std::string("manifest band entry lacks string field '") + key + "'");
        }
    }
    BandGrid g = load_band(base / entry.at("path").get<std::string>());
    g.band_id = entry.at("band_id").get<std::string>();
    g.wavelength_nm = entry.value("wavelength_nm", 0.0);
    g.pixel_size_m = entry.value("pixel_size_m", 0.0);
    return g;
}

nlohmann::json entry_json(const BandGrid& g, const std::string& rel) {
    return {{"band_id", g.band_id}, {"wavelength_nm", g.wavelength_nm}, {"pixel_size_m", g.pixel_size_m},
            {"path", rel}};
}

}  // namespace

SceneManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    SceneManifest m;
    try {
        m.scene_id = doc.value("scene_id", std::string{});
        if (!doc.contains("factor") || !doc.at("factor").is_number_integer()) {
            throw FormatError(path.string() + ": manifest lacks integer field 'factor'");
        }
        m.factor = doc.at("factor").get<int>();
        const fs::path base = path.parent_path();
        for (const char* group : {"high", "low"}) {
            if (!doc.contains(group) || !doc.at(group).is_array()) {
                throw FormatError(path.string() + ": manifest lacks array field '" + group + "'");
            }
        }
        for (const auto& e : doc.at("high")) m.high_bands.push_back(load_entry(e, base));
        for (const auto& e : doc.at("low")) m.low_bands.push_back(load_entry(e, base));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return m;
}

void save_manifest(const SceneManifest& m, const fs::path& path) {
    const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
    fs::create_directories(dir);
    nlohmann::json doc;
    doc["scene_id"] = m.scene_id;
    doc["factor"] = m.factor;
    doc["high"] = nlohmann::json::array();
    doc["low"] = nlohmann::json::array();
    for (const auto& b : m.high_bands) {
        save_band(b, dir / (b.band_id + ".srb"));
        doc["high"].push_back(entry_json(b, b.band_id + ".srb"));
    }
    for (const auto& b : m.low_bands) {
        save_band(b, dir / (b.band_id + ".srb"));
        doc["low"].push_back(entry_json(b, b.band_id + ".srb"));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << doc.dump(2) << '\n';
}

}  // namespace srunmix
