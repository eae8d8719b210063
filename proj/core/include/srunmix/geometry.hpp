#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "srunmix/raster.hpp"

namespace srunmix {

struct LatticePoint {
    int x = 0;
    int y = 0;
    friend bool operator==(const LatticePoint&, const LatticePoint&) = default;
};

struct LowPixel {
    int x = 0;
    int y = 0;
    friend bool operator==(const LowPixel&, const LowPixel&) = default;
};

/// Corner lattice of shared values: one point per high-resolution pixel corner,
/// so (high width + 1) x (high height + 1) points.
struct SharedLattice {
    int width = 0;
    int height = 0;
    int factor = 2;

    static SharedLattice for_high(int high_width, int high_height, int factor) {
        return {high_width + 1, high_height + 1, factor};
    }
    std::size_t size() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
    }
    int low_width() const { return (width - 1) / factor; }
    int low_height() const { return (height - 1) / factor; }
};

/// Values on a SharedLattice (S grids). Invalid points carry NaN.
struct LatticeGrid {
    int width = 0;
    int height = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> valid;

    static LatticeGrid filled(int width, int height, double value);
    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
    }
    double at(int x, int y) const { return values[index(x, y)]; }
    double& at(int x, int y) { return values[index(x, y)]; }
    bool is_valid(int x, int y) const { return valid[index(x, y)] != 0; }
};

/// Lattice points mixed by W_{x,y,0..3}, in weight order: (x,y), (x+1,y), (x,y+1), (x+1,y+1).
inline std::array<LatticePoint, 4> corner_indices(int x, int y) {
    return {LatticePoint{x, y}, LatticePoint{x + 1, y}, LatticePoint{x, y + 1}, LatticePoint{x + 1, y + 1}};
}

enum class NeighborhoodKind { corner, middle, inner };

const char* to_string(NeighborhoodKind kind);

struct NeighborhoodPattern {
    NeighborhoodKind kind = NeighborhoodKind::corner;
    /// Position of the lattice point inside its low-resolution pixel, (x mod factor, y mod factor).
    /// Distinguishes the two middle and four inner patterns of factor 3.
    int phase_x = 0;
    int phase_y = 0;
    /// Absolute low-resolution pixel coordinates, row-major order.
    std::vector<LowPixel> offsets;
};

/// Low-resolution neighbourhood of a shared value. Offsets outside
/// [0, low_width) x [0, low_height) are dropped.
NeighborhoodPattern classify_shared(int x, int y, int factor, int low_width, int low_height);

/// Unclipped neighbourhood (4, 6 or 9 offsets).
NeighborhoodPattern classify_shared(int x, int y, int factor);

/// S^ini: each lattice point is the mean of the valid high-resolution pixels
/// touching it (1, 2 or 4 of them). Points with none are invalid.
LatticeGrid init_shared_values(const BandGrid& band);

}  // namespace srunmix
