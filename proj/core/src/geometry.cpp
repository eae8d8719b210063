#include "srunmix/geometry.hpp"

#include <limits>

#include "srunmix/error.hpp"

namespace srunmix {

LatticeGrid LatticeGrid::filled(int width, int height, double value) {
    LatticeGrid g;
    g.width = width;
    g.height = height;
    g.values.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), value);
    g.valid.assign(g.values.size(), 1);
    return g;
}

const char* to_string(NeighborhoodKind kind) {
    switch (kind) {
        case NeighborhoodKind::corner: return "corner";
        case NeighborhoodKind::middle: return "middle";
        case NeighborhoodKind::inner: return "inner";
    }
    return "?";
}

namespace {

// Floor division; lattice coordinates are non-negative but keep it exact anyway.
int floor_div(int a, int b) {
    const int q = a / b;
    return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}

NeighborhoodPattern build(int x, int y, int factor, int low_width, int low_height, bool clip) {
    if (factor < 1) throw PreconditionError("factor must be positive");
    NeighborhoodPattern p;
    p.phase_x = x - floor_div(x, factor) * factor;
    p.phase_y = y - floor_div(y, factor) * factor;
    const int X = floor_div(x, factor);
    const int Y = floor_div(y, factor);
    const bool on_x = p.phase_x == 0;
    const bool on_y = p.phase_y == 0;

    // On a low-resolution edge the block straddles it with two pixels;
    // otherwise it spans the containing pixel and both neighbours.
    const int x_lo = X - 1;
    const int x_hi = on_x ? X : X + 1;
    const int y_lo = Y - 1;
    const int y_hi = on_y ? Y : Y + 1;

    if (on_x && on_y) {
        p.kind = NeighborhoodKind::corner;
    } else if (on_x || on_y) {
        p.kind = NeighborhoodKind::middle;
    } else {
        p.kind = NeighborhoodKind::inner;
    }
    for (int j = y_lo; j <= y_hi; ++j) {
        for (int i = x_lo; i <= x_hi; ++i) {
            if (clip && (i < 0 || j < 0 || i >= low_width || j >= low_height)) continue;
            p.offsets.push_back({i, j});
        }
    }
    return p;
}

}  // namespace

NeighborhoodPattern classify_shared(int x, int y, int factor, int low_width, int low_height) {
    return build(x, y, factor, low_width, low_height, true);
}

NeighborhoodPattern classify_shared(int x, int y, int factor) { return build(x, y, factor, 0, 0, false); }

LatticeGrid init_shared_values(const BandGrid& band) {
    check_grid(band, 1);
    LatticeGrid s = LatticeGrid::filled(band.width + 1, band.height + 1, 0.0);
    for (int ly = 0; ly < s.height; ++ly) {
        for (int lx = 0; lx < s.width; ++lx) {
            double sum = 0.0;
            int count = 0;
            for (int py = ly - 1; py <= ly; ++py) {
                for (int px = lx - 1; px <= lx; ++px) {
                    if (px < 0 || py < 0 || px >= band.width || py >= band.height) continue;
                    if (!band.is_valid(px, py)) continue;
                    sum += band.at(px, py);
                    ++count;
                }
            }
            if (count > 0) {
                s.at(lx, ly) = sum / count;
            } else {
                s.at(lx, ly) = std::numeric_limits<double>::quiet_NaN();
                s.valid[s.index(lx, ly)] = 0;
            }
        }
    }
    return s;
}

}  // namespace srunmix
