#include "srunmix/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "srunmix/error.hpp"
#include "srunmix/parallel.hpp"

namespace srunmix {
namespace {

inline double sq(double v) { return v * v; }
inline double hinge_below(double v, double lo) { return v < lo ? lo - v : 0.0; }
inline double hinge_above(double v, double hi) { return v > hi ? v - hi : 0.0; }

inline void load_weights(const double* p, double w[4]) {
    w[0] = p[0];
    w[1] = p[1];
    w[2] = p[2];
    w[3] = 1.0 - p[0] - p[1] - p[2];
}

std::size_t row_grain(int width) { return std::max<std::size_t>(1, kDefaultGrain / static_cast<std::size_t>(std::max(1, width))); }

double dot(std::span<const double> a, std::span<const double> b) {
    return parallel_sum(a.size(), kDefaultGrain, [&](std::size_t lo, std::size_t hi) {
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += a[i] * b[i];
        return s;
    });
}

double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

// x = a*x + y style helpers, element-wise and therefore thread-count independent.
void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    parallel_for(y.size(), kDefaultGrain, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) y[i] += alpha * x[i];
    });
}

void xpby(std::span<const double> x, double beta, std::span<double> y) {
    parallel_for(y.size(), kDefaultGrain, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) y[i] = x[i] + beta * y[i];
    });
}

}  // namespace

void SolverOptions::validate() const {
    if (max_outer_iterations <= 0 || cg_max_iterations <= 0) {
        throw PreconditionError("solver iteration limits must be positive");
    }
    if (!(gradient_tolerance > 0) || !(function_tolerance > 0) || !(cg_relative_tolerance > 0) ||
        !(bound_penalty_weight > 0) || !(bound_tolerance > 0) || !(ridge_lambda > 0)) {
        throw PreconditionError("solver tolerances and weights must be strictly positive");
    }
    if (max_penalty_increases < 0) throw PreconditionError("max_penalty_increases must be non-negative");
}

// ---------------------------------------------------------------------------
// JointSystem

JointSystem::JointSystem(const JointProblem& problem, double penalty_scale)
    : problem_(problem), penalty_(penalty_scale) {
    if (problem.width < 1 || problem.height < 1) throw PreconditionError("joint problem needs a non-empty grid");
    if (problem.observed.empty()) throw PreconditionError("joint problem needs at least one band");
    if (problem.valid.size() != problem.observed.size() || problem.bounds.size() != problem.observed.size()) {
        throw PreconditionError("joint problem band lists disagree in length");
    }
    pixels_ = problem.pixels();
    lattice_ = problem.lattice_points();
    bands_ = problem.bands();
    for (std::size_t b = 0; b < bands_; ++b) {
        if (problem.observed[b].size() != pixels_ || problem.valid[b].size() != pixels_) {
            throw PreconditionError("joint problem band " + std::to_string(b) + " has the wrong size");
        }
    }
    if (!(penalty_scale > 0)) throw PreconditionError("penalty scale must be positive");
}

std::vector<double> JointSystem::pack(const JointState& state) const {
    if (state.weights.size() != 4 * pixels_ || state.shared.size() != bands_) {
        throw PreconditionError("joint state does not match the problem dimensions");
    }
    std::vector<double> x(num_params());
    for (std::size_t p = 0; p < pixels_; ++p) {
        for (int k = 0; k < 3; ++k) x[3 * p + k] = state.weights[4 * p + k];
    }
    for (std::size_t b = 0; b < bands_; ++b) {
        if (state.shared[b].size() != lattice_) throw PreconditionError("shared grid has the wrong size");
        std::copy(state.shared[b].begin(), state.shared[b].end(), x.begin() + static_cast<std::ptrdiff_t>(3 * pixels_ + b * lattice_));
    }
    return x;
}

JointState JointSystem::unpack(std::span<const double> x) const {
    JointState s;
    s.weights.resize(4 * pixels_);
    for (std::size_t p = 0; p < pixels_; ++p) {
        double w[4];
        load_weights(&x[3 * p], w);
        for (int k = 0; k < 4; ++k) s.weights[4 * p + k] = w[k];
    }
    s.shared.resize(bands_);
    for (std::size_t b = 0; b < bands_; ++b) {
        const auto first = x.begin() + static_cast<std::ptrdiff_t>(3 * pixels_ + b * lattice_);
        s.shared[b].assign(first, first + static_cast<std::ptrdiff_t>(lattice_));
    }
    return s;
}

void JointSystem::check_finite(std::span<const double> x, std::span<const double> r) const {
    const int W = problem_.width;
    for (std::size_t b = 0; b < bands_; ++b) {
        for (std::size_t p = 0; p < pixels_; ++p) {
            if (!std::isfinite(r[b * pixels_ + p])) {
                const int px = static_cast<int>(p % static_cast<std::size_t>(W));
                const int py = static_cast<int>(p / static_cast<std::size_t>(W));
                throw NumericalError("non-finite residual in band " + std::to_string(b) + " at pixel block (" +
                                     std::to_string(px) + ", " + std::to_string(py) + ")-(" +
                                     std::to_string(px + 1) + ", " + std::to_string(py + 1) + ")");
            }
        }
    }
    for (double v : x) {
        if (!std::isfinite(v)) throw NumericalError("non-finite parameter in joint solve");
    }
}

void JointSystem::residuals(std::span<const double> x, std::span<double> out) const {
    if (x.size() != num_params() || out.size() != num_residuals()) throw PreconditionError("residual buffer size");
    const int W = problem_.width;
    const std::size_t L = static_cast<std::size_t>(W + 1);
    const double s = std::sqrt(penalty_);
    const double* shared = x.data() + 3 * pixels_;
    parallel_for(static_cast<std::size_t>(problem_.height), row_grain(W), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            for (int xi = 0; xi < W; ++xi) {
                const std::size_t p = y * static_cast<std::size_t>(W) + static_cast<std::size_t>(xi);
                double w[4];
                load_weights(&x[3 * p], w);
                const std::size_t l0 = y * L + static_cast<std::size_t>(xi);
                const std::size_t l2 = l0 + L;
                for (std::size_t b = 0; b < bands_; ++b) {
                    const double* S = shared + b * lattice_;
                    double r = 0.0;
                    if (valid(b, p)) {
                        r = observed(b, p) - (w[0] * S[l0] + w[1] * S[l0 + 1] + w[2] * S[l2] + w[3] * S[l2 + 1]);
                    }
                    out[b * pixels_ + p] = r;
                }
                for (int k = 0; k < 4; ++k) out[bands_ * pixels_ + 4 * p + static_cast<std::size_t>(k)] = s * hinge_below(w[k], 0.0);
            }
        }
    });
    const std::size_t base = bands_ * pixels_ + 4 * pixels_;
    for (std::size_t b = 0; b < bands_; ++b) {
        const auto& bound = problem_.bounds[b];
        const double* S = shared + b * lattice_;
        for (std::size_t l = 0; l < lattice_; ++l) {
            out[base + 2 * (b * lattice_ + l)] = s * hinge_below(S[l], bound.min);
            out[base + 2 * (b * lattice_ + l) + 1] = s * hinge_above(S[l], bound.max);
        }
    }
    check_finite(x, out);
}

void JointSystem::apply_jacobian(std::span<const double> x, std::span<const double> v, std::span<double> out) const {
    const int W = problem_.width;
    const std::size_t L = static_cast<std::size_t>(W + 1);
    const double s = std::sqrt(penalty_);
    const double* shared = x.data() + 3 * pixels_;
    const double* vs = v.data() + 3 * pixels_;
    parallel_for(static_cast<std::size_t>(problem_.height), row_grain(W), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            for (int xi = 0; xi < W; ++xi) {
                const std::size_t p = y * static_cast<std::size_t>(W) + static_cast<std::size_t>(xi);
                double w[4];
                load_weights(&x[3 * p], w);
                const double* vw = &v[3 * p];
                const std::size_t l[4] = {y * L + static_cast<std::size_t>(xi), y * L + static_cast<std::size_t>(xi) + 1,
                                          (y + 1) * L + static_cast<std::size_t>(xi),
                                          (y + 1) * L + static_cast<std::size_t>(xi) + 1};
                for (std::size_t b = 0; b < bands_; ++b) {
                    double jv = 0.0;
                    if (valid(b, p)) {
                        const double* S = shared + b * lattice_;
                        const double* V = vs + b * lattice_;
                        for (int k = 0; k < 3; ++k) jv -= (S[l[k]] - S[l[3]]) * vw[k];
                        for (int k = 0; k < 4; ++k) jv -= w[k] * V[l[k]];
                    }
                    out[b * pixels_ + p] = jv;
                }
                const std::size_t h = bands_ * pixels_ + 4 * p;
                for (int k = 0; k < 3; ++k) out[h + static_cast<std::size_t>(k)] = w[k] < 0.0 ? -s * vw[k] : 0.0;
                out[h + 3] = w[3] < 0.0 ? s * (vw[0] + vw[1] + vw[2]) : 0.0;
            }
        }
    });
    const std::size_t base = bands_ * pixels_ + 4 * pixels_;
    for (std::size_t b = 0; b < bands_; ++b) {
        const auto& bound = problem_.bounds[b];
        const double* S = shared + b * lattice_;
        const double* V = vs + b * lattice_;
        for (std::size_t li = 0; li < lattice_; ++li) {
            out[base + 2 * (b * lattice_ + li)] = S[li] < bound.min ? -s * V[li] : 0.0;
            out[base + 2 * (b * lattice_ + li) + 1] = S[li] > bound.max ? s * V[li] : 0.0;
        }
    }
}

namespace {

// Accumulates J_data^T u into the parameter vector `out` (overwriting it).
// `u_data` holds one entry per (band, pixel).
void data_transpose(const JointProblem& prob, std::size_t pixels, std::size_t lattice, std::span<const double> x,
                    std::span<const double> u_data, std::span<double> out) {
    const int W = prob.width;
    const int H = prob.height;
    const std::size_t bands = prob.bands();
    const std::size_t L = static_cast<std::size_t>(W + 1);
    const double* shared = x.data() + 3 * pixels;

    parallel_for(static_cast<std::size_t>(H), row_grain(W), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            for (int xi = 0; xi < W; ++xi) {
                const std::size_t p = y * static_cast<std::size_t>(W) + static_cast<std::size_t>(xi);
                const std::size_t l0 = y * L + static_cast<std::size_t>(xi);
                const std::size_t l[4] = {l0, l0 + 1, l0 + L, l0 + L + 1};
                double g[3] = {0.0, 0.0, 0.0};
                for (std::size_t b = 0; b < bands; ++b) {
                    if (!prob.valid[b][p]) continue;
                    const double* S = shared + b * lattice;
                    const double u = u_data[b * pixels + p];
                    for (int k = 0; k < 3; ++k) g[k] -= (S[l[k]] - S[l[3]]) * u;
                }
                for (int k = 0; k < 3; ++k) out[3 * p + static_cast<std::size_t>(k)] = g[k];
            }
        }
    });

    // Shared values gather from the (up to) four pixels around each lattice point.
    parallel_for(static_cast<std::size_t>(H + 1), row_grain(W + 1), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t ly = y0; ly < y1; ++ly) {
            for (int lx = 0; lx <= W; ++lx) {
                const std::size_t li = ly * L + static_cast<std::size_t>(lx);
                for (std::size_t b = 0; b < bands; ++b) {
                    double acc = 0.0;
                    for (int k = 0; k < 4; ++k) {
                        const int px = lx - (k & 1);
                        const int py = static_cast<int>(ly) - (k >> 1);
                        if (px < 0 || py < 0 || px >= W || py >= H) continue;
                        const std::size_t p = static_cast<std::size_t>(py) * static_cast<std::size_t>(W) + static_cast<std::size_t>(px);
                        if (!prob.valid[b][p]) continue;
                        double w[4];
                        load_weights(&x[3 * p], w);
                        acc -= w[k] * u_data[b * pixels + p];
                    }
                    out[3 * pixels + b * lattice + li] = acc;
                }
            }
        }
    });
}

}  // namespace

void JointSystem::apply_jacobian_transpose(std::span<const double> x, std::span<const double> u,
                                           std::span<double> out) const {
    data_transpose(problem_, pixels_, lattice_, x, u.first(bands_ * pixels_), out);
    const double s = std::sqrt(penalty_);
    for (std::size_t p = 0; p < pixels_; ++p) {
        double w[4];
        load_weights(&x[3 * p], w);
        const std::size_t h = bands_ * pixels_ + 4 * p;
        for (int k = 0; k < 3; ++k) {
            if (w[k] < 0.0) out[3 * p + static_cast<std::size_t>(k)] -= s * u[h + static_cast<std::size_t>(k)];
            if (w[3] < 0.0) out[3 * p + static_cast<std::size_t>(k)] += s * u[h + 3];
        }
    }
    const std::size_t base = bands_ * pixels_ + 4 * pixels_;
    const double* shared = x.data() + 3 * pixels_;
    for (std::size_t b = 0; b < bands_; ++b) {
        const auto& bound = problem_.bounds[b];
        for (std::size_t li = 0; li < lattice_; ++li) {
            const double S = shared[b * lattice_ + li];
            double& o = out[3 * pixels_ + b * lattice_ + li];
            if (S < bound.min) o -= s * u[base + 2 * (b * lattice_ + li)];
            if (S > bound.max) o += s * u[base + 2 * (b * lattice_ + li) + 1];
        }
    }
}

std::vector<double> JointSystem::dense_jacobian(std::span<const double> x) const {
    const std::size_t n = num_params();
    const std::size_t m = num_residuals();
    std::vector<double> jac(m * n, 0.0);
    std::vector<double> e(n, 0.0), col(m);
    for (std::size_t j = 0; j < n; ++j) {
        e[j] = 1.0;
        apply_jacobian(x, e, col);
        e[j] = 0.0;
        for (std::size_t i = 0; i < m; ++i) jac[i * n + j] = col[i];
    }
    return jac;
}

double JointSystem::data_objective(std::span<const double> x) const {
    const int W = problem_.width;
    const std::size_t L = static_cast<std::size_t>(W + 1);
    const double* shared = x.data() + 3 * pixels_;
    return parallel_sum(static_cast<std::size_t>(problem_.height), row_grain(W), [&](std::size_t y0, std::size_t y1) {
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y) {
            for (int xi = 0; xi < W; ++xi) {
                const std::size_t p = y * static_cast<std::size_t>(W) + static_cast<std::size_t>(xi);
                double w[4];
                load_weights(&x[3 * p], w);
                const std::size_t l0 = y * L + static_cast<std::size_t>(xi);
                const std::size_t l2 = l0 + L;
                for (std::size_t b = 0; b < bands_; ++b) {
                    if (!valid(b, p)) continue;
                    const double* S = shared + b * lattice_;
                    acc += sq(observed(b, p) - (w[0] * S[l0] + w[1] * S[l0 + 1] + w[2] * S[l2] + w[3] * S[l2 + 1]));
                }
            }
        }
        return acc;
    });
}

double JointSystem::total_objective(std::span<const double> x) const {
    double pen = 0.0;
    for (std::size_t p = 0; p < pixels_; ++p) {
        double w[4];
        load_weights(&x[3 * p], w);
        for (double wk : w) pen += sq(hinge_below(wk, 0.0));
    }
    const double* shared = x.data() + 3 * pixels_;
    for (std::size_t b = 0; b < bands_; ++b) {
        const auto& bound = problem_.bounds[b];
        for (std::size_t li = 0; li < lattice_; ++li) {
            const double S = shared[b * lattice_ + li];
            pen += sq(hinge_below(S, bound.min)) + sq(hinge_above(S, bound.max));
        }
    }
    const double data = data_objective(x);
    if (!std::isfinite(data)) {
        std::vector<double> r(num_residuals());
        residuals(x, r);  // throws with the offending pixel block
    }
    return data + penalty_ * pen;
}

void JointSystem::gradient(std::span<const double> x, std::span<double> out) const {
    std::vector<double> r(num_residuals());
    residuals(x, r);
    apply_jacobian_transpose(x, r, out);
}

void JointSystem::normal_product(std::span<const double> x, std::span<const double> v, std::span<double> out) const {
    const int W = problem_.width;
    const std::size_t L = static_cast<std::size_t>(W + 1);
    const double* shared = x.data() + 3 * pixels_;
    const double* vs = v.data() + 3 * pixels_;
    std::vector<double> jv(bands_ * pixels_);
    parallel_for(static_cast<std::size_t>(problem_.height), row_grain(W), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            for (int xi = 0; xi < W; ++xi) {
                const std::size_t p = y * static_cast<std::size_t>(W) + static_cast<std::size_t>(xi);
                double w[4];
                load_weights(&x[3 * p], w);
                const double* vw = &v[3 * p];
                const std::size_t l0 = y * L + static_cast<std::size_t>(xi);
                const std::size_t l[4] = {l0, l0 + 1, l0 + L, l0 + L + 1};
                for (std::size_t b = 0; b < bands_; ++b) {
                    double acc = 0.0;
                    if (valid(b, p)) {
                        const double* S = shared + b * lattice_;
                        const double* V = vs + b * lattice_;
                        acc = -((S[l[0]] - S[l[3]]) * vw[0] + (S[l[1]] - S[l[3]]) * vw[1] + (S[l[2]] - S[l[3]]) * vw[2] +
                                w[0] * V[l[0]] + w[1] * V[l[1]] + w[2] * V[l[2]] + w[3] * V[l[3]]);
                    }
                    jv[b * pixels_ + p] = acc;
                }
            }
        }
    });
    data_transpose(problem_, pixels_, lattice_, x, jv, out);

    // Hinge rows contribute penalty * (indicator outer products).
    const double mu = penalty_;
    for (std::size_t p = 0; p < pixels_; ++p) {
        double w[4];
        load_weights(&x[3 * p], w);
        const double* vw = &v[3 * p];
        const double sum = vw[0] + vw[1] + vw[2];
        for (int k = 0; k < 3; ++k) {
            double add = 0.0;
            if (w[k] < 0.0) add += mu * vw[k];
            if (w[3] < 0.0) add += mu * sum;
            out[3 * p + static_cast<std::size_t>(k)] += add;
        }
    }
    for (std::size_t b = 0; b < bands_; ++b) {
        const auto& bound = problem_.bounds[b];
        for (std::size_t li = 0; li < lattice_; ++li) {
            const double S = shared[b * lattice_ + li];
            if (S < bound.min || S > bound.max) out[3 * pixels_ + b * lattice_ + li] += mu * vs[b * lattice_ + li];
        }
    }
}

void JointSystem::block_diagonal(std::span<const double> x, std::span<double> wb, std::span<double> sd) const {
    const int W = problem_.width;
    const int H = problem_.height;
    const std::size_t L = static_cast<std::size_t>(W + 1);
    const double* shared = x.data() + 3 * pixels_;
    const double mu = penalty_;
    parallel_for(static_cast<std::size_t>(H), row_grain(W), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            for (int xi = 0; xi < W; ++xi) {
                const std::size_t p = y * static_cast<std::size_t>(W) + static_cast<std::size_t>(xi);
                const std::size_t l0 = y * L + static_cast<std::size_t>(xi);
                const std::size_t l[4] = {l0, l0 + 1, l0 + L, l0 + L + 1};
                double a[6] = {0, 0, 0, 0, 0, 0};  // 00 01 02 11 12 22
                for (std::size_t b = 0; b < bands_; ++b) {
                    if (!valid(b, p)) continue;
                    const double* S = shared + b * lattice_;
                    const double d0 = S[l[0]] - S[l[3]];
                    const double d1 = S[l[1]] - S[l[3]];
                    const double d2 = S[l[2]] - S[l[3]];
                    a[0] += d0 * d0;
                    a[1] += d0 * d1;
                    a[2] += d0 * d2;
                    a[3] += d1 * d1;
                    a[4] += d1 * d2;
                    a[5] += d2 * d2;
                }
                double w[4];
                load_weights(&x[3 * p], w);
                if (w[0] < 0.0) a[0] += mu;
                if (w[1] < 0.0) a[3] += mu;
                if (w[2] < 0.0) a[5] += mu;
                if (w[3] < 0.0) {
                    for (double& e : a) e += mu;
                }
                for (int k = 0; k < 6; ++k) wb[6 * p + static_cast<std::size_t>(k)] = a[k];
            }
        }
    });
    parallel_for(static_cast<std::size_t>(H + 1), row_grain(W + 1), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t ly = y0; ly < y1; ++ly) {
            for (int lx = 0; lx <= W; ++lx) {
                const std::size_t li = ly * L + static_cast<std::size_t>(lx);
                for (std::size_t b = 0; b < bands_; ++b) {
                    double acc = 0.0;
                    for (int k = 0; k < 4; ++k) {
                        const int px = lx - (k & 1);
                        const int py = static_cast<int>(ly) - (k >> 1);
                        if (px < 0 || py < 0 || px >= W || py >= H) continue;
                        const std::size_t p = static_cast<std::size_t>(py) * static_cast<std::size_t>(W) + static_cast<std::size_t>(px);
                        if (!valid(b, p)) continue;
                        double w[4];
                        load_weights(&x[3 * p], w);
                        acc += w[k] * w[k];
                    }
                    const double S = shared[b * lattice_ + li];
                    const auto& bound = problem_.bounds[b];
                    if (S < bound.min || S > bound.max) acc += mu;
                    sd[b * lattice_ + li] = acc;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt driver

namespace {

struct Preconditioner {
    std::vector<double> weight_inv;  // 6 per pixel, symmetric 3x3 inverse
    std::vector<double> shared_inv;

    void apply(std::span<const double> r, std::span<double> z, std::size_t pixels) const {
        parallel_for(pixels, kDefaultGrain, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t p = lo; p < hi; ++p) {
                const double* m = &weight_inv[6 * p];
                const double* v = &r[3 * p];
                z[3 * p] = m[0] * v[0] + m[1] * v[1] + m[2] * v[2];
                z[3 * p + 1] = m[1] * v[0] + m[3] * v[1] + m[4] * v[2];
                z[3 * p + 2] = m[2] * v[0] + m[4] * v[1] + m[5] * v[2];
            }
        });
        const std::size_t base = 3 * pixels;
        parallel_for(shared_inv.size(), kDefaultGrain, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) z[base + i] = shared_inv[i] * r[base + i];
        });
    }
};

// Inverse of a symmetric positive definite 3x3 block stored as 00 01 02 11 12 22.
void invert_sym3(const double* a, double* out) {
    const double c00 = a[3] * a[5] - a[4] * a[4];
    const double c01 = a[2] * a[4] - a[1] * a[5];
    const double c02 = a[1] * a[4] - a[2] * a[3];
    const double det = a[0] * c00 + a[1] * c01 + a[2] * c02;
    const double scale = std::max({a[0], a[3], a[5]});
    if (!(std::abs(det) > 1e-14 * scale * scale * scale) || !std::isfinite(det)) {
        out[0] = a[0] > 0 ? 1.0 / a[0] : 0.0;
        out[1] = out[2] = out[4] = 0.0;
        out[3] = a[3] > 0 ? 1.0 / a[3] : 0.0;
        out[5] = a[5] > 0 ? 1.0 / a[5] : 0.0;
        return;
    }
    const double inv = 1.0 / det;
    out[0] = c00 * inv;
    out[1] = c01 * inv;
    out[2] = c02 * inv;
    out[3] = (a[0] * a[5] - a[2] * a[2]) * inv;
    out[4] = (a[1] * a[2] - a[0] * a[4]) * inv;
    out[5] = (a[0] * a[3] - a[1] * a[1]) * inv;
}

class DampedSolver {
public:
    DampedSolver(const JointSystem& sys, const SolverOptions& opts)
        : sys_(sys), opts_(opts), pixels_(sys.problem().pixels()), n_(sys.num_params()) {}

    // Solves (J^T J + lambda D) delta = -g; returns CG iterations used.
    int solve(std::span<const double> x, std::span<const double> g, double lambda, std::span<double> delta) {
        const std::size_t lattice_entries = n_ - 3 * pixels_;
        std::vector<double> wb(6 * pixels_), sd(lattice_entries);
        sys_.block_diagonal(x, wb, sd);

        // Marquardt scaling by diag(J^T J), floored so empty columns stay well posed.
        double mean_diag = 0.0;
        for (std::size_t p = 0; p < pixels_; ++p) mean_diag += wb[6 * p] + wb[6 * p + 3] + wb[6 * p + 5];
        for (double v : sd) mean_diag += v;
        mean_diag = std::max(mean_diag / static_cast<double>(n_), 1e-300);
        const double floor = 1e-6 * mean_diag;

        damping_.assign(n_, 0.0);
        Preconditioner pre;
        pre.weight_inv.resize(6 * pixels_);
        pre.shared_inv.resize(lattice_entries);
        for (std::size_t p = 0; p < pixels_; ++p) {
            double* a = &wb[6 * p];
            const double d0 = lambda * std::max(a[0], floor);
            const double d1 = lambda * std::max(a[3], floor);
            const double d2 = lambda * std::max(a[5], floor);
            damping_[3 * p] = d0;
            damping_[3 * p + 1] = d1;
            damping_[3 * p + 2] = d2;
            a[0] += d0;
            a[3] += d1;
            a[5] += d2;
            invert_sym3(a, &pre.weight_inv[6 * p]);
        }
        for (std::size_t i = 0; i < lattice_entries; ++i) {
            const double d = lambda * std::max(sd[i], floor);
            damping_[3 * pixels_ + i] = d;
            pre.shared_inv[i] = 1.0 / (sd[i] + d);
        }

        // Preconditioned conjugate gradients from delta = 0.
        std::fill(delta.begin(), delta.end(), 0.0);
        std::vector<double> r(n_), z(n_), p(n_), q(n_);
        for (std::size_t i = 0; i < n_; ++i) r[i] = -g[i];
        const double target = opts_.cg_relative_tolerance * std::sqrt(dot(r, r));
        pre.apply(r, z, pixels_);
        std::copy(z.begin(), z.end(), p.begin());
        double rho = dot(r, z);
        int it = 0;
        for (; it < opts_.cg_max_iterations; ++it) {
            if (std::sqrt(dot(r, r)) <= target) break;
            apply(x, p, q);
            const double pq = dot(p, q);
            if (!(pq > 0.0)) break;
            const double alpha = rho / pq;
            axpy(alpha, p, delta);
            axpy(-alpha, q, r);
            pre.apply(r, z, pixels_);
            const double rho_next = dot(r, z);
            xpby(z, rho_next / rho, p);
            rho = rho_next;
        }
        return it;
    }

    // Undamped quadratic term delta^T J^T J delta.
    double curvature(std::span<const double> x, std::span<const double> delta) {
        std::vector<double> q(n_);
        sys_.normal_product(x, delta, q);
        return dot(delta, q);
    }

private:
    void apply(std::span<const double> x, std::span<const double> v, std::span<double> out) {
        sys_.normal_product(x, v, out);
        parallel_for(n_, kDefaultGrain, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) out[i] += damping_[i] * v[i];
        });
    }

    const JointSystem& sys_;
    const SolverOptions& opts_;
    std::size_t pixels_;
    std::size_t n_;
    std::vector<double> damping_;
};

// Shortens the weight step of each pixel and each shared-value step so that
// coordinates inside their bounds stay inside. Returns true if anything changed.
bool truncate_step(const JointProblem& prob, std::span<const double> x, std::span<double> delta) {
    const std::size_t pixels = prob.pixels();
    const std::size_t lattice = prob.lattice_points();
    bool changed = false;
    for (std::size_t p = 0; p < pixels; ++p) {
        double w[4], d[4];
        load_weights(&x[3 * p], w);
        d[0] = delta[3 * p];
        d[1] = delta[3 * p + 1];
        d[2] = delta[3 * p + 2];
        d[3] = -(d[0] + d[1] + d[2]);
        double beta = 1.0;
        for (int k = 0; k < 4; ++k) {
            if (d[k] < 0.0 && w[k] >= 0.0 && w[k] + d[k] < 0.0) beta = std::min(beta, w[k] / -d[k]);
        }
        if (beta < 1.0) {
            changed = true;
            for (int k = 0; k < 3; ++k) delta[3 * p + static_cast<std::size_t>(k)] *= beta;
        }
    }
    for (std::size_t b = 0; b < prob.bands(); ++b) {
        const auto& r = prob.bounds[b];
        for (std::size_t l = 0; l < lattice; ++l) {
            const std::size_t i = 3 * pixels + b * lattice + l;
            const double s = x[i];
            const double t = s + delta[i];
            if (s >= r.min && t < r.min) {
                delta[i] = r.min - s;
                changed = true;
            } else if (s <= r.max && t > r.max) {
                delta[i] = r.max - s;
                changed = true;
            }
        }
    }
    return changed;
}

bool bounds_satisfied(const JointProblem& prob, const JointState& s, double tol) {
    for (double w : s.weights) {
        if (w < -tol) return false;
    }
    for (std::size_t b = 0; b < s.shared.size(); ++b) {
        const auto& r = prob.bounds[b];
        const double slack = tol * std::max(r.width(), 0.0);
        for (double v : s.shared[b]) {
            if (v < r.min - slack || v > r.max + slack) return false;
        }
    }
    return true;
}

}  // namespace

JointResult solve_joint(const JointProblem& problem, const JointState& init, const SolverOptions& opts) {
    opts.validate();
    const std::size_t pixels = problem.pixels();
    const std::size_t lattice = problem.lattice_points();
    if (init.weights.size() != 4 * pixels || init.shared.size() != problem.bands()) {
        throw PreconditionError("initial state does not match the problem dimensions");
    }
    for (std::size_t p = 0; p < pixels; ++p) {
        double sum = 0.0;
        for (int k = 0; k < 4; ++k) {
            const double w = init.weights[4 * p + static_cast<std::size_t>(k)];
            if (!std::isfinite(w) || w < -1e-12) {
                throw PreconditionError("initial weights of pixel " + std::to_string(p) + " are off the simplex");
            }
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw PreconditionError("initial weights of pixel " + std::to_string(p) + " do not sum to one");
        }
    }
    for (std::size_t b = 0; b < init.shared.size(); ++b) {
        if (init.shared[b].size() != lattice) throw PreconditionError("initial shared grid has the wrong size");
        const auto& r = problem.bounds[b];
        for (double v : init.shared[b]) {
            if (!std::isfinite(v) || v < r.min || v > r.max) {
                throw PreconditionError("initial shared values of band " + std::to_string(b) + " leave the band range");
            }
        }
    }

    // Penalty weight relative to the mean squared observation.
    double sum_sq = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < problem.bands(); ++b) {
        for (std::size_t p = 0; p < pixels; ++p) {
            if (!problem.valid[b][p]) continue;
            sum_sq += problem.observed[b][p] * problem.observed[b][p];
            ++count;
        }
    }
    const double mean_sq = count > 0 && sum_sq > 0 ? sum_sq / static_cast<double>(count) : 1.0;
    JointSystem sys(problem, opts.bound_penalty_weight * mean_sq);

    std::vector<double> x = sys.pack(init);
    const std::size_t n = x.size();
    JointResult result;
    result.initial_objective = sys.data_objective(x);

    std::vector<double> g(n), delta(n), trial(n);
    DampedSolver inner(sys, opts);
    double lambda = 1e-3;

    for (int stage = 0;; ++stage) {
        result.stage_starts.push_back(result.history.size());
        double f = sys.total_objective(x);
        result.history.push_back(f);
        sys.gradient(x, g);
        const double g0 = max_abs(g);
        double nu = 2.0;
        bool stage_converged = false;
        for (int it = 0; it < opts.max_outer_iterations; ++it) {
            const double gmax = max_abs(g);
            if (gmax == 0.0 || gmax <= opts.gradient_tolerance * g0) {
                stage_converged = true;
                break;
            }
            ++result.iterations;
            result.cg_iterations += inner.solve(x, g, lambda, delta);
            truncate_step(problem, x, delta);
            for (std::size_t i = 0; i < n; ++i) trial[i] = x[i] + delta[i];
            const double f_trial = sys.total_objective(trial);
            const double predicted = -(2.0 * dot(g, delta) + inner.curvature(x, delta));
            if (f_trial < f) {
                const double rho = predicted > 0 ? (f - f_trial) / predicted : 0.0;
                const double decrease = f - f_trial;
                x.swap(trial);
                f = f_trial;
                result.history.push_back(f);
                sys.gradient(x, g);
                lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
                lambda = std::max(lambda, 1e-12);
                nu = 2.0;
                if (decrease <= opts.function_tolerance * f) {
                    stage_converged = true;
                    break;
                }
            } else {
                lambda *= nu;
                nu *= 2.0;
                if (lambda > 1e16) {
                    stage_converged = true;
                    break;
                }
            }
        }
        result.converged = stage_converged;
        JointState state = sys.unpack(x);
        if (bounds_satisfied(problem, state, opts.bound_tolerance) || stage >= opts.max_penalty_increases) break;
        sys.set_penalty_scale(sys.penalty_scale() * 10.0);
        ++result.penalty_increases;
    }

    result.state = sys.unpack(x);
    if (!bounds_satisfied(problem, result.state, opts.bound_tolerance)) {
        // Last resort after the penalty continuation: project onto the feasible set.
        for (std::size_t p = 0; p < pixels; ++p) {
            double* w = &result.state.weights[4 * p];
            double sum = 0.0;
            for (int k = 0; k < 4; ++k) {
                w[k] = std::max(w[k], 0.0);
                sum += w[k];
            }
            if (sum <= 0.0) {
                for (int k = 0; k < 4; ++k) w[k] = 0.25;
            } else {
                for (int k = 0; k < 3; ++k) w[k] /= sum;
                w[3] = 1.0 - w[0] - w[1] - w[2];
            }
        }
        for (std::size_t b = 0; b < problem.bands(); ++b) {
            for (double& v : result.state.shared[b]) v = problem.bounds[b].clamp(v);
        }
        x = sys.pack(result.state);
        result.state = sys.unpack(x);
    }
    result.objective = sys.data_objective(x);
    return result;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd solve_ridge(const Eigen::MatrixXd& design, const Eigen::VectorXd& target, const Eigen::VectorXd& v0,
                            double lambda) {
    if (design.cols() == 0) throw PreconditionError("ridge system has an empty neighbourhood");
    if (design.rows() != target.size() || design.cols() != v0.size()) {
        throw PreconditionError("ridge system dimensions disagree");
    }
    if (!(lambda >= 0.0)) throw PreconditionError("ridge weight must be non-negative");
    // Solve for the deviation from the anchor: (A^T A + lambda I) d = A^T (t - A v0).
    const Eigen::VectorXd rhs_residual = target - design * v0;
    if (lambda > 0.0) {
        Eigen::MatrixXd normal = design.transpose() * design;
        normal.diagonal().array() += lambda;
        return v0 + normal.ldlt().solve(design.transpose() * rhs_residual);
    }
    return v0 + design.completeOrthogonalDecomposition().solve(rhs_residual);
}

}  // namespace srunmix
