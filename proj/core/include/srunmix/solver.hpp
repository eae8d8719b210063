#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "srunmix/raster.hpp"

namespace srunmix {

struct SolverOptions {
    int max_outer_iterations = 50;
    double gradient_tolerance = 1e-8;   // relative to the initial gradient max-norm
    double function_tolerance = 1e-10;  // relative objective decrease of an accepted step
    int cg_max_iterations = 500;
    double cg_relative_tolerance = 1e-3;
    double bound_penalty_weight = 1e3;
    double bound_tolerance = 1e-3;      // allowed violation of W >= 0 and of S bounds (x range width)
    int max_penalty_increases = 4;
    double ridge_lambda = 1e-3;
    std::uint64_t seed = 0;             // unused; every solve is deterministic

    void validate() const;
};

/// Observations for the joint fit of shared values and weights.
///
/// Every band spans the same width x height high-resolution grid; the shared
/// values live on the (width+1) x (height+1) corner lattice.
struct JointProblem {
    int width = 0;
    int height = 0;
    std::vector<std::span<const double>> observed;
    std::vector<std::span<const std::uint8_t>> valid;
    std::vector<ValueRange> bounds;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    std::size_t lattice_points() const {
        return static_cast<std::size_t>(width + 1) * static_cast<std::size_t>(height + 1);
    }
    std::size_t bands() const { return observed.size(); }
};

struct JointState {
    std::vector<double> weights;              // 4 per pixel, W_0..W_3
    std::vector<std::vector<double>> shared;  // per band, one per lattice point
};

struct JointResult {
    JointState state;
    double objective = 0.0;          // data term sum of squared residuals
    double initial_objective = 0.0;
    std::vector<double> history;     // total objective (data + penalty) after each accepted step
    std::vector<std::size_t> stage_starts;  // history index where each penalty stage begins
    int iterations = 0;
    int cg_iterations = 0;
    int penalty_increases = 0;
    bool converged = false;
};

/// Residual system of the joint fit. W_3 is eliminated as 1 - W_0 - W_1 - W_2,
/// the bounds W_k >= 0 and S in range enter as one-sided squared hinges.
///
/// Parameter layout: 3 free weights per pixel, then one lattice block per band.
/// Residual layout: data residuals band-major, then 4 weight hinges per pixel,
/// then 2 range hinges per shared value.
class JointSystem {
public:
    JointSystem(const JointProblem& problem, double penalty_scale);

    std::size_t num_params() const { return 3 * pixels_ + bands_ * lattice_; }
    std::size_t num_residuals() const { return bands_ * pixels_ + 4 * pixels_ + 2 * bands_ * lattice_; }
    double penalty_scale() const { return penalty_; }
    void set_penalty_scale(double value) { penalty_ = value; }

    std::vector<double> pack(const JointState& state) const;
    JointState unpack(std::span<const double> params) const;

    void residuals(std::span<const double> params, std::span<double> out) const;
    void apply_jacobian(std::span<const double> params, std::span<const double> v, std::span<double> out) const;
    void apply_jacobian_transpose(std::span<const double> params, std::span<const double> u,
                                  std::span<double> out) const;

    /// Row-major dense Jacobian; intended for small test instances only.
    std::vector<double> dense_jacobian(std::span<const double> params) const;

    double data_objective(std::span<const double> params) const;
    double total_objective(std::span<const double> params) const;

    // Building blocks of the damped normal equations.
    void gradient(std::span<const double> params, std::span<double> out) const;
    void normal_product(std::span<const double> params, std::span<const double> v, std::span<double> out) const;
    /// Block-diagonal of J^T J: 6 unique entries of each pixel's 3x3 weight block,
    /// then one scalar per shared value.
    void block_diagonal(std::span<const double> params, std::span<double> weight_blocks,
                        std::span<double> shared_diag) const;

    const JointProblem& problem() const { return problem_; }

private:
    double observed(std::size_t band, std::size_t pixel) const { return problem_.observed[band][pixel]; }
    bool valid(std::size_t band, std::size_t pixel) const { return problem_.valid[band][pixel] != 0; }
    std::size_t lattice_index(int lx, int ly) const {
        return static_cast<std::size_t>(ly) * static_cast<std::size_t>(problem_.width + 1) +
               static_cast<std::size_t>(lx);
    }
    void check_finite(std::span<const double> params, std::span<const double> r) const;

    const JointProblem& problem_;
    std::size_t pixels_ = 0;
    std::size_t lattice_ = 0;
    std::size_t bands_ = 0;
    double penalty_ = 1.0;
};

/// Minimizes the joint sum of squares with a Levenberg-Marquardt outer loop and
/// block-Jacobi preconditioned conjugate gradients for the inner solves.
/// Each step is shortened per pixel (weights) and per shared value so that
/// coordinates inside their bounds stay inside; the hinges then only act on
/// violations present in the starting point.
JointResult solve_joint(const JointProblem& problem, const JointState& init, const SolverOptions& opts);

/// Minimizer of |target - design v|^2 + lambda |v - v0|^2. With lambda = 0 the
/// minimum-norm deviation from v0 is returned for rank-deficient designs.
Eigen::VectorXd solve_ridge(const Eigen::MatrixXd& design, const Eigen::VectorXd& target,
                            const Eigen::VectorXd& v0, double lambda);

}  // namespace srunmix
