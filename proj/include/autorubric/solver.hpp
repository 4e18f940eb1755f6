#pragma once

#include <vector>

#include <Eigen/Core>

namespace autorubric::solver {

enum class Method {
    // Quadratic model of the loss minimized by soft-thresholded coordinate
    // descent, then backtracking; falls back to a gradient step on failure.
    proximal_newton,
    // Plain proximal gradient with backtracking on the step size.
    proximal_gradient,
};

/// L1-regularized logistic regression over score differentials, no intercept:
///
///   F(w) = ||w||_1 + C * sum_i log(1 + exp(-z_i * <w, x_i>))
///
/// Rows of `features` are preference pairs, columns are rubrics.
struct SolveProblem {
    Eigen::MatrixXd features;
    Eigen::VectorXd labels;
    double loss_weight = 1.0;
    bool nonnegative = false;
    double tolerance = 1e-8;
    int max_iterations = 50'000;
    Method method = Method::proximal_gradient;
    // Record F at every accepted iterate (for monotonicity checks).
    bool record_trace = false;

    void validate() const;
};

struct SolveResult {
    Eigen::VectorXd weights;
    double objective_value = 0.0;
    double kkt_residual = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> objective_trace;
};

/// Smooth part C * sum_i log(1 + exp(-z_i m_i)).
double smooth_loss(const SolveProblem& problem, const Eigen::VectorXd& weights);

Eigen::VectorXd smooth_gradient(const SolveProblem& problem, const Eigen::VectorXd& weights);

double objective(const SolveProblem& problem, const Eigen::VectorXd& weights);

/// Largest violation of the first-order optimality conditions; 0 at an exact
/// minimizer. Respects problem.nonnegative.
double kkt_residual(const Eigen::VectorXd& weights, const SolveProblem& problem);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|, |numeric|).
double gradient_check(const SolveProblem& problem, const Eigen::VectorXd& weights, double step);

/// Starts at w = 0 and iterates monotone-descent proximal steps until the KKT
/// residual drops under tolerance. Deterministic.
SolveResult fit(const SolveProblem& problem);

/// log(1 + exp(u)) without overflow.
double log1p_exp(double u) noexcept;

} // namespace autorubric::solver
