#include "autorubric/solver.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "autorubric/error.hpp"

namespace autorubric::solver {

namespace {

// sigma(t) = 1 / (1 + exp(-t)), evaluated on the side that cannot overflow.
double sigmoid(double t) noexcept {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

double l1_norm(const Eigen::VectorXd& w) { return w.cwiseAbs().sum(); }

Eigen::VectorXd prox(const Eigen::VectorXd& v, double threshold, bool nonnegative) {
    Eigen::VectorXd out(v.size());
    for (Eigen::Index j = 0; j < v.size(); ++j) {
        if (nonnegative) {
            out[j] = std::max(v[j] - threshold, 0.0);
        } else {
            const double mag = std::abs(v[j]) - threshold;
            out[j] = mag > 0.0 ? std::copysign(mag, v[j]) : 0.0;
        }
    }
    return out;
}

// Loss and gradient share the margin computation.
struct SmoothEval {
    double loss = 0.0;
    Eigen::VectorXd gradient;
};

double loss_from_margins(const SolveProblem& p, const Eigen::VectorXd& margins) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < margins.size(); ++i) total += log1p_exp(-p.labels[i] * margins[i]);
    const double loss = p.loss_weight * total;
    if (!std::isfinite(loss)) throw Error(ErrorCode::numeric_failure, "non-finite logistic loss");
    return loss;
}

SmoothEval evaluate_smooth(const SolveProblem& p, const Eigen::VectorXd& w) {
    const Eigen::VectorXd margins = p.features * w;
    Eigen::VectorXd coeff(margins.size());
    for (Eigen::Index i = 0; i < margins.size(); ++i) {
        const double z = p.labels[i];
        coeff[i] = -z * sigmoid(-z * margins[i]);
    }
    return {loss_from_margins(p, margins), p.loss_weight * (p.features.transpose() * coeff)};
}

double residual_from_gradient(const Eigen::VectorXd& w, const Eigen::VectorXd& g, bool nonnegative) {
    double worst = 0.0;
    for (Eigen::Index j = 0; j < w.size(); ++j) {
        double r;
        if (nonnegative) {
            r = w[j] > 0.0 ? std::abs(g[j] + 1.0) : std::max(0.0, -(g[j] + 1.0));
        } else if (w[j] != 0.0) {
            r = std::abs(g[j] + (w[j] > 0.0 ? 1.0 : -1.0));
        } else {
            r = std::max(0.0, std::abs(g[j]) - 1.0);
        }
        worst = std::max(worst, r);
    }
    return worst;
}

} // namespace

double log1p_exp(double u) noexcept {
    if (u > 0.0) return u + std::log1p(std::exp(-u));
    return std::log1p(std::exp(u));
}

void SolveProblem::validate() const {
    if (features.rows() < 1 || features.cols() < 1) {
        throw Error(ErrorCode::invalid_argument, "solve problem needs at least one pair and one rubric");
    }
    if (labels.size() != features.rows()) {
        throw Error(ErrorCode::dimension_mismatch, "label count " + std::to_string(labels.size()) +
                                                       " does not match pair count " +
                                                       std::to_string(features.rows()));
    }
    for (Eigen::Index i = 0; i < labels.size(); ++i) {
        if (labels[i] != 1.0 && labels[i] != -1.0) throw Error(ErrorCode::invalid_argument, "labels must be +1 or -1");
    }
    if (!features.allFinite() || features.cwiseAbs().maxCoeff() > 1.0) {
        throw Error(ErrorCode::invalid_argument, "feature entries must lie in [-1,1]");
    }
    if (!(loss_weight > 0.0) || !std::isfinite(loss_weight)) {
        throw Error(ErrorCode::invalid_argument, "loss weight C must be positive");
    }
    if (!(tolerance > 0.0)) throw Error(ErrorCode::invalid_argument, "tolerance must be positive");
    if (max_iterations < 1) throw Error(ErrorCode::invalid_argument, "max_iterations must be >= 1");
}

double smooth_loss(const SolveProblem& problem, const Eigen::VectorXd& weights) {
    if (weights.size() != problem.features.cols()) throw Error(ErrorCode::dimension_mismatch, "weights length != J");
    return loss_from_margins(problem, problem.features * weights);
}

Eigen::VectorXd smooth_gradient(const SolveProblem& problem, const Eigen::VectorXd& weights) {
    if (weights.size() != problem.features.cols()) throw Error(ErrorCode::dimension_mismatch, "weights length != J");
    return evaluate_smooth(problem, weights).gradient;
}

double objective(const SolveProblem& problem, const Eigen::VectorXd& weights) {
    return l1_norm(weights) + smooth_loss(problem, weights);
}

double kkt_residual(const Eigen::VectorXd& weights, const SolveProblem& problem) {
    if (weights.size() != problem.features.cols()) throw Error(ErrorCode::dimension_mismatch, "weights length != J");
    return residual_from_gradient(weights, smooth_gradient(problem, weights), problem.nonnegative);
}

double gradient_check(const SolveProblem& problem, const Eigen::VectorXd& weights, double step) {
    const Eigen::VectorXd analytic = smooth_gradient(problem, weights);
    double worst = 0.0;
    Eigen::VectorXd probe = weights;
    for (Eigen::Index j = 0; j < weights.size(); ++j) {
        probe[j] = weights[j] + step;
        const double up = smooth_loss(problem, probe);
        probe[j] = weights[j] - step;
        const double down = smooth_loss(problem, probe);
        probe[j] = weights[j];
        const double numeric = (up - down) / (2.0 * step);
        const double scale = std::max({1.0, std::abs(analytic[j]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[j] - numeric) / scale);
    }
    return worst;
}

namespace {

// Loss change f(w + step) - f(w), evaluated termwise so that tiny steps near
// the optimum are not lost to cancellation against f itself:
//   log(1+e^a) - log(1+e^b) = log1p(expm1(a - b) * sigma(b)).
double loss_change(const SolveProblem& p, const Eigen::VectorXd& margins, const Eigen::VectorXd& margin_step) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < margins.size(); ++i) {
        const double z = p.labels[i];
        const double shift = -z * margin_step[i];
        if (std::abs(shift) < 1.0) {
            total += std::log1p(std::expm1(shift) * sigmoid(-z * margins[i]));
        } else {
            total += log1p_exp(-z * (margins[i] + margin_step[i])) - log1p_exp(-z * margins[i]);
        }
    }
    const double change = p.loss_weight * total;
    if (!std::isfinite(change)) throw Error(ErrorCode::numeric_failure, "non-finite objective change");
    return change;
}

double l1_change(const Eigen::VectorXd& w, const Eigen::VectorXd& step) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < w.size(); ++j) total += std::abs(w[j] + step[j]) - std::abs(w[j]);
    return total;
}

struct Iterate {
    Eigen::VectorXd weights;
    Eigen::VectorXd margins;
    Eigen::VectorXd gradient;
    double residual = 0.0;
};

Iterate make_iterate(const SolveProblem& p, Eigen::VectorXd w) {
    Iterate it;
    it.margins = p.features * w;
    Eigen::VectorXd coeff(it.margins.size());
    for (Eigen::Index i = 0; i < it.margins.size(); ++i) {
        const double z = p.labels[i];
        coeff[i] = -z * sigmoid(-z * it.margins[i]);
    }
    it.gradient = p.loss_weight * (p.features.transpose() * coeff);
    it.residual = residual_from_gradient(w, it.gradient, p.nonnegative);
    it.weights = std::move(w);
    return it;
}

// Minimizes g.d + 0.5 d'Hd + ||w + d||_1 (w + d >= 0 in nonnegative mode)
// by cyclic coordinate descent with soft-thresholding.
Eigen::VectorXd newton_direction(const SolveProblem& p, const Iterate& it) {
    const Eigen::Index dim = it.weights.size();
    Eigen::VectorXd curvature(it.margins.size());
    for (Eigen::Index i = 0; i < curvature.size(); ++i) {
        curvature[i] = sigmoid(it.margins[i]) * sigmoid(-it.margins[i]);
    }
    const Eigen::MatrixXd hessian =
        p.loss_weight * (p.features.transpose() * curvature.asDiagonal() * p.features);

    Eigen::VectorXd d = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd hd = Eigen::VectorXd::Zero(dim);
    constexpr int kMaxSweeps = 500;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double largest_move = 0.0;
        double largest_coord = 0.0;
        for (Eigen::Index j = 0; j < dim; ++j) {
            const double a = hessian(j, j) + 1e-12;
            const double b = it.gradient[j] + hd[j] - hessian(j, j) * d[j];
            const double center = it.weights[j] - b / a;
            double target;
            if (p.nonnegative) {
                target = std::max(center - 1.0 / a, 0.0);
            } else {
                const double mag = std::abs(center) - 1.0 / a;
                target = mag > 0.0 ? std::copysign(mag, center) : 0.0;
            }
            const double move = (target - it.weights[j]) - d[j];
            if (move != 0.0) {
                d[j] += move;
                hd += move * hessian.col(j);
            }
            largest_move = std::max(largest_move, std::abs(move));
            largest_coord = std::max(largest_coord, std::abs(d[j]));
        }
        if (largest_move <= 1e-3 * largest_coord || largest_move < 1e-15) break;
    }
    return d;
}

// Backtracking along `direction`; returns the accepted iterate or nothing.
std::optional<Iterate> line_search(const SolveProblem& p, const Iterate& it, const Eigen::VectorXd& direction,
                                   double predicted) {
    constexpr double kArmijo = 1e-4;
    const Eigen::VectorXd margin_dir = p.features * direction;
    double alpha = 1.0;
    for (int k = 0; k < 40; ++k, alpha *= 0.5) {
        const double change =
            loss_change(p, it.margins, alpha * margin_dir) + l1_change(it.weights, alpha * direction);
        if (change <= kArmijo * alpha * predicted) {
            return make_iterate(p, it.weights + alpha * direction);
        }
    }
    return std::nullopt;
}

} // namespace

SolveResult fit(const SolveProblem& problem) {
    problem.validate();
    const bool nonneg = problem.nonnegative;

    SolveResult result;
    Iterate current = make_iterate(problem, Eigen::VectorXd::Zero(problem.features.cols()));
    double obj = smooth_loss(problem, current.weights);
    if (problem.record_trace) result.objective_trace.push_back(obj);

    double lipschitz = std::max(1e-12, 0.25 * problem.loss_weight * problem.features.squaredNorm() /
                                           static_cast<double>(problem.features.cols()));
    int iter = 0;
    while (current.residual > problem.tolerance && iter < problem.max_iterations) {
        ++iter;
        std::optional<Iterate> next;

        if (problem.method == Method::proximal_newton) {
            const Eigen::VectorXd direction = newton_direction(problem, current);
            const double predicted = current.gradient.dot(direction) + l1_change(current.weights, direction);
            if (predicted < 0.0) next = line_search(problem, current, direction, predicted);
        }

        if (!next) {
            for (int k = 0; k < 80 && !next; ++k) {
                const Eigen::VectorXd z =
                    prox(current.weights - current.gradient / lipschitz, 1.0 / lipschitz, nonneg);
                const Eigen::VectorXd step = z - current.weights;
                if (step.isZero(0.0)) break;
                const Eigen::VectorXd margin_step = problem.features * step;
                const double smooth_change = loss_change(problem, current.margins, margin_step);
                const double model = current.gradient.dot(step) + 0.5 * lipschitz * step.squaredNorm();
                if (smooth_change <= model) {
                    next = make_iterate(problem, z);
                } else {
                    lipschitz *= 2.0;
                }
            }
            lipschitz *= 0.8;
        }
        if (!next) break;

        obj = objective(problem, next->weights);
        current = std::move(*next);
        if (problem.record_trace) result.objective_trace.push_back(obj);
    }

    result.kkt_residual = current.residual;
    result.weights = std::move(current.weights);
    result.objective_value = objective(problem, result.weights);
    result.iterations = iter;
    result.converged = result.kkt_residual <= problem.tolerance;
    return result;
}

} // namespace autorubric::solver
