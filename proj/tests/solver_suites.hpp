#pragma once

#include <vector>

#include "autorubric/random.hpp"
#include "autorubric/solver.hpp"

struct FrozenProblem {
    int rows;
    int cols;
    double loss_weight;
    bool nonnegative;
    std::vector<double> features;
    std::vector<double> labels;
    double grid_minimum;
};

inline autorubric::solver::SolveProblem random_problem(autorubric::Rng& rng, int max_rows, int max_cols) {
    autorubric::solver::SolveProblem p;
    const auto rows = 1 + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(max_rows)));
    const auto cols = 1 + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(max_cols)));
    p.features.resize(rows, cols);
    p.labels.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) p.features(i, j) = rng.uniform(-1.0, 1.0);
        p.labels[i] = rng.bernoulli(0.5) ? 1.0 : -1.0;
    }
    return p;
}

// Fixed problems for the C-scaling regression baselines.
inline std::vector<autorubric::solver::SolveProblem> scaling_suite() {
    autorubric::Rng rng(77);
    std::vector<autorubric::solver::SolveProblem> out;
    for (int n = 0; n < 30; ++n) {
        auto p = random_problem(rng, 64, 32);
        p.nonnegative = n % 3 == 2;
        out.push_back(std::move(p));
    }
    return out;
}
