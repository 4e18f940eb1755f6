#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "autorubric/core.hpp"

namespace autorubric::selection {

enum class RetentionMode { truncate_positive, nonnegative_fit };

struct RetentionConfig {
    int top_n = 20;
    double zero_threshold = 1e-4;
    RetentionMode mode = RetentionMode::truncate_positive;

    void validate() const;
};

/// Drops weights <= zero_threshold, sorts by (weight desc, id asc), keeps top_n.
WeightedRubricSet retain_top_n(const Eigen::VectorXd& weights, const std::vector<Rubric>& rubrics,
                               const RetentionConfig& config, int round = 0);

using RubricScores = std::unordered_map<std::string, double>;

/// Sum of w_j * s_j. Throws incomplete-scores if a retained rubric has no score.
double reward(const WeightedRubricSet& set, const RubricScores& scores);

/// Sum of w_j * (s_j(a) - s_j(b)).
double pair_margin(const WeightedRubricSet& set, const RubricScores& side_a, const RubricScores& side_b);

struct Evaluation {
    double strict_accuracy = 0.0;
    double tie_adjusted_accuracy = 0.0;
    int wins = 0;
    int ties = 0;
    int losses = 0;
    std::vector<std::string> misranked_ids;
    // Aligned with the evaluated pairs.
    std::vector<double> margins;
};

/// Win: z * margin > 0; tie: margin == 0; loss otherwise.
Evaluation evaluate_margins(const std::vector<std::string>& pair_ids, const std::vector<double>& margins,
                            const std::vector<int>& labels);

/// Margins from the matrix rows of `pairs` and the set's columns. The matrix may
/// hold extra rows and columns.
std::vector<double> margins(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs,
                            const ScoreMatrix& scores);

/// Per-pair rewards of each side under the set.
struct SideRewards {
    std::vector<double> a;
    std::vector<double> b;
};
SideRewards side_rewards(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs,
                         const ScoreMatrix& scores);

/// Throws undefined-metric on an empty pair list.
Evaluation evaluate(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs,
                    const ScoreMatrix& scores);

std::string to_string(RetentionMode mode);
RetentionMode parse_retention_mode(const std::string& text);

void to_json(json& j, const RetentionConfig& config);
void from_json(const json& j, RetentionConfig& config);

} // namespace autorubric::selection
