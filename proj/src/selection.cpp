#include "autorubric/selection.hpp"

#include <algorithm>
#include <cmath>

namespace autorubric::selection {

void RetentionConfig::validate() const {
    if (top_n < 1) throw Error(ErrorCode::config_error, "top_n must be >= 1");
    if (!(zero_threshold > 0.0)) throw Error(ErrorCode::config_error, "zero_threshold must be > 0");
}

WeightedRubricSet retain_top_n(const Eigen::VectorXd& weights, const std::vector<Rubric>& rubrics,
                               const RetentionConfig& config, int round) {
    config.validate();
    if (static_cast<std::size_t>(weights.size()) != rubrics.size()) {
        throw Error(ErrorCode::dimension_mismatch, "weights and rubrics differ in length");
    }
    std::vector<WeightedRubric> kept;
    for (std::size_t j = 0; j < rubrics.size(); ++j) {
        const double w = weights[static_cast<Eigen::Index>(j)];
        if (w > config.zero_threshold) kept.push_back({rubrics[j], w});
    }
    std::sort(kept.begin(), kept.end(), weighted_before);
    if (kept.size() > static_cast<std::size_t>(config.top_n)) kept.erase(kept.begin() + config.top_n, kept.end());
    return WeightedRubricSet(std::move(kept), round);
}

namespace {

double score_for(const RubricScores& scores, const std::string& id) {
    auto it = scores.find(id);
    if (it == scores.end()) throw Error(ErrorCode::incomplete_scores, "no score for rubric " + id);
    return it->second;
}

struct Columns {
    std::vector<Eigen::Index> index;
    std::vector<double> weight;
};

Columns columns_for(const WeightedRubricSet& set, const ScoreMatrix& scores) {
    Columns c;
    for (const auto& e : set.entries()) {
        auto col = scores.column_of(e.rubric.id());
        if (!col) throw Error(ErrorCode::incomplete_scores, "no scores for retained rubric " + e.rubric.id());
        c.index.push_back(*col);
        c.weight.push_back(e.weight);
    }
    return c;
}

Eigen::Index row_for(const ScoreMatrix& scores, const std::string& pair_id) {
    auto row = scores.row_of(pair_id);
    if (!row) throw Error(ErrorCode::incomplete_scores, "no scores for pair " + pair_id);
    return *row;
}

} // namespace

double reward(const WeightedRubricSet& set, const RubricScores& scores) {
    double total = 0.0;
    for (const auto& e : set.entries()) total += e.weight * score_for(scores, e.rubric.id());
    return total;
}

double pair_margin(const WeightedRubricSet& set, const RubricScores& side_a, const RubricScores& side_b) {
    double total = 0.0;
    for (const auto& e : set.entries()) {
        total += e.weight * (score_for(side_a, e.rubric.id()) - score_for(side_b, e.rubric.id()));
    }
    return total;
}

Evaluation evaluate_margins(const std::vector<std::string>& pair_ids, const std::vector<double>& margins,
                            const std::vector<int>& labels) {
    if (pair_ids.empty()) throw Error(ErrorCode::undefined_metric, "accuracy over zero pairs");
    if (margins.size() != pair_ids.size() || labels.size() != pair_ids.size()) {
        throw Error(ErrorCode::dimension_mismatch, "margins, labels and pair ids differ in length");
    }
    Evaluation ev;
    ev.margins = margins;
    for (std::size_t i = 0; i < pair_ids.size(); ++i) {
        const double signed_margin = labels[i] * margins[i];
        if (margins[i] == 0.0) {
            ++ev.ties;
        } else if (signed_margin > 0.0) {
            ++ev.wins;
        } else {
            ++ev.losses;
            ev.misranked_ids.push_back(pair_ids[i]);
        }
    }
    const double total = static_cast<double>(pair_ids.size());
    ev.strict_accuracy = ev.wins / total;
    ev.tie_adjusted_accuracy = (ev.wins + 0.5 * ev.ties) / total;
    return ev;
}

std::vector<double> margins(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs,
                            const ScoreMatrix& scores) {
    const auto cols = columns_for(set, scores);
    std::vector<double> out;
    out.reserve(pairs.size());
    for (const auto& pair : pairs) {
        const auto i = row_for(scores, pair.id);
        double m = 0.0;
        for (std::size_t k = 0; k < cols.index.size(); ++k) m += cols.weight[k] * scores.delta()(i, cols.index[k]);
        out.push_back(m);
    }
    return out;
}

SideRewards side_rewards(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs,
                         const ScoreMatrix& scores) {
    const auto cols = columns_for(set, scores);
    SideRewards out;
    for (const auto& pair : pairs) {
        const auto i = row_for(scores, pair.id);
        double ra = 0.0, rb = 0.0;
        for (std::size_t k = 0; k < cols.index.size(); ++k) {
            ra += cols.weight[k] * scores.side_a()(i, cols.index[k]);
            rb += cols.weight[k] * scores.side_b()(i, cols.index[k]);
        }
        out.a.push_back(ra);
        out.b.push_back(rb);
    }
    return out;
}

Evaluation evaluate(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs,
                    const ScoreMatrix& scores) {
    if (pairs.empty()) throw Error(ErrorCode::undefined_metric, "accuracy over zero pairs");
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (const auto& p : pairs) {
        ids.push_back(p.id);
        labels.push_back(sign(p.label));
    }
    return evaluate_margins(ids, margins(set, pairs, scores), labels);
}

std::string to_string(RetentionMode mode) {
    return mode == RetentionMode::truncate_positive ? "truncate_positive" : "nonnegative_fit";
}

RetentionMode parse_retention_mode(const std::string& text) {
    if (text == "truncate_positive") return RetentionMode::truncate_positive;
    if (text == "nonnegative_fit") return RetentionMode::nonnegative_fit;
    throw Error(ErrorCode::config_error, "unknown retention mode: " + text);
}

void to_json(json& j, const RetentionConfig& config) {
    j = json{{"top_n", config.top_n}, {"zero_threshold", config.zero_threshold}, {"mode", to_string(config.mode)}};
}

void from_json(const json& j, RetentionConfig& config) {
    config.top_n = j.value("top_n", config.top_n);
    config.zero_threshold = j.value("zero_threshold", config.zero_threshold);
    if (j.contains("mode")) config.mode = parse_retention_mode(j.at("mode").get<std::string>());
    config.validate();
}

} // namespace autorubric::selection
