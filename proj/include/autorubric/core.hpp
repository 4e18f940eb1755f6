#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "autorubric/error.hpp"

namespace autorubric {

using json = nlohmann::json;

/// Lowercases, collapses internal whitespace, strips the ends and one
/// trailing period. Throws invalid-rubric when nothing is left.
std::string normalize_rubric_text(std::string_view text);

/// Hex SHA-256 of the normalized text.
std::string rubric_id(std::string_view text);

std::string sha256_hex(std::string_view data);

enum class OriginKind { seed, refined };

struct Origin {
    OriginKind kind = OriginKind::seed;
    int round = 0;

    static Origin seed() { return {}; }
    static Origin refined(int round) { return {OriginKind::refined, round}; }

    friend bool operator==(const Origin&, const Origin&) = default;
};

std::string to_string(const Origin& origin);
Origin parse_origin(std::string_view text);

class Rubric {
public:
    /// Throws invalid-rubric when the text normalizes to nothing.
    static Rubric create(std::string_view text, Origin origin = Origin::seed());

    const std::string& id() const noexcept { return id_; }
    const std::string& text() const noexcept { return text_; }
    const Origin& origin() const noexcept { return origin_; }
    /// 0 for seed rubrics; the proposing round for refined ones.
    int created_round() const noexcept { return origin_.kind == OriginKind::seed ? 0 : origin_.round; }

    friend bool operator==(const Rubric&, const Rubric&) = default;

private:
    Rubric(std::string id, std::string text, Origin origin)
        : id_(std::move(id)), text_(std::move(text)), origin_(origin) {}

    std::string id_;
    std::string text_;
    Origin origin_;
};

// +1 means image_a is preferred.
enum class Label : int { prefer_a = 1, prefer_b = -1 };

constexpr int sign(Label label) noexcept { return static_cast<int>(label); }

struct PreferencePair {
    std::string id;
    std::string prompt;
    std::string image_a;
    std::string image_b;
    Label label = Label::prefer_a;
    int selection_count = 0;

    void validate() const;

    friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

enum class Side { a, b };

constexpr std::string_view to_string(Side side) noexcept { return side == Side::a ? "a" : "b"; }
Side parse_side(std::string_view text);

/// Per-(pair, rubric) judge scores for both sides and their differential.
/// Rows follow pair_ids, columns follow rubric_ids.
class ScoreMatrix {
public:
    ScoreMatrix() = default;
    ScoreMatrix(std::vector<std::string> pair_ids, std::vector<std::string> rubric_ids,
                Eigen::MatrixXd side_a, Eigen::MatrixXd side_b);

    Eigen::Index rows() const noexcept { return side_a_.rows(); }
    Eigen::Index cols() const noexcept { return side_a_.cols(); }

    const std::vector<std::string>& pair_ids() const noexcept { return pair_ids_; }
    const std::vector<std::string>& rubric_ids() const noexcept { return rubric_ids_; }
    const Eigen::MatrixXd& side_a() const noexcept { return side_a_; }
    const Eigen::MatrixXd& side_b() const noexcept { return side_b_; }
    const Eigen::MatrixXd& delta() const noexcept { return delta_; }

    std::optional<Eigen::Index> column_of(std::string_view rubric_id) const;
    std::optional<Eigen::Index> row_of(std::string_view pair_id) const;

    /// Sub-matrix over the given rubric columns, in the given order.
    /// Throws incomplete-scores when a column is missing.
    ScoreMatrix select_columns(const std::vector<std::string>& rubric_ids) const;

    /// Throws if any stored invariant is violated (range, shape, delta identity).
    void check_invariants() const;

    friend bool operator==(const ScoreMatrix& a, const ScoreMatrix& b);

private:
    std::vector<std::string> pair_ids_;
    std::vector<std::string> rubric_ids_;
    Eigen::MatrixXd side_a_;
    Eigen::MatrixXd side_b_;
    Eigen::MatrixXd delta_;
};

struct WeightedRubric {
    Rubric rubric;
    double weight = 0.0;

    friend bool operator==(const WeightedRubric&, const WeightedRubric&) = default;
};

/// Weight descending, then rubric id ascending.
bool weighted_before(const WeightedRubric& lhs, const WeightedRubric& rhs) noexcept;

class WeightedRubricSet {
public:
    WeightedRubricSet() = default;
    WeightedRubricSet(std::vector<WeightedRubric> entries, int round,
                      std::optional<double> validation_accuracy = std::nullopt);

    const std::vector<WeightedRubric>& entries() const noexcept { return entries_; }
    int round() const noexcept { return round_; }
    const std::optional<double>& validation_accuracy() const noexcept { return validation_accuracy_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::vector<Rubric> rubrics() const;
    std::vector<std::string> ids() const;
    bool contains(std::string_view rubric_id) const;

    WeightedRubricSet with_validation_accuracy(double accuracy) const;

    friend bool operator==(const WeightedRubricSet&, const WeightedRubricSet&) = default;

private:
    std::vector<WeightedRubric> entries_;
    int round_ = 0;
    std::optional<double> validation_accuracy_;
};

struct RoundState {
    int round = 0;
    std::vector<Rubric> working_set;
    WeightedRubricSet retained;
    std::vector<std::string> mined_pair_ids;
    std::vector<std::string> proposed_rubric_ids;
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
    double train_tie_adjusted = 0.0;
    double validation_tie_adjusted = 0.0;

    void check_invariants() const;

    friend bool operator==(const RoundState&, const RoundState&) = default;
};

void to_json(json& j, const Origin& origin);
void from_json(const json& j, Origin& origin);
void to_json(json& j, const Rubric& rubric);
void to_json(json& j, const PreferencePair& pair);
void from_json(const json& j, PreferencePair& pair);
void to_json(json& j, const ScoreMatrix& matrix);
void to_json(json& j, const WeightedRubricSet& set);
void to_json(json& j, const RoundState& state);
void from_json(const json& j, RoundState& state);

Rubric rubric_from_json(const json& j);
ScoreMatrix score_matrix_from_json(const json& j);
WeightedRubricSet weighted_set_from_json(const json& j);

} // namespace autorubric

namespace nlohmann {

template <>
struct adl_serializer<autorubric::Rubric> {
    static autorubric::Rubric from_json(const json& j) { return autorubric::rubric_from_json(j); }
    static void to_json(json& j, const autorubric::Rubric& r) { autorubric::to_json(j, r); }
};

template <>
struct adl_serializer<autorubric::ScoreMatrix> {
    static autorubric::ScoreMatrix from_json(const json& j) { return autorubric::score_matrix_from_json(j); }
    static void to_json(json& j, const autorubric::ScoreMatrix& m) { autorubric::to_json(j, m); }
};

template <>
struct adl_serializer<autorubric::WeightedRubricSet> {
    static autorubric::WeightedRubricSet from_json(const json& j) {
        return autorubric::weighted_set_from_json(j);
    }
    static void to_json(json& j, const autorubric::WeightedRubricSet& s) { autorubric::to_json(j, s); }
};

} // namespace nlohmann
