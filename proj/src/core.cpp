#include "autorubric/core.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <unordered_set>

#include <openssl/evp.h>

namespace autorubric {

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

// Trim the ends and collapse internal whitespace runs to one space.
std::string collapse_whitespace(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (unsigned char c : text) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(c));
    }
    return out;
}

} // namespace

std::string normalize_rubric_text(std::string_view text) {
    std::string out = collapse_whitespace(text);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (!out.empty() && out.back() == '.') {
        out.pop_back();
        while (!out.empty() && out.back() == ' ') out.pop_back();
    }
    if (out.empty()) throw Error(ErrorCode::invalid_rubric, "rubric text is empty after normalization");
    return out;
}

std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    if (EVP_Digest(data.data(), data.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorCode::io_error, "SHA-256 digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(2 * length);
    for (unsigned int i = 0; i < length; ++i) {
        hex.push_back(kHex[digest[i] >> 4]);
        hex.push_back(kHex[digest[i] & 0xF]);
    }
    return hex;
}

std::string rubric_id(std::string_view text) { return sha256_hex(normalize_rubric_text(text)); }

std::string to_string(const Origin& origin) {
    if (origin.kind == OriginKind::seed) return "seed";
    return "refined(" + std::to_string(origin.round) + ")";
}

Origin parse_origin(std::string_view text) {
    if (text == "seed") return Origin::seed();
    constexpr std::string_view prefix = "refined(";
    if (text.size() > prefix.size() + 1 && text.substr(0, prefix.size()) == prefix && text.back() == ')') {
        const auto digits = text.substr(prefix.size(), text.size() - prefix.size() - 1);
        int round = 0;
        for (char c : digits) {
            if (c < '0' || c > '9') throw Error(ErrorCode::invalid_argument, "bad origin: " + std::string(text));
            round = round * 10 + (c - '0');
        }
        return Origin::refined(round);
    }
    throw Error(ErrorCode::invalid_argument, "bad origin: " + std::string(text));
}

Rubric Rubric::create(std::string_view text, Origin origin) {
    if (origin.round < 0) throw Error(ErrorCode::invalid_rubric, "negative origin round");
    auto id = rubric_id(text);
    return Rubric(std::move(id), collapse_whitespace(text), origin);
}

void PreferencePair::validate() const {
    if (id.empty()) throw Error(ErrorCode::invalid_argument, "preference pair without id");
    if (image_a.empty() || image_b.empty()) {
        throw Error(ErrorCode::invalid_argument, "preference pair " + id + " lacks an image reference");
    }
    if (label != Label::prefer_a && label != Label::prefer_b) {
        throw Error(ErrorCode::invalid_argument, "preference pair " + id + " has a label outside {+1,-1}");
    }
    if (selection_count < 0) throw Error(ErrorCode::invalid_argument, "negative selection count on " + id);
}

Side parse_side(std::string_view text) {
    if (text == "a") return Side::a;
    if (text == "b") return Side::b;
    throw Error(ErrorCode::invalid_argument, "side must be \"a\" or \"b\", got \"" + std::string(text) + "\"");
}

// ---------------------------------------------------------------------------
// ScoreMatrix

ScoreMatrix::ScoreMatrix(std::vector<std::string> pair_ids, std::vector<std::string> rubric_ids,
                         Eigen::MatrixXd side_a, Eigen::MatrixXd side_b)
    : pair_ids_(std::move(pair_ids)),
      rubric_ids_(std::move(rubric_ids)),
      side_a_(std::move(side_a)),
      side_b_(std::move(side_b)) {
    const auto rows = static_cast<Eigen::Index>(pair_ids_.size());
    const auto cols = static_cast<Eigen::Index>(rubric_ids_.size());
    if (side_a_.rows() != rows || side_b_.rows() != rows || side_a_.cols() != cols || side_b_.cols() != cols) {
        throw Error(ErrorCode::dimension_mismatch, "score matrix shape does not match its id lists");
    }
    auto in_unit = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            if (!in_unit(side_a_(i, j)) || !in_unit(side_b_(i, j))) {
                throw Error(ErrorCode::invalid_argument, "judge score outside [0,1] for pair " + pair_ids_[i]);
            }
        }
    }
    delta_ = side_a_ - side_b_;
}

std::optional<Eigen::Index> ScoreMatrix::column_of(std::string_view rubric_id) const {
    auto it = std::find(rubric_ids_.begin(), rubric_ids_.end(), rubric_id);
    if (it == rubric_ids_.end()) return std::nullopt;
    return static_cast<Eigen::Index>(it - rubric_ids_.begin());
}

std::optional<Eigen::Index> ScoreMatrix::row_of(std::string_view pair_id) const {
    auto it = std::find(pair_ids_.begin(), pair_ids_.end(), pair_id);
    if (it == pair_ids_.end()) return std::nullopt;
    return static_cast<Eigen::Index>(it - pair_ids_.begin());
}

ScoreMatrix ScoreMatrix::select_columns(const std::vector<std::string>& rubric_ids) const {
    Eigen::MatrixXd a(rows(), static_cast<Eigen::Index>(rubric_ids.size()));
    Eigen::MatrixXd b(rows(), a.cols());
    for (std::size_t k = 0; k < rubric_ids.size(); ++k) {
        auto col = column_of(rubric_ids[k]);
        if (!col) throw Error(ErrorCode::incomplete_scores, "no scores for rubric " + rubric_ids[k]);
        a.col(static_cast<Eigen::Index>(k)) = side_a_.col(*col);
        b.col(static_cast<Eigen::Index>(k)) = side_b_.col(*col);
    }
    return ScoreMatrix(pair_ids_, rubric_ids, std::move(a), std::move(b));
}

void ScoreMatrix::check_invariants() const {
    if (delta_.rows() != rows() || delta_.cols() != cols()) {
        throw Error(ErrorCode::dimension_mismatch, "delta shape differs from side shapes");
    }
    if (rows() > 0 && cols() > 0 && (delta_ - (side_a_ - side_b_)).cwiseAbs().maxCoeff() != 0.0) {
        throw Error(ErrorCode::invalid_argument, "delta is not side_a - side_b");
    }
    if (rows() > 0 && cols() > 0 && delta_.cwiseAbs().maxCoeff() > 1.0) {
        throw Error(ErrorCode::invalid_argument, "delta outside [-1,1]");
    }
}

bool operator==(const ScoreMatrix& a, const ScoreMatrix& b) {
    return a.pair_ids_ == b.pair_ids_ && a.rubric_ids_ == b.rubric_ids_ && a.side_a_ == b.side_a_ &&
           a.side_b_ == b.side_b_ && a.delta_ == b.delta_;
}

// ---------------------------------------------------------------------------
// WeightedRubricSet

bool weighted_before(const WeightedRubric& lhs, const WeightedRubric& rhs) noexcept {
    if (lhs.weight != rhs.weight) return lhs.weight > rhs.weight;
    return lhs.rubric.id() < rhs.rubric.id();
}

WeightedRubricSet::WeightedRubricSet(std::vector<WeightedRubric> entries, int round,
                                     std::optional<double> validation_accuracy)
    : entries_(std::move(entries)), round_(round), validation_accuracy_(validation_accuracy) {
    std::unordered_set<std::string> seen;
    for (const auto& e : entries_) {
        if (!std::isfinite(e.weight) || e.weight <= 0.0) {
            throw Error(ErrorCode::invalid_argument, "retained rubric weights must be strictly positive");
        }
        if (!seen.insert(e.rubric.id()).second) {
            throw Error(ErrorCode::invalid_argument, "duplicate rubric id in weighted set: " + e.rubric.id());
        }
    }
    if (validation_accuracy_ && !(*validation_accuracy_ >= 0.0 && *validation_accuracy_ <= 1.0)) {
        throw Error(ErrorCode::invalid_argument, "validation accuracy outside [0,1]");
    }
    std::sort(entries_.begin(), entries_.end(), weighted_before);
}

std::vector<Rubric> WeightedRubricSet::rubrics() const {
    std::vector<Rubric> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.rubric);
    return out;
}

std::vector<std::string> WeightedRubricSet::ids() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.rubric.id());
    return out;
}

bool WeightedRubricSet::contains(std::string_view rubric_id) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const WeightedRubric& e) { return e.rubric.id() == rubric_id; });
}

WeightedRubricSet WeightedRubricSet::with_validation_accuracy(double accuracy) const {
    return WeightedRubricSet(entries_, round_, accuracy);
}

void RoundState::check_invariants() const {
    std::unordered_set<std::string> working;
    for (const auto& r : working_set) {
        if (!working.insert(r.id()).second) {
            throw Error(ErrorCode::invalid_argument, "duplicate rubric id in working set: " + r.id());
        }
    }
    for (const auto& e : retained.entries()) {
        if (!working.count(e.rubric.id())) {
            throw Error(ErrorCode::invalid_argument, "retained rubric " + e.rubric.id() + " not in working set");
        }
    }
    for (const auto& id : proposed_rubric_ids) {
        if (working.count(id)) {
            throw Error(ErrorCode::invalid_argument, "proposed rubric " + id + " already in working set");
        }
    }
}

// ---------------------------------------------------------------------------
// JSON

void to_json(json& j, const Origin& origin) { j = to_string(origin); }

void from_json(const json& j, Origin& origin) { origin = parse_origin(j.get<std::string>()); }

void to_json(json& j, const Rubric& rubric) {
    j = json{{"id", rubric.id()}, {"text", rubric.text()}, {"origin", to_string(rubric.origin())}};
}

Rubric rubric_from_json(const json& j) {
    Origin origin = Origin::seed();
    if (j.contains("origin")) origin = parse_origin(j.at("origin").get<std::string>());
    auto rubric = Rubric::create(j.at("text").get<std::string>(), origin);
    if (j.contains("id") && j.at("id").get<std::string>() != rubric.id()) {
        throw Error(ErrorCode::invalid_rubric, "stored id does not match text hash for \"" + rubric.text() + "\"");
    }
    return rubric;
}

void to_json(json& j, const PreferencePair& pair) {
    j = json{{"id", pair.id},
             {"prompt", pair.prompt},
             {"image_a", pair.image_a},
             {"image_b", pair.image_b},
             {"label", pair.label == Label::prefer_a ? "a" : "b"}};
    if (pair.selection_count != 0) j["selection_count"] = pair.selection_count;
}

void from_json(const json& j, PreferencePair& pair) {
    pair.id = j.at("id").get<std::string>();
    pair.prompt = j.value("prompt", std::string{});
    pair.image_a = j.at("image_a").get<std::string>();
    pair.image_b = j.at("image_b").get<std::string>();
    const auto& label = j.at("label");
    if (label.is_string()) {
        pair.label = parse_side(label.get<std::string>()) == Side::a ? Label::prefer_a : Label::prefer_b;
    } else if (label.is_number_integer() && (label.get<int>() == 1 || label.get<int>() == -1)) {
        pair.label = static_cast<Label>(label.get<int>());
    } else {
        throw Error(ErrorCode::invalid_argument, "pair " + pair.id + ": label must be \"a\" or \"b\"");
    }
    pair.selection_count = j.value("selection_count", 0);
    pair.validate();
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<Eigen::Index>(j.size()) != rows) {
        throw Error(ErrorCode::dimension_mismatch, "score matrix row count mismatch");
    }
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = j.at(static_cast<std::size_t>(i));
        if (static_cast<Eigen::Index>(row.size()) != cols) {
            throw Error(ErrorCode::dimension_mismatch, "score matrix column count mismatch");
        }
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
    }
    return m;
}

} // namespace

void to_json(json& j, const ScoreMatrix& matrix) {
    j = json{{"pair_ids", matrix.pair_ids()},
             {"rubric_ids", matrix.rubric_ids()},
             {"side_a", matrix_to_json(matrix.side_a())},
             {"side_b", matrix_to_json(matrix.side_b())}};
}

ScoreMatrix score_matrix_from_json(const json& j) {
    auto pair_ids = j.at("pair_ids").get<std::vector<std::string>>();
    auto rubric_ids = j.at("rubric_ids").get<std::vector<std::string>>();
    const auto rows = static_cast<Eigen::Index>(pair_ids.size());
    const auto cols = static_cast<Eigen::Index>(rubric_ids.size());
    auto a = matrix_from_json(j.at("side_a"), rows, cols);
    auto b = matrix_from_json(j.at("side_b"), rows, cols);
    return ScoreMatrix(std::move(pair_ids), std::move(rubric_ids), std::move(a), std::move(b));
}

void to_json(json& j, const WeightedRubricSet& set) {
    json rubrics = json::array();
    for (const auto& e : set.entries()) {
        rubrics.push_back(json{{"id", e.rubric.id()},
                               {"text", e.rubric.text()},
                               {"weight", e.weight},
                               {"origin", to_string(e.rubric.origin())}});
    }
    j = json{{"format_version", 1},
             {"round", set.round()},
             {"validation_accuracy", set.validation_accuracy() ? json(*set.validation_accuracy()) : json(nullptr)},
             {"rubrics", std::move(rubrics)}};
}

WeightedRubricSet weighted_set_from_json(const json& j) {
    if (j.value("format_version", 1) != 1) {
        throw Error(ErrorCode::invalid_argument, "unsupported rubric-set format_version");
    }
    std::vector<WeightedRubric> entries;
    for (const auto& r : j.at("rubrics")) entries.push_back({rubric_from_json(r), r.at("weight").get<double>()});
    std::optional<double> accuracy;
    if (j.contains("validation_accuracy") && !j.at("validation_accuracy").is_null()) {
        accuracy = j.at("validation_accuracy").get<double>();
    }
    return WeightedRubricSet(std::move(entries), j.value("round", 0), accuracy);
}

void to_json(json& j, const RoundState& state) {
    j = json{{"round", state.round},
             {"working_set", state.working_set},
             {"retained", state.retained},
             {"mined_pair_ids", state.mined_pair_ids},
             {"proposed_rubric_ids", state.proposed_rubric_ids},
             {"train_accuracy", state.train_accuracy},
             {"validation_accuracy", state.validation_accuracy},
             {"train_tie_adjusted", state.train_tie_adjusted},
             {"validation_tie_adjusted", state.validation_tie_adjusted}};
}

void from_json(const json& j, RoundState& state) {
    state.round = j.at("round").get<int>();
    state.working_set.clear();
    for (const auto& r : j.at("working_set")) state.working_set.push_back(rubric_from_json(r));
    state.retained = weighted_set_from_json(j.at("retained"));
    state.mined_pair_ids = j.at("mined_pair_ids").get<std::vector<std::string>>();
    state.proposed_rubric_ids = j.at("proposed_rubric_ids").get<std::vector<std::string>>();
    state.train_accuracy = j.at("train_accuracy").get<double>();
    state.validation_accuracy = j.at("validation_accuracy").get<double>();
    state.train_tie_adjusted = j.value("train_tie_adjusted", 0.0);
    state.validation_tie_adjusted = j.value("validation_tie_adjusted", 0.0);
}

} // namespace autorubric
