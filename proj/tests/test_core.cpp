#include <doctest.h>

#include <algorithm>
#include <string>

#include "autorubric/core.hpp"
#include "autorubric/random.hpp"

using namespace autorubric;

namespace {

std::string random_text(Rng& rng) {
    static const char* words[] = {"the", "image", "shows", "Red", "cube", "  ", "clear", "TEXT", "hands", "sky."};
    std::string out;
    const int n = 1 + static_cast<int>(rng.below(8));
    for (int k = 0; k < n; ++k) {
        out += words[rng.below(10)];
        out += rng.bernoulli(0.3) ? "\t " : " ";
    }
    return out + "x" + std::to_string(rng.below(1000));
}

ScoreMatrix random_matrix(Rng& rng, int rows, int cols) {
    std::vector<std::string> pairs, rubrics;
    for (int i = 0; i < rows; ++i) pairs.push_back("p" + std::to_string(i));
    for (int j = 0; j < cols; ++j) rubrics.push_back(rubric_id("rubric " + std::to_string(j)));
    Eigen::MatrixXd a(rows, cols), b(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            a(i, j) = rng.uniform();
            b(i, j) = rng.uniform();
        }
    }
    return ScoreMatrix(pairs, rubrics, a, b);
}

} // namespace

TEST_CASE("normalize_rubric_text canonicalizes case and whitespace") {
    CHECK(normalize_rubric_text("  The image matches   the prompt. ") == "the image matches the prompt");
    CHECK(normalize_rubric_text("X") == "x");
    CHECK(normalize_rubric_text("a\tb\n c") == "a b c");
    CHECK_THROWS_AS(normalize_rubric_text(""), Error);
    CHECK_THROWS_AS(normalize_rubric_text("   \n"), Error);
    CHECK_THROWS_AS(normalize_rubric_text(" . "), Error);
    try {
        normalize_rubric_text("");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::invalid_rubric);
    }
}

TEST_CASE("rubric_id is a fixed-length hash of the normalized text") {
    CHECK(rubric_id("A b") == rubric_id("a  B"));
    CHECK(rubric_id("a") != rubric_id("b"));
    CHECK(rubric_id("Sky is blue.") == rubric_id("sky is blue"));
    const std::string big(10 * 1024, 'q');
    CHECK(rubric_id(big).size() == 64);
    CHECK(rubric_id("a").size() == 64);
    // SHA-256("x")
    CHECK(rubric_id("X") == "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881");
}

TEST_CASE("origins print and parse") {
    CHECK(to_string(Origin::seed()) == "seed");
    CHECK(to_string(Origin::refined(7)) == "refined(7)");
    CHECK(parse_origin("refined(12)") == Origin::refined(12));
    CHECK_THROWS_AS(parse_origin("refined(x)"), Error);
    CHECK_THROWS_AS(parse_origin("bogus"), Error);
}

TEST_CASE("rubric keeps readable text and derives identity") {
    const auto r = Rubric::create("  Hands have five   fingers. ", Origin::refined(2));
    CHECK(r.text() == "Hands have five fingers.");
    CHECK(r.id() == rubric_id("hands have five fingers"));
    CHECK(r.created_round() == 2);
    CHECK(Rubric::create("x").created_round() == 0);
    CHECK_THROWS_AS(Rubric::create("   "), Error);
}

TEST_CASE("rubric json rejects a tampered id") {
    json j = Rubric::create("object count is correct");
    j["id"] = std::string(64, '0');
    CHECK_THROWS_AS(j.get<Rubric>(), Error);
}

TEST_CASE("preference pair parsing and validation") {
    const auto j = json::parse(R"({"id":"p1","prompt":"a cat","image_a":"a.png","image_b":"b.png","label":"b"})");
    const auto pair = j.get<PreferencePair>();
    CHECK(pair.label == Label::prefer_b);
    CHECK(sign(pair.label) == -1);
    CHECK(pair.selection_count == 0);
    CHECK_THROWS_AS(json::parse(R"({"id":"p","image_a":"a","image_b":"b","label":"tie"})").get<PreferencePair>(),
                    Error);
    CHECK_THROWS_AS(json::parse(R"({"id":"p","image_a":"","image_b":"b","label":"a"})").get<PreferencePair>(),
                    Error);
}

TEST_CASE("score matrix invariants") {
    Rng rng(1);
    const auto m = random_matrix(rng, 7, 5);
    m.check_invariants();
    CHECK((m.delta() - (m.side_a() - m.side_b())).cwiseAbs().maxCoeff() == 0.0);
    CHECK(m.delta().cwiseAbs().maxCoeff() <= 1.0);

    const auto sub = m.select_columns({m.rubric_ids()[3], m.rubric_ids()[0]});
    CHECK(sub.cols() == 2);
    CHECK(sub.side_a().col(0) == m.side_a().col(3));
    CHECK_THROWS_AS(m.select_columns({"missing"}), Error);

    const ScoreMatrix empty_cols({"p0"}, {}, Eigen::MatrixXd(1, 0), Eigen::MatrixXd(1, 0));
    CHECK(empty_cols.cols() == 0);
    empty_cols.check_invariants();

    Eigen::MatrixXd bad = Eigen::MatrixXd::Constant(1, 1, 1.2);
    CHECK_THROWS_AS(ScoreMatrix({"p"}, {"r"}, bad, Eigen::MatrixXd::Zero(1, 1)), Error);
    CHECK_THROWS_AS(ScoreMatrix({"p", "q"}, {"r"}, Eigen::MatrixXd::Zero(1, 1), Eigen::MatrixXd::Zero(1, 1)), Error);
}

TEST_CASE("weighted set ordering is a total order and idempotent") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<WeightedRubric> entries;
        const int n = 1 + static_cast<int>(rng.below(12));
        for (int k = 0; k < n; ++k) {
            // Coarse weights force ties that the id must break.
            entries.push_back({Rubric::create("criterion " + std::to_string(trial) + "-" + std::to_string(k)),
                               0.25 * static_cast<double>(1 + rng.below(3))});
        }
        const WeightedRubricSet set(entries, trial);
        for (std::size_t k = 1; k < set.size(); ++k) {
            CHECK(weighted_before(set.entries()[k - 1], set.entries()[k]));
        }
        auto shuffled = set.entries();
        std::reverse(shuffled.begin(), shuffled.end());
        CHECK(WeightedRubricSet(shuffled, trial) == set);
        CHECK(WeightedRubricSet(set.entries(), trial) == set);
    }
}

TEST_CASE("weighted set rejects non-positive weights and duplicates") {
    const auto r = Rubric::create("a");
    CHECK_THROWS_AS(WeightedRubricSet({{r, 0.0}}, 0), Error);
    CHECK_THROWS_AS(WeightedRubricSet({{r, -1.0}}, 0), Error);
    CHECK_THROWS_AS(WeightedRubricSet({{r, 1.0}, {Rubric::create("A."), 2.0}}, 0), Error);
    CHECK_THROWS_AS(WeightedRubricSet({{r, 1.0}}, 0, 1.5), Error);
}

TEST_CASE("serialization round-trips every core type") {
    Rng rng(42);
    for (int trial = 0; trial < 40; ++trial) {
        const auto rubric = Rubric::create(random_text(rng),
                                           rng.bernoulli(0.5) ? Origin::seed()
                                                              : Origin::refined(static_cast<int>(rng.below(9))));
        CHECK(json::parse(json(rubric).dump()).get<Rubric>() == rubric);

        PreferencePair pair{"id" + std::to_string(trial), random_text(rng), "img/a.png", "https://x/b.png",
                            rng.bernoulli(0.5) ? Label::prefer_a : Label::prefer_b,
                            static_cast<int>(rng.below(5))};
        CHECK(json::parse(json(pair).dump()).get<PreferencePair>() == pair);

        const auto matrix = random_matrix(rng, 1 + static_cast<int>(rng.below(6)), static_cast<int>(rng.below(5)));
        CHECK(json::parse(json(matrix).dump()).get<ScoreMatrix>() == matrix);

        std::vector<WeightedRubric> entries;
        for (int k = 0; k < 1 + static_cast<int>(rng.below(5)); ++k) {
            entries.push_back({Rubric::create(random_text(rng) + std::to_string(k)), rng.uniform(1e-3, 3.0)});
        }
        const WeightedRubricSet set(entries, trial,
                                    rng.bernoulli(0.5) ? std::optional<double>(rng.uniform()) : std::nullopt);
        CHECK(json::parse(json(set).dump()).get<WeightedRubricSet>() == set);

        RoundState state;
        state.round = trial;
        state.working_set = set.rubrics();
        state.working_set.push_back(Rubric::create("extra " + std::to_string(trial)));
        state.retained = set;
        state.mined_pair_ids = {"p1", "p7"};
        state.proposed_rubric_ids = {rubric_id("new one " + std::to_string(trial))};
        state.train_accuracy = rng.uniform();
        state.validation_accuracy = rng.uniform();
        state.check_invariants();
        CHECK(json::parse(json(state).dump()).get<RoundState>() == state);
    }
}

TEST_CASE("round state invariants") {
    RoundState s;
    const auto a = Rubric::create("a");
    s.working_set = {a};
    s.retained = WeightedRubricSet({{Rubric::create("b"), 1.0}}, 0);
    CHECK_THROWS_AS(s.check_invariants(), Error);
    s.retained = WeightedRubricSet({{a, 1.0}}, 0);
    s.check_invariants();
    s.proposed_rubric_ids = {a.id()};
    CHECK_THROWS_AS(s.check_invariants(), Error);
}

TEST_CASE("Rng is reproducible and in range") {
    Rng a(9), b(9);
    for (int k = 0; k < 1000; ++k) {
        const double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(a.below(7) == b.below(7));
    }
    CHECK(combine_seed({1, 2}) != combine_seed({2, 1}));
}
