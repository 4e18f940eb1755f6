#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <set>

#include "autorubric/proposer.hpp"
#include "autorubric/random.hpp"
#include "fakes.hpp"
#include "fake_endpoint.hpp"

using namespace autorubric;
using namespace autorubric::proposer;

namespace {

// Scripted generator: reasoner/diagnoser replies are looked up by pair id and
// passed through to the extractor, which returns them as a fenced list.
class ScriptedGenerator : public TextGenerator {
public:
    std::map<std::string, std::vector<std::string>> statements;
    std::function<std::vector<std::string>(const std::vector<std::string>&)> merger =
        [](const std::vector<std::string>& in) { return in; };
    std::string fail_on_pair;

    std::string generate(const GenerationRequest& r) override {
        {
            std::lock_guard lock(mutex);
            ++calls[r.role];
            requests.push_back(r);
        }
        if (!fail_on_pair.empty() && r.pair_id == fail_on_pair) {
            throw Error(ErrorCode::proposal_failure, "scripted failure");
        }
        switch (r.role) {
        case Role::vision_reasoner:
        case Role::failure_diagnoser: {
            std::string out;
            auto it = statements.find(r.pair_id);
            if (it != statements.end()) {
                for (const auto& s : it->second) out += s + "\n";
            }
            return out;
        }
        case Role::rule_extractor: return fence(split(r.diagnosis));
        case Role::rule_merger: return fence(merger(r.rubric_texts));
        }
        return {};
    }

    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        std::size_t start = 0;
        while (start < text.size()) {
            auto end = text.find('\n', start);
            if (end == std::string::npos) end = text.size();
            if (end > start) out.push_back(text.substr(start, end - start));
            start = end + 1;
        }
        return out;
    }

    static std::string fence(const std::vector<std::string>& items) {
        std::string out = "Here are the rules.\n```\n";
        for (const auto& s : items) out += "- " + s + "\n";
        return out + "```\n";
    }

    std::mutex mutex;
    std::map<Role, int> calls;
    std::vector<GenerationRequest> requests;
};

ProposerConfig fast_config() {
    ProposerConfig c;
    c.backoff_initial_ms = 1;
    c.max_parallel_requests = 1;
    return c;
}

std::vector<std::string> ids_of(const std::vector<Rubric>& rubrics) {
    std::vector<std::string> out;
    for (const auto& r : rubrics) out.push_back(r.id());
    return out;
}

std::vector<std::string> texts_of(const std::vector<Rubric>& rubrics) {
    std::vector<std::string> out;
    for (const auto& r : rubrics) out.push_back(r.text());
    return out;
}

} // namespace

TEST_CASE("statement lists come from the first fenced block") {
    const auto got = parse_statement_list("Preamble - not this\n```text\n- Has a red hat.\n* Sky is blue\n"
                                          "3. Text is legible\n4) Two dogs\nstray prose line\n\n```\n- after fence\n");
    CHECK(got == std::vector<std::string>{"Has a red hat.", "Sky is blue", "Text is legible", "Two dogs"});
}

TEST_CASE("unfenced replies are read as a whole") {
    CHECK(parse_statement_list("- one\nnoise\n- two") == std::vector<std::string>{"one", "two"});
    CHECK(parse_statement_list("").empty());
    CHECK(parse_statement_list("```\n```").empty());
}

TEST_CASE("a fixed statement list passes through seed generation unchanged") {
    ScriptedGenerator gen;
    const std::vector<std::string> fixed{"the cat is orange", "there are exactly two birds", "the sign reads open"};
    const auto pairs = make_pairs(4);
    for (const auto& p : pairs) gen.statements[p.id] = fixed;
    const auto result = generate_seed_rubrics(pairs, gen, fast_config());
    CHECK(texts_of(result.rubrics) == fixed);
    for (const auto& r : result.rubrics) {
        CHECK(r.origin() == Origin::seed());
        CHECK(r.id() == rubric_id(r.text()));
    }
    REQUIRE(result.records.size() == 4);
    for (const auto& rec : result.records) {
        CHECK(rec.stage == Stage::seed);
        CHECK(rec.extracted_rubrics == fixed);
        CHECK(rec.accepted_ids == ids_of(result.rubrics));
    }
    CHECK(gen.calls[Role::vision_reasoner] == 4);
    CHECK(gen.calls[Role::rule_extractor] == 4);
    CHECK(gen.calls[Role::rule_merger] == 1);
}

TEST_CASE("texts that normalize identically collapse to one rubric") {
    ScriptedGenerator gen;
    const auto pairs = make_pairs(2);
    gen.statements[pairs[0].id] = {"The  cat is Orange."};
    gen.statements[pairs[1].id] = {"the cat is orange", "THE CAT IS ORANGE ."};
    const auto result = generate_seed_rubrics(pairs, gen, fast_config());
    REQUIRE(result.rubrics.size() == 1);
    CHECK(result.rubrics[0].text() == "The cat is Orange.");
    CHECK(result.rubrics[0].id() == rubric_id("the cat is orange"));
}

TEST_CASE("seed output equals the set union of extracted statements") {
    // Half of all emitted statements repeat an earlier one.
    for (int trial = 0; trial < 5; ++trial) {
        Rng rng(900 + static_cast<std::uint64_t>(trial));
        ScriptedGenerator gen;
        const auto pairs = make_pairs(256);
        std::vector<std::string> emitted;
        int fresh = 0;
        for (const auto& p : pairs) {
            auto& list = gen.statements[p.id];
            const int n = 1 + static_cast<int>(rng.below(4));
            for (int k = 0; k < n; ++k) {
                std::string s;
                if (!emitted.empty() && rng.bernoulli(0.5)) {
                    s = emitted[rng.below(emitted.size())];
                } else {
                    s = "criterion number " + std::to_string(fresh++);
                }
                emitted.push_back(s);
                list.push_back(s);
            }
        }
        std::vector<std::string> expected;
        std::set<std::string> seen;
        for (const auto& s : emitted) {
            if (seen.insert(s).second) expected.push_back(s);
        }
        auto config = fast_config();
        config.max_parallel_requests = 3;
        const auto result = generate_seed_rubrics(pairs, gen, config);
        CHECK(texts_of(result.rubrics) == expected);
        CHECK(result.rubrics.size() == static_cast<std::size_t>(fresh));
        CHECK(gen.calls[Role::rule_merger] == static_cast<int>((emitted.size() + 199) / 200));
    }
}

TEST_CASE("per-pair statements are capped") {
    ScriptedGenerator gen;
    const auto pairs = make_pairs(1);
    for (int k = 0; k < 12; ++k) gen.statements[pairs[0].id].push_back("rule " + std::to_string(k));
    auto config = fast_config();
    config.max_rubrics_per_pair = 5;
    const auto result = generate_seed_rubrics(pairs, gen, config);
    CHECK(result.rubrics.size() == 5);
    CHECK(result.records[0].extracted_rubrics.size() == 5);
}

TEST_CASE("merging runs batch by batch") {
    ScriptedGenerator gen;
    const auto pairs = make_pairs(1);
    gen.statements[pairs[0].id] = {"a1", "a2", "a3", "a4", "a5"};
    std::vector<std::size_t> batch_sizes;
    gen.merger = [&](const std::vector<std::string>& in) {
        batch_sizes.push_back(in.size());
        return std::vector<std::string>{in.front()};
    };
    auto config = fast_config();
    config.merge_batch_size = 2;
    const auto result = generate_seed_rubrics(pairs, gen, config);
    CHECK(batch_sizes == std::vector<std::size_t>{2, 2, 1});
    CHECK(texts_of(result.rubrics) == std::vector<std::string>{"a1", "a3", "a5"});
    CHECK(result.records[0].accepted_ids.size() == 3);
}

TEST_CASE("seed generation with nothing extracted raises empty-pool") {
    ScriptedGenerator gen;
    try {
        generate_seed_rubrics(make_pairs(3), gen, fast_config());
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::empty_pool);
    }
}

TEST_CASE("refinement drops statements already in the working set") {
    ScriptedGenerator gen;
    const auto pair = make_pairs(1)[0];
    const std::vector<Rubric> working{Rubric::create("the cat is orange"), Rubric::create("the sky is clear")};
    const WeightedRubricSet retained({{working[0], 1.0}}, 2);
    gen.statements[pair.id] = {"The sky is clear.", "a dog sits by the door", "the lamp is on"};
    const auto result = propose_from_hard_pairs({pair}, retained, working, gen, fast_config(), 3);
    CHECK(texts_of(result.rubrics) == std::vector<std::string>{"a dog sits by the door", "the lamp is on"});
    for (const auto& r : result.rubrics) CHECK(r.origin() == Origin::refined(3));
    REQUIRE(result.records.size() == 1);
    CHECK(result.records[0].extracted_rubrics.size() == 3);
    CHECK(result.records[0].accepted_ids == ids_of(result.rubrics));
    CHECK(result.records[0].round == 3);

    // The diagnoser sees the retained rubrics and both images.
    const auto& diag = *std::find_if(gen.requests.begin(), gen.requests.end(),
                                     [](const auto& r) { return r.role == Role::failure_diagnoser; });
    CHECK(diag.rubric_texts == std::vector<std::string>{"the cat is orange"});
    CHECK(diag.image_refs == std::vector<std::string>{pair.image_a, pair.image_b});
    CHECK(diag.text.find("the cat is orange") != std::string::npos);
}

TEST_CASE("two novel statements and one duplicate yield two rubrics") {
    ScriptedGenerator gen;
    const auto pair = make_pairs(1)[0];
    const std::vector<Rubric> working{Rubric::create("existing rule")};
    const WeightedRubricSet retained({{working[0], 0.5}}, 0);
    gen.statements[pair.id] = {"novel one", "existing rule", "novel two"};
    CHECK(propose_from_hard_pair(pair, retained, working, gen, fast_config(), 1).size() == 2);
}

TEST_CASE("later drafts are deduplicated against earlier ones") {
    ScriptedGenerator gen;
    const auto pairs = make_pairs(3);
    gen.statements[pairs[0].id] = {"shared idea", "first only"};
    gen.statements[pairs[1].id] = {"shared idea", "second only"};
    gen.statements[pairs[2].id] = {"first only"};
    const WeightedRubricSet retained({}, 0);
    auto config = fast_config();
    config.max_parallel_requests = 3;
    const auto result = propose_from_hard_pairs(pairs, retained, {}, gen, config, 1);
    CHECK(texts_of(result.rubrics) == std::vector<std::string>{"shared idea", "first only", "second only"});
    REQUIRE(result.records.size() == 3);
    CHECK(result.records[1].accepted_ids.size() == 1);
    CHECK(result.records[2].accepted_ids.empty());
}

TEST_CASE("semantic dedup drops near paraphrases") {
    std::map<std::string, std::vector<double>> vectors{
        {"a red car", {1.0, 0.0}},
        {"a crimson automobile", {0.95, std::sqrt(1.0 - 0.95 * 0.95)}},
        {"a car that is somewhat red", {0.85, std::sqrt(1.0 - 0.85 * 0.85)}},
    };
    DedupOptions options;
    options.semantic.enabled = true;
    options.semantic.threshold = 0.9;
    options.embed = [&](const std::string& text) { return vectors.at(text); };
    const std::vector<Rubric> pool{Rubric::create("a red car")};
    const auto kept = dedup({Rubric::create("a crimson automobile"), Rubric::create("a car that is somewhat red")},
                            pool, options);
    CHECK(texts_of(kept) == std::vector<std::string>{"a car that is somewhat red"});

    options.embed = nullptr;
    CHECK_THROWS_AS(dedup(kept, pool, options), Error);
}

TEST_CASE("dedup keeps exact duplicates out without semantic matching") {
    const auto a = Rubric::create("rule a");
    const auto b = Rubric::create("rule b");
    CHECK(ids_of(dedup({a, b, a, Rubric::create("RULE B.")}, {})) == ids_of({a, b}));
    CHECK(dedup({a}, {a}).empty());
}

TEST_CASE("a failing backend leaves earlier results in the failure") {
    ScriptedGenerator gen;
    const auto pairs = make_pairs(3);
    gen.statements[pairs[0].id] = {"kept rule"};
    gen.statements[pairs[2].id] = {"never reached"};
    gen.fail_on_pair = pairs[1].id;
    const WeightedRubricSet retained({}, 0);
    try {
        propose_from_hard_pairs(pairs, retained, {}, gen, fast_config(), 2);
        FAIL("expected a failure");
    } catch (const ProposalFailure& e) {
        CHECK(e.code() == ErrorCode::proposal_failure);
        CHECK(texts_of(e.partial()) == std::vector<std::string>{"kept rule"});
        REQUIRE(e.records().size() == 1);
        CHECK(e.records()[0].source_pair_id == pairs[0].id);
    }
    try {
        generate_seed_rubrics(pairs, gen, fast_config());
        FAIL("expected a failure");
    } catch (const ProposalFailure& e) {
        CHECK(texts_of(e.partial()) == std::vector<std::string>{"kept rule"});
    }
}

TEST_CASE("parallel drafting matches serial drafting") {
    const auto pairs = make_pairs(40);
    Rng rng(5);
    std::map<std::string, std::vector<std::string>> script;
    for (const auto& p : pairs) {
        for (int k = 0; k < 3; ++k) script[p.id].push_back("idea " + std::to_string(rng.below(30)));
    }
    const WeightedRubricSet retained({}, 0);
    ScriptedGenerator serial_gen, parallel_gen;
    serial_gen.statements = parallel_gen.statements = script;
    auto config = fast_config();
    const auto serial = propose_from_hard_pairs(pairs, retained, {}, serial_gen, config, 4);
    config.max_parallel_requests = 4;
    const auto parallel = propose_from_hard_pairs(pairs, retained, {}, parallel_gen, config, 4);
    CHECK(ids_of(serial.rubrics) == ids_of(parallel.rubrics));
    CHECK(serial.records == parallel.records);
}

TEST_CASE("proposal records round-trip through JSON") {
    const ProposalRecord rec{"p1", Stage::refinement, 3, "diag", {"x", "y"}, {rubric_id("x")}};
    CHECK(json(rec).get<ProposalRecord>() == rec);
    const ProposalRecord seed{"p2", Stage::seed, 0, "", {"z"}, {}};
    CHECK(json(seed).get<ProposalRecord>() == seed);
}

TEST_CASE("proposer config validates and round-trips") {
    ProposerConfig c;
    c.temperature = 0.3;
    c.semantic_dedup.enabled = true;
    c.merge_batch_size = 17;
    const auto back = json(c).get<ProposerConfig>();
    CHECK(json(back) == json(c));
    c.max_rubrics_per_pair = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = ProposerConfig{};
    c.rule_merger_template = "/nonexistent/template.txt";
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("built-in templates carry their placeholders") {
    const ProposerConfig c;
    CHECK(template_for(c, Role::vision_reasoner).find("{preferred}") != std::string::npos);
    CHECK(template_for(c, Role::rule_extractor).find("{diagnosis}") != std::string::npos);
    CHECK(template_for(c, Role::rule_merger).find("{rubrics}") != std::string::npos);
    CHECK(template_for(c, Role::failure_diagnoser).find("{rubrics}") != std::string::npos);
}

TEST_CASE("remote generator request body") {
    ProposerConfig c;
    c.model_name = "test-model";
    RemoteGenerator gen(c);
    GenerationRequest req;
    req.text = "describe";
    req.image_refs = {"https://example.com/a.png"};
    const auto body = gen.request_body(req);
    CHECK(body["model"] == "test-model");
    CHECK(body["temperature"].get<double>() == doctest::Approx(0.1));
    CHECK(body["max_tokens"] == 4096);
    CHECK(body["extra_body"]["google"]["thinking_config"]["thinking_budget"] == 1024);
    const auto& content = body["messages"][0]["content"];
    CHECK(content.dump().find("https://example.com/a.png") != std::string::npos);

    c.thinking_budget = 0;
    CHECK_FALSE(RemoteGenerator(c).request_body(req).contains("extra_body"));
    c.thinking_budget = 64;
    c.thinking_budget_path = "/reasoning/budget";
    CHECK(RemoteGenerator(c).request_body(req)["reasoning"]["budget"] == 64);
}

TEST_CASE("remote generator drives seed generation over HTTP with retries") {
    FakeEndpoint server;
    server.reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "```\n- the cat is orange\n```"}}}}}}};
    server.failures = 2;
    auto c = fast_config();
    c.endpoint_url = server.url();
    RemoteGenerator gen(c);
    auto pairs = make_pairs(1);
    pairs[0].image_a = "https://example.com/a.png";
    pairs[0].image_b = "https://example.com/b.png";
    const auto result = generate_seed_rubrics(pairs, gen, c);
    CHECK(texts_of(result.rubrics) == std::vector<std::string>{"the cat is orange"});
    CHECK(server.hits == 5);

    server.reply = {{"choices", json::array()}};
    try {
        gen.generate(GenerationRequest{});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::proposal_failure);
    }
}
