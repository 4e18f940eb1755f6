#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "autorubric/pipeline.hpp"
#include "autorubric/text.hpp"
#include "cli.hpp"
#include "fake_endpoint.hpp"

using namespace autorubric;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "autorubric_test_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

Result invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "autorubric");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out;
    std::ostringstream err;
    Result r;
    r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

// Data rows of the per-round table: lines whose first field is a round number.
std::vector<std::vector<double>> round_rows(const std::string& text) {
    std::vector<std::vector<double>> rows;
    for (const auto& line : lines(text)) {
        std::istringstream in(line);
        std::vector<double> fields;
        for (double v; in >> v;) fields.push_back(v);
        if (fields.size() == 6 && in.eof()) rows.push_back(fields);
    }
    return rows;
}

void write_set(const fs::path& path, const std::vector<std::pair<std::string, double>>& entries) {
    std::vector<WeightedRubric> e;
    for (const auto& [text, w] : entries) e.push_back({Rubric::create(text), w});
    write_file_atomic(path, pipeline::rubric_set_document(WeightedRubricSet(e, 0)).dump(2));
}

json logprob_reply(double p_yes) {
    const json top = json::array({{{"token", "Yes"}, {"logprob", std::log(p_yes)}},
                                  {{"token", "No"}, {"logprob", std::log(1.0 - p_yes)}}});
    return {{"choices",
             {{{"message", {{"role", "assistant"}, {"content", "Yes"}}},
               {"logprobs", {{"content", {{{"token", "Yes"}, {"logprob", std::log(p_yes)}, {"top_logprobs", top}}}}}}}}}};
}

// Seed-selection inputs: n pairs, 2-d embeddings in two groups, margins i/n.
void write_seed_inputs(const fs::path& dir, int n, const std::string& skip_margin = "") {
    std::string pairs, emb, margins;
    for (int i = 0; i < n; ++i) {
        const auto id = "p" + std::to_string(100 + i);
        pairs += json(PreferencePair{id, "prompt " + id, id + "/a.png", id + "/b.png", Label::prefer_a, 0}).dump() + "\n";
        emb += json{{"pair_id", id}, {"vector", {i % 2 ? 10.0 + i * 0.01 : -10.0 - i * 0.01, 1.0}}}.dump() + "\n";
        if (id != skip_margin) margins += json{{"pair_id", id}, {"margin", static_cast<double>(i) / n}}.dump() + "\n";
    }
    write_file_atomic(dir / "pairs.ndjson", pairs);
    write_file_atomic(dir / "emb.ndjson", emb);
    write_file_atomic(dir / "margins.ndjson", margins);
}

std::vector<std::string> seed_select_args(const fs::path& dir, const std::string& out) {
    return {"seed-select", "--pairs", (dir / "pairs.ndjson").string(), "--embeddings", (dir / "emb.ndjson").string(),
            "--margins", (dir / "margins.ndjson").string(), "--out", (dir / out).string()};
}

} // namespace

TEST_CASE("synth-run with one round prints exactly one row") {
    const auto dir = scratch("r1");
    const auto r = invoke({"synth-run", "--set", "rounds=1", "--set", "run_dir=" + (dir / "run").string()});
    CHECK(r.code == cli::exit_ok);
    const auto rows = round_rows(r.out);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0][0] == 0);
    CHECK(r.out.find("round  working  retained  train_acc  valid_acc  best_so_far") != std::string::npos);
    CHECK(fs::exists(dir / "run" / "rubric_set.json"));
}

TEST_CASE("synth-run prints a monotone best-so-far column and is idempotent") {
    const auto dir = scratch("monotone");
    const std::vector<std::string> args{"synth-run", "--set", "rounds=5", "--set", "run_dir=" + (dir / "run").string()};
    const auto first = invoke(args);
    REQUIRE(first.code == cli::exit_ok);
    const auto rows = round_rows(first.out);
    REQUIRE(rows.size() == 5);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i][0] == static_cast<double>(i));
        CHECK(rows[i][5] >= rows[i][4] - 1e-12);
        if (i > 0) CHECK(rows[i][5] >= rows[i - 1][5]);
    }
    const auto set_bytes = read_file(dir / "run" / "rubric_set.json");
    const auto second = invoke(args);
    CHECK(second.out == first.out);
    CHECK(read_file(dir / "run" / "rubric_set.json") == set_bytes);
}

TEST_CASE("config overrides must name existing keys") {
    const auto dir = scratch("overrides");
    CHECK(invoke({"synth-run", "--set", "retention.top_m=3"}).code == cli::exit_config);
    CHECK(invoke({"synth-run", "--set", "rounds"}).code == cli::exit_config);
    CHECK(invoke({"synth-run", "--set", "rounds=\"ten\""}).code == cli::exit_config);
    CHECK(invoke({"synth-run", "--set", "rounds=0"}).code == cli::exit_config);
    CHECK(invoke({"inspect", "--config", (dir / "missing.json").string()}).code == cli::exit_config);
    write_file_atomic(dir / "bad.json", json{{"rounds", 2},
                                             {"run_dir", (dir / "bad_run").string()},
                                             {"retention", {{"top_n", 5}, {"colour", 1}}}}
                                            .dump());
    CHECK(invoke({"synth-run", "--config", (dir / "bad.json").string()}).code == cli::exit_config);
    CHECK(invoke({}).code == cli::exit_config);
    CHECK(invoke({"--help"}).code == cli::exit_ok);

    write_file_atomic(dir / "good.json", json{{"rounds", 2}, {"run_dir", (dir / "run").string()}}.dump());
    const auto r = invoke({"synth-run", "--config", (dir / "good.json").string(), "--set", "retention.top_n=7", "--seed", "5"});
    REQUIRE(r.code == cli::exit_ok);
    const auto manifest = json::parse(read_file(dir / "run" / "manifest.json"));
    CHECK(manifest.at("config").at("rounds") == 2);
    CHECK(manifest.at("config").at("retention").at("top_n") == 7);
    CHECK(manifest.at("rng_seed") == 5);
    CHECK(round_rows(r.out).size() == 2);
}

TEST_CASE("seed-select: report defaults, oversized m, byte-identical reruns") {
    const auto dir = scratch("seedsel");
    write_seed_inputs(dir, 40);
    const auto r = invoke(seed_select_args(dir, "sel.ndjson"));
    REQUIRE(r.code == cli::exit_ok);
    CHECK(lines(r.out).size() == 40);
    CHECK(pipeline::read_pairs(dir / "sel.ndjson").size() == 40);
    CHECK(r.err.find("warn") != std::string::npos);
    const auto report = json::parse(read_file(dir / "sel.ndjson.report.json"));
    CHECK(report.at("seed_selection").at("target_count") == 256);
    CHECK(report.at("seed_selection").at("num_clusters") == 16);
    CHECK(report.at("implementation_defaults").contains("seed_selection.num_clusters"));

    const auto first = read_file(dir / "sel.ndjson");
    const auto first_report = read_file(dir / "sel.ndjson.report.json");
    const auto again = invoke(seed_select_args(dir, "sel.ndjson"));
    CHECK(again.out == r.out);
    CHECK(read_file(dir / "sel.ndjson") == first);
    CHECK(read_file(dir / "sel.ndjson.report.json") == first_report);

    auto small = seed_select_args(dir, "small.ndjson");
    small.insert(small.end(), {"-m", "6", "-k", "2"});
    const auto s = invoke(small);
    REQUIRE(s.code == cli::exit_ok);
    // Two clusters of odd and even indices, highest margins first, alternating.
    const auto picked = lines(s.out);
    REQUIRE(picked.size() == 6);
    for (std::size_t i = 0; i < 6; i += 2) {
        std::set<std::string> round{picked[i], picked[i + 1]};
        const int hi = 139 - static_cast<int>(i);
        CHECK(round == std::set<std::string>{"p" + std::to_string(hi), "p" + std::to_string(hi - 1)});
    }
}

TEST_CASE("seed-select lists every missing record and fails") {
    const auto dir = scratch("seedsel_missing");
    write_seed_inputs(dir, 10, "p103");
    const auto r = invoke(seed_select_args(dir, "sel.ndjson"));
    CHECK(r.code == cli::exit_failure);
    CHECK(r.err.find("p103: no margin record") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "sel.ndjson"));
}

TEST_CASE("score: empty set, single rubric, and breakdown arithmetic") {
    const auto dir = scratch("score");
    write_set(dir / "empty.json", {});
    const auto empty = invoke({"score", "--rubric-set", (dir / "empty.json").string(), "--image", "x.png"});
    CHECK(empty.code == cli::exit_ok);
    CHECK(empty.out == "reward 0\n");

    FakeEndpoint endpoint;
    endpoint.reply = logprob_reply(0.7);
    std::ofstream(dir / "img.png", std::ios::binary) << "PNGDATA";
    write_set(dir / "one.json", {{"the sky is blue", 1.0}});
    const auto one = invoke({"score", "--rubric-set", (dir / "one.json").string(), "--prompt", "a sky", "--image",
                          (dir / "img.png").string(), "--set", "judge.endpoint_url=" + endpoint.url(), "--set",
                          "cache_path=" + (dir / "cache.ndjson").string()});
    REQUIRE(one.code == cli::exit_ok);
    const auto first = lines(one.out).at(0);
    REQUIRE(first.rfind("reward ", 0) == 0);
    CHECK(std::stod(first.substr(7)) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(endpoint.hits == 1);

    write_set(dir / "three.json", {{"criterion one", 0.37}, {"criterion two", 1.91}, {"criterion three", 0.05}});
    const std::vector<std::string> args{"score", "--rubric-set", (dir / "three.json").string(), "--image",
                                        "synth://img/q", "--set", "backend.kind=\"synth\"", "--set",
                                        "cache_path=" + (dir / "synth_cache.ndjson").string()};
    const auto three = invoke(args);
    REQUIRE(three.code == cli::exit_ok);
    const auto rows = lines(three.out);
    REQUIRE(rows.size() == 5);
    const double total = std::stod(rows[0].substr(7));
    double sum = 0.0;
    for (std::size_t i = 2; i < rows.size(); ++i) {
        std::istringstream in(rows[i]);
        double w, s, c;
        in >> w >> s >> c;
        CHECK(c == doctest::Approx(w * s).epsilon(1e-15));
        sum += c;
    }
    CHECK(std::abs(sum - total) <= 1e-9);
    CHECK(invoke(args).out == three.out);
}

TEST_CASE("backend and empty-result failures have their own exit codes") {
    const auto dir = scratch("codes");
    FakeEndpoint endpoint;
    endpoint.failures = 1000;
    std::ofstream(dir / "img.png", std::ios::binary) << "PNGDATA";
    write_set(dir / "one.json", {{"the sky is blue", 1.0}});
    const auto down = invoke({"score", "--rubric-set", (dir / "one.json").string(), "--image", (dir / "img.png").string(),
                           "--set", "judge.endpoint_url=" + endpoint.url(), "--set", "judge.retry_budget=1", "--set",
                           "judge.backoff_initial_ms=1", "--set", "cache_path=" + (dir / "cache.ndjson").string()});
    CHECK(down.code == cli::exit_backend);

    // A world whose reasoner has nothing to say yields an empty seed pool.
    pipeline::write_pairs(dir / "pairs.ndjson", synth::make_world({}).train());
    const auto empty = invoke({"seed-rubrics", "--pairs", (dir / "pairs.ndjson").string(), "--out",
                            (dir / "seeds.json").string(), "--set", "backend.kind=\"synth\"", "--set",
                            "backend.world.num_seed_planted=0", "--set", "backend.world.distractors_per_proposal=0"});
    CHECK(empty.code == cli::exit_empty);
}

TEST_CASE("seed-rubrics, refine, evaluate, resume and inspect over files") {
    const auto dir = scratch("files");
    const auto world = synth::make_world({});
    pipeline::write_pairs(dir / "train.ndjson", world.train());
    pipeline::write_pairs(dir / "valid.ndjson", world.valid());
    const std::vector<std::string> common{"--set", "backend.kind=\"synth\"", "--set", "rounds=3", "--set",
                                          "run_dir=" + (dir / "run").string()};
    auto with = [&](std::vector<std::string> args) {
        args.insert(args.end(), common.begin(), common.end());
        return invoke(args);
    };

    const auto seeds = with({"seed-rubrics", "--pairs", (dir / "train.ndjson").string(), "--out",
                             (dir / "seeds.json").string(), "--records", (dir / "records.ndjson").string()});
    REQUIRE(seeds.code == cli::exit_ok);
    CHECK(pipeline::read_rubrics(dir / "seeds.json").size() > 10);
    CHECK(read_ndjson(dir / "records.ndjson").size() == 256);

    const auto refine = with({"refine", "--train", (dir / "train.ndjson").string(), "--valid",
                              (dir / "valid.ndjson").string(), "--seeds", (dir / "seeds.json").string()});
    REQUIRE(refine.code == cli::exit_ok);
    CHECK(round_rows(refine.out).size() == 3);
    const auto set_path = (dir / "run" / "rubric_set.json").string();
    const auto set = pipeline::read_rubric_set(set_path);

    // Refining from the CLI matches the synthetic preset, which seeds the same way.
    const auto preset = invoke({"synth-run", "--set", "rounds=3", "--set", "run_dir=" + (dir / "preset").string()});
    REQUIRE(preset.code == cli::exit_ok);
    CHECK(read_file(dir / "preset" / "rubric_set.json") == read_file(set_path));

    const auto eval = with({"evaluate", "--rubric-set", set_path, "--pairs", (dir / "valid.ndjson").string(), "--json",
                            (dir / "eval.json").string()});
    REQUIRE(eval.code == cli::exit_ok);
    const auto report = json::parse(read_file(dir / "eval.json"));
    CHECK(report.at("strict_accuracy").get<double>() == *set.validation_accuracy());
    CHECK(report.at("rubrics").size() == set.size());
    CHECK(with({"evaluate", "--rubric-set", set_path, "--pairs", (dir / "valid.ndjson").string()}).out == eval.out);

    const auto resumed = with({"resume"});
    CHECK(resumed.code == cli::exit_ok);
    CHECK(round_rows(resumed.out).empty());
    CHECK(pipeline::read_rubric_set(set_path) == set);
    CHECK(with({"resume", "--set", "retention.top_n=5"}).code == cli::exit_config);

    const auto summary = with({"inspect"});
    REQUIRE(summary.code == cli::exit_ok);
    CHECK(summary.out.find("seed_selection.num_clusters = 16") != std::string::npos);
    CHECK(round_rows(summary.out).size() == 3);
    const auto round = with({"inspect", "--round", "1"});
    CHECK(round.code == cli::exit_ok);
    CHECK(round.out.rfind("round 1:", 0) == 0);
    const auto setview = invoke({"inspect", "--rubric-set", set_path});
    CHECK(setview.code == cli::exit_ok);
    CHECK(lines(setview.out).size() == set.size() + 2);
}
