#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "autorubric/pipeline.hpp"
#include "autorubric/text.hpp"

namespace fs = std::filesystem;

namespace autorubric::cli {

int exit_code_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::config_error:
    case ErrorCode::config_drift: return exit_config;
    case ErrorCode::transport_failure:
    case ErrorCode::judge_unavailable:
    case ErrorCode::judge_indeterminate:
    case ErrorCode::incomplete_scores:
    case ErrorCode::proposal_failure: return exit_backend;
    case ErrorCode::empty_pool:
    case ErrorCode::empty_working_set: return exit_empty;
    default: return exit_failure;
    }
}

namespace {

using pipeline::PipelineConfig;

struct GlobalOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    int verbose = 0;
    bool quiet = false;
};

// Routes library logging to the caller's error stream for the duration of a command.
class LogScope {
public:
    LogScope(std::ostream& err, spdlog::level::level_enum level) : previous_(spdlog::default_logger()) {
        auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
        sink->set_pattern("%l: %v");
        auto logger = std::make_shared<spdlog::logger>("autorubric-cli", sink);
        logger->set_level(level);
        spdlog::set_default_logger(logger);
    }
    ~LogScope() { spdlog::set_default_logger(previous_); }

private:
    std::shared_ptr<spdlog::logger> previous_;
};

json parse_override_value(const std::string& text) {
    const auto parsed = json::parse(text, nullptr, false);
    return parsed.is_discarded() ? json(text) : parsed;
}

PipelineConfig load_config(const GlobalOptions& g) {
    try {
        json resolved = PipelineConfig{};
        if (!g.config_path.empty()) {
            const auto doc = json::parse(read_file(g.config_path), nullptr, false);
            if (doc.is_discarded() || !doc.is_object()) {
                throw Error(ErrorCode::config_error, g.config_path + ": not a JSON object");
            }
            resolved = doc.get<PipelineConfig>();
        }
        for (const auto& o : g.overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos || eq == 0) {
                throw Error(ErrorCode::config_error, "override '" + o + "' is not key=value");
            }
            std::string pointer = "/" + o.substr(0, eq);
            std::replace(pointer.begin(), pointer.end(), '.', '/');
            const json::json_pointer ptr(pointer);
            if (!resolved.contains(ptr)) throw Error(ErrorCode::config_error, "unknown config key " + o.substr(0, eq));
            resolved[ptr] = parse_override_value(o.substr(eq + 1));
        }
        auto config = resolved.get<PipelineConfig>();
        if (g.seed) {
            config.rng_seed = *g.seed;
            config.seed_selection.rng_seed = *g.seed;
        }
        config.validate();
        return config;
    } catch (const Error& e) {
        if (e.code() == ErrorCode::io_error) throw Error(ErrorCode::config_error, e.detail());
        throw;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::config_error, std::string("config: ") + e.what());
    }
}

std::string round_header() {
    return fmt::format("{:>5}  {:>7}  {:>8}  {:>9}  {:>9}  {:>11}\n", "round", "working", "retained", "train_acc",
                       "valid_acc", "best_so_far");
}

std::string round_row(const pipeline::MetricsRow& m) {
    return fmt::format("{:>5}  {:>7}  {:>8}  {:>9.4f}  {:>9.4f}  {:>11.4f}\n", m.round, m.working_set_size,
                       m.retained_size, m.train_accuracy, m.validation_accuracy, m.best_validation_accuracy);
}

int finish_run(const pipeline::RunArtifacts& art, const PipelineConfig& config, std::ostream& out,
               std::ostream& err) {
    if (art.best_set.size() == 0) {
        err << "error: no rubric survived selection; best set is empty\n";
        return exit_empty;
    }
    out << fmt::format("best round {}: validation accuracy {:.4f}, {} rubrics -> {}\n", art.best_round,
                       art.best_accuracy, art.best_set.size(),
                       (fs::path(config.run_dir) / "rubric_set.json").string());
    return exit_ok;
}

pipeline::RunOptions table_options(std::ostream& out) {
    pipeline::RunOptions options;
    options.on_round = [&out](const pipeline::MetricsRow& m) { out << round_row(m) << std::flush; };
    return options;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_atomic(path, text);
}

// ---------------------------------------------------------------------------

struct SeedSelectArgs {
    std::string pairs, embeddings, margins, out, report;
    std::optional<int> m, k;
};

int cmd_seed_select(const PipelineConfig& base, const SeedSelectArgs& a, std::ostream& out) {
    auto config = base.seed_selection;
    if (a.m) config.target_count = *a.m;
    if (a.k) config.num_clusters = *a.k;
    config.validate();
    const auto pairs = pipeline::read_pairs(a.pairs);
    const auto selection =
        seedsel::select_seed_pairs(pairs, seedsel::read_embeddings(a.embeddings), seedsel::read_margins(a.margins), config);

    std::map<std::string, const PreferencePair*> by_id;
    for (const auto& p : pairs) by_id[p.id] = &p;
    std::map<std::string, int> cluster_of;
    for (std::size_t i = 0; i < selection.pair_ids.size(); ++i) {
        cluster_of[selection.pair_ids[i]] = selection.clustering.labels[i];
    }
    const auto margins = seedsel::read_margins(a.margins);

    std::vector<PreferencePair> chosen;
    json rows = json::array();
    for (const auto& id : selection.selected) {
        chosen.push_back(*by_id.at(id));
        rows.push_back({{"pair_id", id}, {"cluster", cluster_of.at(id)}, {"margin", margins.at(id)}});
        out << id << "\n";
    }
    std::vector<int> sizes(static_cast<std::size_t>(selection.clustering.k), 0);
    for (int label : selection.clustering.labels) ++sizes[static_cast<std::size_t>(label)];

    const json report{{"format_version", pipeline::kFormatVersion},
                      {"seed_selection", config},
                      {"implementation_defaults", {{"seed_selection.num_clusters", config.num_clusters}}},
                      {"inputs", {{"pairs", a.pairs}, {"embeddings", a.embeddings}, {"margins", a.margins}}},
                      {"input_pairs", pairs.size()},
                      {"effective_clusters", selection.clustering.k},
                      {"kmeans_iterations", selection.clustering.iterations},
                      {"cluster_sizes", sizes},
                      {"selected", rows}};
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    pipeline::write_pairs(a.out, chosen);
    write_text(a.report.empty() ? a.out + ".report.json" : a.report, report.dump(2) + "\n");
    return exit_ok;
}

struct SeedRubricsArgs {
    std::string pairs, out, records;
};

int cmd_seed_rubrics(const PipelineConfig& config, const SeedRubricsArgs& a, std::ostream& out) {
    const auto pairs = pipeline::read_pairs(a.pairs);
    auto backends = pipeline::make_backends(config);
    const auto result = proposer::generate_seed_rubrics(pairs, *backends.generator, config.proposer, backends.dedup);
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    pipeline::write_rubrics(a.out, result.rubrics);
    if (!a.records.empty()) {
        std::string text;
        for (const auto& r : result.records) text += json(r).dump() + "\n";
        write_text(a.records, text);
    }
    out << fmt::format("{} seed rubrics from {} pairs -> {}\n", result.rubrics.size(), pairs.size(), a.out);
    return exit_ok;
}

struct RefineArgs {
    std::string train, valid, seeds;
};

int cmd_refine(const PipelineConfig& config, const RefineArgs& a, std::ostream& out, std::ostream& err) {
    const auto train = pipeline::read_pairs(a.train);
    const auto valid = pipeline::read_pairs(a.valid);
    const auto seeds = pipeline::read_rubrics(a.seeds);
    pipeline::Pipeline p(config, pipeline::make_backends(config));
    out << round_header();
    const auto art = p.run(train, valid, seeds, table_options(out));
    return finish_run(art, config, out, err);
}

int cmd_resume(const PipelineConfig& config, std::ostream& out, std::ostream& err) {
    pipeline::Pipeline p(config, pipeline::make_backends(config));
    out << round_header();
    const auto art = p.resume(table_options(out));
    return finish_run(art, config, out, err);
}

int cmd_synth_run(PipelineConfig config, std::ostream& out, std::ostream& err) {
    config.backend.kind = pipeline::BackendKind::synth;
    out << round_header();
    const auto run = pipeline::run_synthetic(config, table_options(out));
    int planted = 0;
    for (const auto& id : run.artifacts.best_set.ids()) planted += run.world.is_planted(id);
    out << fmt::format("planted rubrics in best set: {}/{}\n", planted, run.world.planted().size());
    return finish_run(run.artifacts, config, out, err);
}

struct EvaluateArgs {
    std::string rubric_set, pairs, json_out;
};

int cmd_evaluate(const PipelineConfig& config, const EvaluateArgs& a, std::ostream& out) {
    const auto set = pipeline::read_rubric_set(a.rubric_set);
    const auto pairs = pipeline::read_pairs(a.pairs);
    pipeline::Pipeline p(config, pipeline::make_backends(config));
    const auto report = p.evaluate_set(set, pairs);
    const auto& e = report.evaluation;
    out << fmt::format("pairs {}  wins {}  ties {}  losses {}\n", pairs.size(), e.wins, e.ties, e.losses);
    out << fmt::format("strict accuracy {:.4f}\ntie-adjusted accuracy {:.4f}\n", e.strict_accuracy,
                       e.tie_adjusted_accuracy);
    if (!report.rubrics.empty()) out << fmt::format("{:>10}  {:>10}  {}\n", "weight", "mean_delta", "rubric");
    json rows = json::array();
    for (const auto& r : report.rubrics) {
        out << fmt::format("{:>10.4f}  {:>10.4f}  {}\n", r.weight, r.mean_delta, r.text);
        rows.push_back({{"id", r.id}, {"text", r.text}, {"weight", r.weight}, {"mean_delta", r.mean_delta}});
    }
    if (!a.json_out.empty()) {
        const json doc{{"pairs", pairs.size()},
                       {"wins", e.wins},
                       {"ties", e.ties},
                       {"losses", e.losses},
                       {"strict_accuracy", e.strict_accuracy},
                       {"tie_adjusted_accuracy", e.tie_adjusted_accuracy},
                       {"rubrics", rows}};
        write_text(a.json_out, doc.dump(2) + "\n");
    }
    return exit_ok;
}

struct ScoreArgs {
    std::string rubric_set, prompt, image;
};

int cmd_score(const PipelineConfig& config, const ScoreArgs& a, std::ostream& out) {
    const auto set = pipeline::read_rubric_set(a.rubric_set);
    std::vector<double> scores;
    if (set.size() > 0) {
        auto backends = pipeline::make_backends(config);
        const auto cache_path = config.resolved_cache_path();
        if (cache_path.has_parent_path()) fs::create_directories(cache_path.parent_path());
        judge::Judge j(backends.judge, config.judge, std::make_shared<judge::ScoreCache>(cache_path));
        const auto key = "score:" + sha256_hex(a.prompt + "\n" + a.image).substr(0, 16);
        for (const auto& e : set.entries()) {
            scores.push_back(j.score({e.rubric.id(), e.rubric.text(), a.prompt, a.image, Side::a, "default", key}));
        }
    }
    selection::RubricScores by_id;
    for (std::size_t i = 0; i < scores.size(); ++i) by_id[set.entries()[i].rubric.id()] = scores[i];
    out << fmt::format("reward {}\n", selection::reward(set, by_id));
    if (set.size() > 0) out << fmt::format("{:>22}  {:>22}  {:>22}  {}\n", "weight", "score", "contribution", "rubric");
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& e = set.entries()[i];
        out << fmt::format("{:>22}  {:>22}  {:>22}  {}\n", e.weight, scores[i], e.weight * scores[i], e.rubric.text());
    }
    return exit_ok;
}

struct InspectArgs {
    std::string run_dir, rubric_set;
    std::optional<int> round;
};

void print_set(const WeightedRubricSet& set, std::ostream& out) {
    out << fmt::format("{:>10}  {:<8}  {}\n", "weight", "origin", "rubric");
    for (const auto& e : set.entries()) {
        const auto& o = e.rubric.origin();
        const auto origin = o.kind == OriginKind::seed ? std::string("seed") : "round " + std::to_string(o.round);
        out << fmt::format("{:>10.4f}  {:<8}  {}\n", e.weight, origin, e.rubric.text());
    }
}

int cmd_inspect(const PipelineConfig& config, const InspectArgs& a, std::ostream& out) {
    if (!a.rubric_set.empty()) {
        const auto set = pipeline::read_rubric_set(a.rubric_set);
        out << fmt::format("{} rubrics, round {}", set.size(), set.round());
        if (set.validation_accuracy()) out << fmt::format(", validation accuracy {:.4f}", *set.validation_accuracy());
        out << "\n";
        print_set(set, out);
        return exit_ok;
    }
    const fs::path dir = a.run_dir.empty() ? fs::path(config.run_dir) : fs::path(a.run_dir);
    const auto manifest_text = read_file(dir / "manifest.json");
    const auto manifest = json::parse(manifest_text, nullptr, false);
    if (manifest.is_discarded()) throw Error(ErrorCode::corrupt_checkpoint, (dir / "manifest.json").string() + " is unreadable");

    if (a.round) {
        const auto doc = json::parse(read_file(pipeline::round_file(dir, *a.round)));
        const auto state = doc.at("state").get<RoundState>();
        out << fmt::format("round {}: working set {}, retained {}, train {:.4f}, valid {:.4f}\n", state.round,
                           state.working_set.size(), state.retained.size(), state.train_accuracy,
                           state.validation_accuracy);
        print_set(state.retained, out);
        out << fmt::format("mined pairs ({}):\n", state.mined_pair_ids.size());
        for (const auto& id : state.mined_pair_ids) out << "  " << id << "\n";
        out << fmt::format("proposed rubrics ({}):\n", state.proposed_rubric_ids.size());
        for (const auto& r : doc.at("proposed_rubrics")) out << "  " << r.at("text").get<std::string>() << "\n";
        return exit_ok;
    }

    out << "fingerprint " << manifest.at("fingerprint").get<std::string>() << "\n";
    out << "rng_seed " << manifest.at("rng_seed").dump() << "\n";
    const auto& d = manifest.at("dataset");
    out << fmt::format("train pairs {}, valid pairs {}, seed rubrics {}\n", d.at("train_pairs").get<int>(),
                       d.at("valid_pairs").get<int>(), d.at("seed_rubrics").get<int>());
    out << "implementation defaults:\n";
    for (const auto& [key, value] : manifest.at("implementation_defaults").items()) out << "  " << key << " = " << value.dump() << "\n";
    out << round_header();
    if (fs::exists(dir / "metrics.ndjson")) {
        for (const auto& rec : read_ndjson(dir / "metrics.ndjson")) out << round_row(rec.get<pipeline::MetricsRow>());
    }
    if (fs::exists(dir / "rubric_set.json")) {
        const auto set = pipeline::read_rubric_set(dir / "rubric_set.json");
        out << fmt::format("final rubric set: {} rubrics from round {}\n", set.size(), set.round());
        print_set(set, out);
    } else {
        out << "run not finished: no rubric_set.json\n";
    }
    return exit_ok;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Learn weighted natural-language rubrics from pairwise image preferences."};
    app.name("autorubric");
    app.require_subcommand(1, 1);

    GlobalOptions g;
    app.add_option("-c,--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--set", g.overrides, "Override a config key, e.g. --set retention.top_n=10")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    app.add_option("--seed", g.seed, "Override rng_seed (default 42)");
    app.add_flag("-v,--verbose", g.verbose, "More logging; repeat for debug output");
    app.add_flag("-q,--quiet", g.quiet, "Only log errors");

    SeedSelectArgs ss;
    auto* seed_select = app.add_subcommand("seed-select", "Pick diverse, high-margin seed pairs");
    seed_select->add_option("--pairs", ss.pairs, "Candidate pairs (NDJSON)")->required()->check(CLI::ExistingFile);
    seed_select->add_option("--embeddings", ss.embeddings, "Prompt embeddings (NDJSON)")->required()->check(CLI::ExistingFile);
    seed_select->add_option("--margins", ss.margins, "Pair margins (NDJSON)")->required()->check(CLI::ExistingFile);
    seed_select->add_option("-o,--out", ss.out, "Selected pairs (NDJSON)")->required();
    seed_select->add_option("--report", ss.report, "Selection report (default <out>.report.json)");
    seed_select->add_option("-m", ss.m, "Number of pairs to select");
    seed_select->add_option("-k", ss.k, "Number of prompt clusters");

    SeedRubricsArgs sr;
    auto* seed_rubrics = app.add_subcommand("seed-rubrics", "Propose the seed rubric set from seed pairs");
    seed_rubrics->add_option("--pairs", sr.pairs, "Seed pairs (NDJSON)")->required()->check(CLI::ExistingFile);
    seed_rubrics->add_option("-o,--out", sr.out, "Rubric file (JSON)")->required();
    seed_rubrics->add_option("--records", sr.records, "Proposal records (NDJSON)");

    RefineArgs rf;
    auto* refine = app.add_subcommand("refine", "Run the refinement loop into run_dir");
    refine->add_option("--train", rf.train, "Train pairs (NDJSON)")->required()->check(CLI::ExistingFile);
    refine->add_option("--valid", rf.valid, "Validation pairs (NDJSON)")->required()->check(CLI::ExistingFile);
    refine->add_option("--seeds", rf.seeds, "Seed rubrics (JSON)")->required()->check(CLI::ExistingFile);

    auto* resume = app.add_subcommand("resume", "Continue the run in run_dir from its last checkpoint");

    EvaluateArgs ev;
    auto* evaluate = app.add_subcommand("evaluate", "Accuracy of a rubric set on labelled pairs");
    evaluate->add_option("--rubric-set", ev.rubric_set, "Rubric set (JSON)")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--pairs", ev.pairs, "Pairs (NDJSON)")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--json", ev.json_out, "Also write the report as JSON");

    ScoreArgs sc;
    auto* score = app.add_subcommand("score", "Reward of one image with a per-rubric breakdown");
    score->add_option("--rubric-set", sc.rubric_set, "Rubric set (JSON)")->required()->check(CLI::ExistingFile);
    score->add_option("--prompt", sc.prompt, "Generation prompt");
    score->add_option("--image", sc.image, "Image path or URL")->required();

    auto* synth_run = app.add_subcommand("synth-run", "Seed and refine against the planted synthetic world");

    InspectArgs in;
    auto* inspect = app.add_subcommand("inspect", "Summarize a run directory or a rubric set");
    inspect->add_option("--run-dir", in.run_dir, "Run directory (default: config run_dir)");
    inspect->add_option("--rubric-set", in.rubric_set, "Rubric set (JSON)")->check(CLI::ExistingFile);
    inspect->add_option("--round", in.round, "Show one round checkpoint");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_config;
    }

    auto level = spdlog::level::warn;
    if (g.quiet) level = spdlog::level::err;
    if (g.verbose == 1) level = spdlog::level::info;
    if (g.verbose > 1) level = spdlog::level::debug;
    LogScope log(err, level);

    try {
        const auto config = load_config(g);
        if (seed_select->parsed()) return cmd_seed_select(config, ss, out);
        if (seed_rubrics->parsed()) return cmd_seed_rubrics(config, sr, out);
        if (refine->parsed()) return cmd_refine(config, rf, out, err);
        if (resume->parsed()) return cmd_resume(config, out, err);
        if (evaluate->parsed()) return cmd_evaluate(config, ev, out);
        if (score->parsed()) return cmd_score(config, sc, out);
        if (synth_run->parsed()) return cmd_synth_run(config, out, err);
        if (inspect->parsed()) return cmd_inspect(config, in, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_failure;
    }
    return exit_failure;
}

} // namespace autorubric::cli
