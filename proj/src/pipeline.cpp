#include "autorubric/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <unordered_map>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "autorubric/random.hpp"
#include "autorubric/text.hpp"

namespace fs = std::filesystem;

namespace autorubric::pipeline {

namespace {

std::string method_name(solver::Method m) {
    return m == solver::Method::proximal_newton ? "proximal_newton" : "proximal_gradient";
}

solver::Method parse_method(const std::string& s) {
    if (s == "proximal_newton") return solver::Method::proximal_newton;
    if (s == "proximal_gradient") return solver::Method::proximal_gradient;
    throw Error(ErrorCode::config_error, "unknown solver method: " + s);
}

const char* kManifest = "manifest.json";
const char* kTrain = "train.ndjson";
const char* kValid = "valid.ndjson";
const char* kSeeds = "seed_rubrics.json";
const char* kMetrics = "metrics.ndjson";
const char* kRubricSet = "rubric_set.json";

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
            throw Error(ErrorCode::config_error, "unknown config key " + where + key);
        }
    }
}

// Every key in the input must exist in the canonical rendering of the parsed config.
void reject_unknown_keys(const json& input, const json& canonical, const std::string& where) {
    if (!input.is_object() || !canonical.is_object()) return;
    for (const auto& [key, value] : input.items()) {
        if (!canonical.contains(key)) throw Error(ErrorCode::config_error, "unknown config key " + where + key);
        reject_unknown_keys(value, canonical.at(key), where + key + ".");
    }
}

std::vector<Rubric> union_of(const std::vector<Rubric>& a, const std::vector<Rubric>& b) {
    std::vector<Rubric> out = a;
    std::unordered_set<std::string> seen;
    for (const auto& r : a) seen.insert(r.id());
    for (const auto& r : b) {
        if (seen.insert(r.id()).second) out.push_back(r);
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Config

void PipelineConfig::validate() const {
    if (rounds < 1) throw Error(ErrorCode::config_error, "rounds must be >= 1");
    if (!(solver.C > 0.0)) throw Error(ErrorCode::config_error, "solver C must be > 0");
    if (!(solver.tolerance > 0.0) || solver.max_iterations < 1) {
        throw Error(ErrorCode::config_error, "solver tolerance and max_iterations must be positive");
    }
    if (run_dir.empty()) throw Error(ErrorCode::config_error, "run_dir must not be empty");
    retention.validate();
    mining.validate();
    judge.validate();
    proposer.validate();
    seed_selection.validate();
    if (backend.kind == BackendKind::synth) backend.world.validate();
}

fs::path PipelineConfig::resolved_cache_path() const {
    return cache_path.empty() ? fs::path(run_dir) / "judge_cache.ndjson" : fs::path(cache_path);
}

void to_json(json& j, const PipelineConfig& c) {
    j = json{{"rounds", c.rounds},
             {"retention", c.retention},
             {"mining", c.mining},
             {"solver",
              {{"C", c.solver.C},
               {"tolerance", c.solver.tolerance},
               {"max_iterations", c.solver.max_iterations},
               {"method", method_name(c.solver.method)}}},
             {"judge", c.judge},
             {"proposer", c.proposer},
             {"seed_selection", c.seed_selection},
             {"rng_seed", c.rng_seed},
             {"backend",
              {{"kind", c.backend.kind == BackendKind::synth ? "synth" : "remote"}, {"world", c.backend.world}}},
             {"run_dir", c.run_dir},
             {"cache_path", c.cache_path}};
}

void from_json(const json& j, PipelineConfig& c) {
    require_keys(j,
                 {"rounds", "retention", "mining", "solver", "judge", "proposer", "seed_selection", "rng_seed",
                  "backend", "run_dir", "cache_path"},
                 "");
    c.rounds = j.value("rounds", c.rounds);
    if (j.contains("retention")) c.retention = j.at("retention").get<selection::RetentionConfig>();
    if (j.contains("mining")) c.mining = j.at("mining").get<mining::MiningConfig>();
    if (j.contains("solver")) {
        const auto& s = j.at("solver");
        require_keys(s, {"C", "tolerance", "max_iterations", "method"}, "solver.");
        c.solver.C = s.value("C", c.solver.C);
        c.solver.tolerance = s.value("tolerance", c.solver.tolerance);
        c.solver.max_iterations = s.value("max_iterations", c.solver.max_iterations);
        if (s.contains("method")) c.solver.method = parse_method(s.at("method").get<std::string>());
    }
    if (j.contains("judge")) c.judge = j.at("judge").get<judge::JudgeConfig>();
    if (j.contains("proposer")) c.proposer = j.at("proposer").get<proposer::ProposerConfig>();
    if (j.contains("seed_selection")) c.seed_selection = j.at("seed_selection").get<seedsel::SeedSelectConfig>();
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    if (j.contains("backend")) {
        const auto& b = j.at("backend");
        require_keys(b, {"kind", "world"}, "backend.");
        const auto kind = b.value("kind", std::string("remote"));
        if (kind == "synth") {
            c.backend.kind = BackendKind::synth;
        } else if (kind == "remote") {
            c.backend.kind = BackendKind::remote;
        } else {
            throw Error(ErrorCode::config_error, "backend.kind must be remote or synth");
        }
        if (b.contains("world")) c.backend.world = b.at("world").get<synth::WorldSpec>();
    }
    c.run_dir = j.value("run_dir", c.run_dir);
    c.cache_path = j.value("cache_path", c.cache_path);
    reject_unknown_keys(j, json(c), "");
    c.validate();
}

std::string fingerprint(const PipelineConfig& config) {
    json j = config;
    j.erase("run_dir");
    j.erase("cache_path");
    j["judge"].erase("max_parallel_requests");
    j["proposer"].erase("max_parallel_requests");
    return sha256_hex(j.dump());
}

std::vector<std::string> implementation_defaults() {
    return {"retention.mode",
            "solver.tolerance",
            "solver.max_iterations",
            "solver.method",
            "judge.top_logprobs",
            "judge.retry_budget",
            "judge.indeterminate_policy",
            "proposer.temperature",
            "proposer.thinking_budget",
            "proposer.max_rubrics_per_pair",
            "proposer.merge_batch_size",
            "proposer.semantic_dedup",
            "seed_selection.num_clusters"};
}

Backends make_backends(const PipelineConfig& config) {
    Backends b;
    if (config.backend.kind == BackendKind::synth) {
        const auto world = synth::make_world(config.backend.world);
        b.judge = world.judge();
        b.generator = world.generator();
    } else {
        b.judge = std::make_shared<judge::RemoteJudge>(config.judge);
        b.generator = std::make_shared<proposer::RemoteGenerator>(config.proposer);
    }
    b.dedup.semantic = config.proposer.semantic_dedup;
    return b;
}

void to_json(json& j, const MetricsRow& r) {
    j = json{{"round", r.round},
             {"working_set_size", r.working_set_size},
             {"retained_size", r.retained_size},
             {"train_accuracy", r.train_accuracy},
             {"train_tie_adjusted", r.train_tie_adjusted},
             {"validation_accuracy", r.validation_accuracy},
             {"validation_tie_adjusted", r.validation_tie_adjusted},
             {"best_validation_accuracy", r.best_validation_accuracy},
             {"best_round", r.best_round},
             {"mined", r.mined},
             {"proposed", r.proposed},
             {"solver_iterations", r.solver_iterations},
             {"kkt_residual", r.kkt_residual}};
}

void from_json(const json& j, MetricsRow& r) {
    r.round = j.at("round").get<int>();
    r.working_set_size = j.at("working_set_size").get<std::size_t>();
    r.retained_size = j.at("retained_size").get<std::size_t>();
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.train_tie_adjusted = j.at("train_tie_adjusted").get<double>();
    r.validation_accuracy = j.at("validation_accuracy").get<double>();
    r.validation_tie_adjusted = j.at("validation_tie_adjusted").get<double>();
    r.best_validation_accuracy = j.at("best_validation_accuracy").get<double>();
    r.best_round = j.at("best_round").get<int>();
    r.mined = j.at("mined").get<std::size_t>();
    r.proposed = j.at("proposed").get<std::size_t>();
    r.solver_iterations = j.at("solver_iterations").get<int>();
    r.kkt_residual = j.at("kkt_residual").get<double>();
}

// ---------------------------------------------------------------------------
// Files

std::vector<PreferencePair> read_pairs(const fs::path& path) {
    std::vector<PreferencePair> out;
    std::unordered_set<std::string> ids;
    for (const auto& rec : read_ndjson(path)) {
        auto pair = rec.get<PreferencePair>();
        if (!ids.insert(pair.id).second) {
            throw Error(ErrorCode::invalid_argument, path.string() + ": duplicate pair id " + pair.id);
        }
        out.push_back(std::move(pair));
    }
    return out;
}

void write_pairs(const fs::path& path, const std::vector<PreferencePair>& pairs) {
    std::string text;
    for (const auto& p : pairs) text += json(p).dump() + "\n";
    write_file_atomic(path, text);
}

std::vector<Rubric> read_rubrics(const fs::path& path) {
    const auto doc = json::parse(read_file(path), nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::invalid_argument, path.string() + ": not valid JSON");
    const auto& list = doc.is_array() ? doc : doc.at("rubrics");
    std::vector<Rubric> out;
    for (const auto& r : list) out.push_back(r.is_string() ? Rubric::create(r.get<std::string>()) : rubric_from_json(r));
    return out;
}

void write_rubrics(const fs::path& path, const std::vector<Rubric>& rubrics) {
    write_file_atomic(path, json{{"format_version", kFormatVersion}, {"rubrics", rubrics}}.dump(2) + "\n");
}

json rubric_set_document(const WeightedRubricSet& set) { return json(set); }

WeightedRubricSet read_rubric_set(const fs::path& path) {
    const auto doc = json::parse(read_file(path), nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::invalid_argument, path.string() + ": not valid JSON");
    return weighted_set_from_json(doc);
}

fs::path round_file(const fs::path& run_dir, int round) {
    char name[32];
    std::snprintf(name, sizeof name, "round_%03d.json", round);
    return run_dir / name;
}

// ---------------------------------------------------------------------------
// Pipeline

struct Pipeline::Progress {
    int next_round = 0;
    std::vector<Rubric> working_set;
    RunArtifacts artifacts;
};

Pipeline::Pipeline(PipelineConfig config, Backends backends)
    : config_(std::move(config)), backends_(std::move(backends)) {
    config_.validate();
    if (!backends_.judge || !backends_.generator) throw Error(ErrorCode::config_error, "pipeline backends are missing");
    fs::create_directories(config_.run_dir);
    const auto cache_path = config_.resolved_cache_path();
    if (cache_path.has_parent_path()) fs::create_directories(cache_path.parent_path());
    judge_ = std::make_unique<judge::Judge>(backends_.judge, config_.judge,
                                            std::make_shared<judge::ScoreCache>(cache_path));
}

RunArtifacts Pipeline::run(const std::vector<PreferencePair>& train, const std::vector<PreferencePair>& valid,
                           const std::vector<Rubric>& seed_rubrics, const RunOptions& options) {
    if (seed_rubrics.empty()) throw Error(ErrorCode::empty_working_set, "seed rubric set is empty");
    if (train.empty() || valid.empty()) throw Error(ErrorCode::invalid_argument, "train and valid pairs must be non-empty");
    std::unordered_set<std::string> train_ids;
    for (const auto& p : train) {
        if (!train_ids.insert(p.id).second) throw Error(ErrorCode::invalid_argument, "duplicate train pair id " + p.id);
    }
    for (const auto& p : valid) {
        if (train_ids.count(p.id)) throw Error(ErrorCode::invalid_argument, "pair " + p.id + " is in both train and valid");
    }

    const fs::path dir(config_.run_dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (name.rfind("round_", 0) == 0 || name == kRubricSet || name == kMetrics) fs::remove(entry.path());
    }
    json implementation = json::object();
    const json resolved = config_;
    for (const auto& key : implementation_defaults()) {
        std::string pointer = "/" + key;
        std::replace(pointer.begin(), pointer.end(), '.', '/');
        implementation[key] = resolved.at(json::json_pointer(pointer));
    }
    const json manifest{{"format_version", kFormatVersion},
                        {"fingerprint", fingerprint(config_)},
                        {"rng_seed", config_.rng_seed},
                        {"config", resolved},
                        {"dataset", {{"train_pairs", train.size()}, {"valid_pairs", valid.size()},
                                     {"seed_rubrics", seed_rubrics.size()}}},
                        {"implementation_defaults", implementation}};
    write_pairs(dir / kTrain, train);
    write_pairs(dir / kValid, valid);
    write_rubrics(dir / kSeeds, seed_rubrics);
    write_file_atomic(dir / kManifest, manifest.dump(2) + "\n");

    Progress progress;
    progress.working_set = union_of({}, seed_rubrics);
    return loop(train, valid, std::move(progress), options);
}

RunArtifacts Pipeline::resume(const RunOptions& options) {
    const fs::path dir(config_.run_dir);
    if (!fs::exists(dir / kManifest)) {
        throw Error(ErrorCode::corrupt_checkpoint, "no manifest in " + dir.string() + "; nothing to resume");
    }
    const auto manifest = json::parse(read_file(dir / kManifest), nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("fingerprint")) {
        throw Error(ErrorCode::corrupt_checkpoint, (dir / kManifest).string() + " is unreadable");
    }
    const auto expected = fingerprint(config_);
    if (manifest.at("fingerprint").get<std::string>() != expected) {
        throw Error(ErrorCode::config_drift, "config fingerprint differs from the one recorded in " +
                                                 (dir / kManifest).string() + "; refusing to resume");
    }
    const auto train = read_pairs(dir / kTrain);
    const auto valid = read_pairs(dir / kValid);
    const auto seeds = read_rubrics(dir / kSeeds);

    Progress progress;
    progress.working_set = union_of({}, seeds);
    auto& art = progress.artifacts;
    for (int t = 0; t < config_.rounds; ++t) {
        const auto path = round_file(dir, t);
        if (!fs::exists(path)) break;
        try {
            const auto doc = json::parse(read_file(path));
            if (doc.at("round").get<int>() != t || doc.at("fingerprint").get<std::string>() != expected) {
                throw Error(ErrorCode::corrupt_checkpoint, "round or fingerprint mismatch");
            }
            auto state = doc.at("state").get<RoundState>();
            state.check_invariants();
            if (state.working_set != progress.working_set) {
                throw Error(ErrorCode::corrupt_checkpoint, "working set does not follow from the previous round");
            }
            std::vector<Rubric> proposed;
            for (const auto& r : doc.at("proposed_rubrics")) proposed.push_back(rubric_from_json(r));
            auto proposals = doc.at("proposals").get<std::vector<proposer::ProposalRecord>>();
            const auto& best = doc.at("best");

            art.rounds.push_back(state);
            art.metrics.push_back(doc.at("metrics").get<MetricsRow>());
            art.proposals.insert(art.proposals.end(), proposals.begin(), proposals.end());
            art.selection_counts = doc.at("selection_counts").get<mining::SelectionCounts>();
            art.best_set = weighted_set_from_json(best.at("set"));
            art.best_round = best.at("round").get<int>();
            art.best_accuracy = best.at("accuracy").get<double>();
            progress.working_set = union_of(state.retained.rubrics(), proposed);
            progress.next_round = t + 1;
        } catch (const std::exception& e) {
            spdlog::warn("checkpoint {} is unusable ({}); resuming after round {}", path.string(), e.what(),
                         progress.next_round - 1);
            break;
        }
    }
    spdlog::info("resuming {} at round {}", dir.string(), progress.next_round);
    return loop(train, valid, std::move(progress), options);
}

RunArtifacts Pipeline::loop(const std::vector<PreferencePair>& train, const std::vector<PreferencePair>& valid,
                            Progress progress, const RunOptions& options) {
    const fs::path dir(config_.run_dir);
    const int R = config_.rounds;
    const auto fp = fingerprint(config_);
    RunArtifacts art = std::move(progress.artifacts);
    auto working = std::move(progress.working_set);

    std::unordered_map<std::string, const PreferencePair*> by_id;
    for (const auto& p : train) by_id[p.id] = &p;
    Eigen::VectorXd z(static_cast<Eigen::Index>(train.size()));
    for (std::size_t i = 0; i < train.size(); ++i) z(static_cast<Eigen::Index>(i)) = sign(train[i].label);

    auto checkpoint_note = [&](int t) {
        return t == 0 ? std::string(" (no durable checkpoint yet)")
                      : " (last durable checkpoint: " + round_file(dir, t - 1).string() + ")";
    };

    for (int t = progress.next_round; t < R; ++t) {
        if (working.empty()) {
            throw Error(ErrorCode::empty_working_set, "working set for round " + std::to_string(t) + " is empty" +
                                                          checkpoint_note(t));
        }
        try {
            const auto scores = judge_->score_matrix(train, working);

            solver::SolveProblem problem;
            problem.features = scores.delta();
            problem.labels = z;
            problem.loss_weight = config_.solver.C;
            problem.nonnegative = config_.retention.mode == selection::RetentionMode::nonnegative_fit;
            problem.tolerance = config_.solver.tolerance;
            problem.max_iterations = config_.solver.max_iterations;
            problem.method = config_.solver.method;
            const auto fit = solver::fit(problem);
            if (!fit.converged) {
                spdlog::warn("round {}: solver stopped at KKT residual {:.3g} after {} iterations", t,
                             fit.kkt_residual, fit.iterations);
            }

            auto retained = selection::retain_top_n(fit.weights, working, config_.retention, t);
            const auto train_eval = selection::evaluate(retained, train, scores);
            const auto valid_scores = judge_->score_matrix(valid, retained.rubrics());
            const auto valid_eval = selection::evaluate(retained, valid, valid_scores);
            retained = retained.with_validation_accuracy(valid_eval.strict_accuracy);

            if (valid_eval.strict_accuracy > art.best_accuracy) {
                art.best_accuracy = valid_eval.strict_accuracy;
                art.best_round = t;
                art.best_set = retained;
            }

            RoundState state;
            state.round = t;
            state.working_set = working;
            state.retained = retained;
            state.train_accuracy = train_eval.strict_accuracy;
            state.validation_accuracy = valid_eval.strict_accuracy;
            state.train_tie_adjusted = train_eval.tie_adjusted_accuracy;
            state.validation_tie_adjusted = valid_eval.tie_adjusted_accuracy;

            std::vector<Rubric> proposed;
            std::vector<proposer::ProposalRecord> records;
            if (t < R - 1) {
                const auto rewards = selection::side_rewards(retained, train, scores);
                std::vector<mining::MisrankedPair> misranked;
                std::vector<double> image_rewards;
                for (std::size_t i = 0; i < train.size(); ++i) {
                    image_rewards.push_back(rewards.a[i]);
                    image_rewards.push_back(rewards.b[i]);
                    const double m = train_eval.margins[i];
                    if (sign(train[i].label) * m <= 0.0) misranked.push_back({train[i].id, m, rewards.a[i], rewards.b[i]});
                }
                std::vector<std::string> mined;
                if (!misranked.empty()) {
                    const auto buckets = mining::partition(misranked, image_rewards, config_.mining);
                    mined = mining::sample_hard_pairs(buckets, mining::phase_weights(t, R), config_.mining,
                                                      art.selection_counts,
                                                      combine_seed({config_.rng_seed, static_cast<std::uint64_t>(t)}));
                }
                std::vector<PreferencePair> hard;
                for (const auto& id : mined) hard.push_back(*by_id.at(id));
                auto result = proposer::propose_from_hard_pairs(hard, retained, working, *backends_.generator,
                                                                config_.proposer, t, backends_.dedup);
                proposed = std::move(result.rubrics);
                records = std::move(result.records);
                state.mined_pair_ids = std::move(mined);
                for (const auto& r : proposed) state.proposed_rubric_ids.push_back(r.id());
            }
            state.check_invariants();

            MetricsRow row;
            row.round = t;
            row.working_set_size = working.size();
            row.retained_size = retained.size();
            row.train_accuracy = state.train_accuracy;
            row.train_tie_adjusted = state.train_tie_adjusted;
            row.validation_accuracy = state.validation_accuracy;
            row.validation_tie_adjusted = state.validation_tie_adjusted;
            row.best_validation_accuracy = art.best_accuracy;
            row.best_round = art.best_round;
            row.mined = state.mined_pair_ids.size();
            row.proposed = proposed.size();
            row.solver_iterations = fit.iterations;
            row.kkt_residual = fit.kkt_residual;

            const json doc{{"format_version", kFormatVersion},
                           {"fingerprint", fp},
                           {"round", t},
                           {"state", state},
                           {"selection_counts", art.selection_counts},
                           {"proposals", records},
                           {"proposed_rubrics", proposed},
                           {"best", {{"round", art.best_round}, {"accuracy", art.best_accuracy}, {"set", art.best_set}}},
                           {"metrics", row}};
            write_file_atomic(round_file(dir, t), doc.dump(2) + "\n");

            art.rounds.push_back(state);
            art.metrics.push_back(row);
            art.proposals.insert(art.proposals.end(), records.begin(), records.end());
            if (options.keep_matrices) art.train_matrices.push_back(scores);

            std::string trace;
            for (const auto& m : art.metrics) trace += json(m).dump() + "\n";
            write_file_atomic(dir / kMetrics, trace);
            if (options.on_round) options.on_round(row);

            if (t < R - 1) working = union_of(retained.rubrics(), proposed);
        } catch (const Error& e) {
            throw Error(e.code(), e.detail() + checkpoint_note(t));
        }
        if (options.halt_after && t == *options.halt_after && t < R - 1) return art;
    }
    write_file_atomic(dir / kRubricSet, rubric_set_document(art.best_set).dump(2) + "\n");
    art.completed = true;
    return art;
}

EvaluationReport Pipeline::evaluate_set(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs) {
    const auto scores = judge_->score_matrix(pairs, set.rubrics());
    EvaluationReport report;
    report.evaluation = selection::evaluate(set, pairs, scores);
    for (const auto& e : set.entries()) {
        const auto c = *scores.column_of(e.rubric.id());
        double sum = 0.0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            sum += sign(pairs[i].label) * scores.delta()(*scores.row_of(pairs[i].id), c);
        }
        report.rubrics.push_back({e.rubric.id(), e.rubric.text(), e.weight, sum / static_cast<double>(pairs.size())});
    }
    return report;
}

SynthRun run_synthetic(const PipelineConfig& config, const RunOptions& options) {
    if (config.backend.kind != BackendKind::synth) throw Error(ErrorCode::config_error, "backend.kind must be synth");
    auto world = synth::make_world(config.backend.world);
    Backends backends{world.judge(), world.generator(), {config.proposer.semantic_dedup, nullptr}};
    auto seeds = proposer::generate_seed_rubrics(world.train(), *backends.generator, config.proposer).rubrics;
    Pipeline pipeline(config, std::move(backends));
    auto artifacts = pipeline.run(world.train(), world.valid(), seeds, options);
    return {std::move(world), std::move(seeds), std::move(artifacts)};
}

} // namespace autorubric::pipeline
