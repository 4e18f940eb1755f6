#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "autorubric/core.hpp"
#include "autorubric/judge.hpp"
#include "autorubric/mining.hpp"
#include "autorubric/proposer.hpp"
#include "autorubric/seedsel.hpp"
#include "autorubric/selection.hpp"
#include "autorubric/solver.hpp"
#include "autorubric/synthworld.hpp"

namespace autorubric::pipeline {

inline constexpr int kFormatVersion = 1;

struct SolverSettings {
    double C = 1.0;
    double tolerance = 1e-8;
    int max_iterations = 50'000;
    solver::Method method = solver::Method::proximal_gradient;
};

enum class BackendKind { remote, synth };

struct BackendConfig {
    BackendKind kind = BackendKind::remote;
    // Used when kind == synth.
    synth::WorldSpec world;
};

struct PipelineConfig {
    int rounds = 10;
    selection::RetentionConfig retention;
    mining::MiningConfig mining;
    SolverSettings solver;
    judge::JudgeConfig judge;
    proposer::ProposerConfig proposer;
    seedsel::SeedSelectConfig seed_selection;
    std::uint64_t rng_seed = 42;
    BackendConfig backend;
    std::string run_dir = "runs/default";
    // Empty: <run_dir>/judge_cache.ndjson.
    std::string cache_path;

    void validate() const;
    std::filesystem::path resolved_cache_path() const;
};

void to_json(json& j, const PipelineConfig& config);
void from_json(const json& j, PipelineConfig& config);

/// SHA-256 over the canonical JSON of every setting that can change results.
/// Paths and parallelism are left out.
std::string fingerprint(const PipelineConfig& config);

/// Config keys whose defaults are our own choice rather than published values.
std::vector<std::string> implementation_defaults();

struct Backends {
    std::shared_ptr<judge::JudgeBackend> judge;
    std::shared_ptr<proposer::TextGenerator> generator;
    proposer::DedupOptions dedup;
};

/// Remote chat-completions backends, or the planted world's backends.
Backends make_backends(const PipelineConfig& config);

struct MetricsRow {
    int round = 0;
    std::size_t working_set_size = 0;
    std::size_t retained_size = 0;
    double train_accuracy = 0.0;
    double train_tie_adjusted = 0.0;
    double validation_accuracy = 0.0;
    double validation_tie_adjusted = 0.0;
    double best_validation_accuracy = 0.0;
    int best_round = -1;
    std::size_t mined = 0;
    std::size_t proposed = 0;
    int solver_iterations = 0;
    double kkt_residual = 0.0;

    friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

void to_json(json& j, const MetricsRow& row);
void from_json(const json& j, MetricsRow& row);

struct RunArtifacts {
    WeightedRubricSet best_set;
    int best_round = -1;
    double best_accuracy = -std::numeric_limits<double>::infinity();
    std::vector<RoundState> rounds;
    std::vector<MetricsRow> metrics;
    std::vector<proposer::ProposalRecord> proposals;
    // Mining history: how often each train pair has been mined so far.
    mining::SelectionCounts selection_counts;
    // Train score matrices per round, when RunOptions::keep_matrices is set.
    std::vector<ScoreMatrix> train_matrices;
    // False when the run stopped early through RunOptions::halt_after.
    bool completed = false;
};

struct RunOptions {
    // Stop after checkpointing this round, as if the process were killed.
    std::optional<int> halt_after;
    bool keep_matrices = false;
    std::function<void(const MetricsRow&)> on_round;
};

struct RubricStat {
    std::string id;
    std::string text;
    double weight = 0.0;
    // Mean of s(preferred) - s(other) over the evaluated pairs.
    double mean_delta = 0.0;
};

struct EvaluationReport {
    selection::Evaluation evaluation;
    std::vector<RubricStat> rubrics;
};

std::vector<PreferencePair> read_pairs(const std::filesystem::path& path);
void write_pairs(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::vector<Rubric> read_rubrics(const std::filesystem::path& path);
void write_rubrics(const std::filesystem::path& path, const std::vector<Rubric>& rubrics);

/// Rubric-set artifact {format_version, round, validation_accuracy, rubrics}.
json rubric_set_document(const WeightedRubricSet& set);
WeightedRubricSet read_rubric_set(const std::filesystem::path& path);

class Pipeline {
public:
    Pipeline(PipelineConfig config, Backends backends);

    /// Fresh run into config.run_dir. Earlier checkpoints there are discarded;
    /// the judge cache is kept.
    RunArtifacts run(const std::vector<PreferencePair>& train, const std::vector<PreferencePair>& valid,
                     const std::vector<Rubric>& seed_rubrics, const RunOptions& options = {});

    /// Continues the run in config.run_dir from its last readable round.
    /// Throws config-drift when the stored fingerprint differs.
    RunArtifacts resume(const RunOptions& options = {});

    EvaluationReport evaluate_set(const WeightedRubricSet& set, const std::vector<PreferencePair>& pairs);

    judge::Judge& judge() noexcept { return *judge_; }
    const PipelineConfig& config() const noexcept { return config_; }

private:
    struct Progress;

    RunArtifacts loop(const std::vector<PreferencePair>& train, const std::vector<PreferencePair>& valid,
                      Progress progress, const RunOptions& options);

    PipelineConfig config_;
    Backends backends_;
    std::unique_ptr<judge::Judge> judge_;
};

struct SynthRun {
    synth::World world;
    std::vector<Rubric> seed_rubrics;
    RunArtifacts artifacts;
};

/// Planted-world run: seed rubrics from every train pair of config.backend.world,
/// then the refinement loop against the world's backends.
SynthRun run_synthetic(const PipelineConfig& config, const RunOptions& options = {});

std::filesystem::path round_file(const std::filesystem::path& run_dir, int round);

} // namespace autorubric::pipeline
