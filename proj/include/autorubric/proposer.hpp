#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "autorubric/core.hpp"

namespace autorubric::proposer {

enum class Role { vision_reasoner, rule_extractor, rule_merger, failure_diagnoser };

std::string to_string(Role role);

/// Everything a generator may need. `text` is the rendered template; the
/// structured fields let deterministic generators work without parsing it.
struct GenerationRequest {
    Role role = Role::vision_reasoner;
    std::string text;
    std::vector<std::string> image_refs;
    std::string pair_id;
    std::string prompt;
    std::optional<Label> label;
    std::vector<std::string> rubric_texts;
    std::string diagnosis;
    int round = 0;
};

class TextGenerator {
public:
    virtual ~TextGenerator() = default;
    /// Throws transport-failure for retryable faults.
    virtual std::string generate(const GenerationRequest& request) = 0;
};

struct SemanticDedup {
    bool enabled = false;
    double threshold = 0.9;
};

struct ProposerConfig {
    std::string endpoint_url = "http://localhost:8000/v1";
    std::string model_name = "gemini-2.5-flash";
    std::string api_key_env = "AUTORUBRIC_PROPOSER_API_KEY";
    double temperature = 0.1;
    // Sent only when > 0, at the JSON pointer below inside the request body.
    int thinking_budget = 1024;
    std::string thinking_budget_path = "/extra_body/google/thinking_config/thinking_budget";
    int max_output_tokens = 4096;
    int request_timeout_ms = 120'000;
    int retry_budget = 3;
    int backoff_initial_ms = 1000;
    int max_parallel_requests = 4;
    int max_rubrics_per_pair = 8;
    // Seed statements per merger call; larger pools are merged batch by batch.
    int merge_batch_size = 200;
    SemanticDedup semantic_dedup;
    // Empty paths select the built-in templates.
    std::string vision_reasoner_template;
    std::string rule_extractor_template;
    std::string rule_merger_template;
    std::string failure_diagnoser_template;

    void validate() const;
};

void to_json(json& j, const ProposerConfig& config);
void from_json(const json& j, ProposerConfig& config);

/// Resolved template text for a role.
std::string template_for(const ProposerConfig& config, Role role);

enum class Stage { seed, refinement };

struct ProposalRecord {
    std::string source_pair_id;
    Stage stage = Stage::refinement;
    int round = 0;
    std::string diagnosis_text;
    std::vector<std::string> extracted_rubrics;
    std::vector<std::string> accepted_ids;

    friend bool operator==(const ProposalRecord&, const ProposalRecord&) = default;
};

void to_json(json& j, const ProposalRecord& record);
void from_json(const json& j, ProposalRecord& record);

/// Backend failure during a proposal batch; carries what was produced before it.
class ProposalFailure : public Error {
public:
    ProposalFailure(const std::string& message, std::vector<Rubric> partial, std::vector<ProposalRecord> records)
        : Error(ErrorCode::proposal_failure, message), partial_(std::move(partial)), records_(std::move(records)) {}

    const std::vector<Rubric>& partial() const noexcept { return partial_; }
    const std::vector<ProposalRecord>& records() const noexcept { return records_; }

private:
    std::vector<Rubric> partial_;
    std::vector<ProposalRecord> records_;
};

/// Statements from the fenced block of a reply (or the whole reply if there is
/// no fence). Bullet and numbered lines are kept; other lines are skipped with a warning.
std::vector<std::string> parse_statement_list(const std::string& reply);

using EmbeddingFn = std::function<std::vector<double>(const std::string&)>;

struct DedupOptions {
    SemanticDedup semantic;
    EmbeddingFn embed;
};

/// Keeps candidates whose normalized text is new to both the pool and earlier
/// candidates; with semantic dedup also drops those whose cosine similarity to
/// any kept or existing rubric exceeds the threshold. Order is preserved.
std::vector<Rubric> dedup(const std::vector<Rubric>& candidates, const std::vector<Rubric>& existing_pool,
                          const DedupOptions& options = {});

struct SeedResult {
    std::vector<Rubric> rubrics;
    std::vector<ProposalRecord> records;
};

/// Reason, extract per pair; then one global merge over the pooled statements.
/// Throws empty-pool when nothing is extracted.
SeedResult generate_seed_rubrics(const std::vector<PreferencePair>& pairs, TextGenerator& generator,
                                 const ProposerConfig& config, const DedupOptions& dedup_options = {});

/// Diagnosis and extraction for one hard pair. Safe to run concurrently.
struct Draft {
    std::string pair_id;
    std::string diagnosis;
    std::vector<std::string> statements;
};

Draft draft_from_hard_pair(const PreferencePair& pair, const WeightedRubricSet& retained, TextGenerator& generator,
                           const ProposerConfig& config, int round);

struct RefinementResult {
    std::vector<Rubric> rubrics;
    std::vector<ProposalRecord> records;
};

/// Serial merge of drafts in the given order: dedup against the working set
/// and earlier drafts, one record per draft.
RefinementResult merge_drafts(const std::vector<Draft>& drafts, const std::vector<Rubric>& working_set, int round,
                              const DedupOptions& dedup_options = {});

/// Drafts every pair (up to max_parallel_requests at once) then merges.
RefinementResult propose_from_hard_pairs(const std::vector<PreferencePair>& pairs, const WeightedRubricSet& retained,
                                         const std::vector<Rubric>& working_set, TextGenerator& generator,
                                         const ProposerConfig& config, int round,
                                         const DedupOptions& dedup_options = {});

/// Single-pair convenience form.
std::vector<Rubric> propose_from_hard_pair(const PreferencePair& pair, const WeightedRubricSet& retained,
                                           const std::vector<Rubric>& working_set, TextGenerator& generator,
                                           const ProposerConfig& config, int round);

/// Chat-completions generator for the four roles.
class RemoteGenerator : public TextGenerator {
public:
    explicit RemoteGenerator(ProposerConfig config);
    std::string generate(const GenerationRequest& request) override;
    json request_body(const GenerationRequest& request) const;

private:
    ProposerConfig config_;
};

} // namespace autorubric::proposer
