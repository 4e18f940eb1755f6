#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "autorubric/core.hpp"

namespace autorubric::judge {

struct JudgeRequest {
    std::string rubric_id;
    std::string rubric_text;
    std::string prompt;
    std::string image_ref;
    Side side = Side::a;
    std::string template_id = "default";
    // Cache key component; requests without a pair id bypass the cache.
    std::string pair_id;

    void validate() const;
};

enum class IndeterminatePolicy { error, neutral };

struct JudgeConfig {
    std::string endpoint_url = "http://localhost:8000/v1";
    std::string model_name = "Qwen/Qwen3-VL-8B-Instruct";
    std::string api_key_env = "AUTORUBRIC_JUDGE_API_KEY";
    double temperature = 0.0;
    int max_output_tokens = 16;
    int request_timeout_ms = 60'000;
    int max_parallel_requests = 8;
    int retry_budget = 3;
    int backoff_initial_ms = 500;
    int top_logprobs = 20;
    IndeterminatePolicy indeterminate_policy = IndeterminatePolicy::error;
    // Empty: the built-in binary yes/no template.
    std::string template_path;

    void validate() const;
};

void to_json(json& j, const JudgeConfig& config);
void from_json(const json& j, JudgeConfig& config);

class JudgeBackend {
public:
    virtual ~JudgeBackend() = default;
    /// Score in [0,1]. Throws transport-failure for retryable faults and
    /// judge-indeterminate when no yes/no answer can be read.
    virtual double score(const JudgeRequest& request) = 0;
    /// Recorded with every cached score.
    virtual std::string tag() const = 0;
};

struct CacheKey {
    std::string rubric_id;
    std::string pair_id;
    Side side = Side::a;

    friend bool operator==(const CacheKey&, const CacheKey&) = default;
};

struct CacheKeyHash {
    std::size_t operator()(const CacheKey& k) const noexcept;
};

/// Append-only score log. Every put is one newline-terminated JSON record,
/// flushed before returning. Replay keeps the last record per key; an
/// unterminated tail is cut off and malformed lines are skipped.
class ScoreCache {
public:
    struct ReplayReport {
        std::size_t records = 0;
        std::size_t skipped_lines = 0;
        std::size_t truncated_bytes = 0;
    };

    /// In-memory only.
    ScoreCache() = default;
    explicit ScoreCache(const std::filesystem::path& path);

    ScoreCache(const ScoreCache&) = delete;
    ScoreCache& operator=(const ScoreCache&) = delete;

    std::optional<double> get(const CacheKey& key) const;
    void put(const CacheKey& key, double score, const std::string& backend_tag);
    std::size_t size() const;
    const ReplayReport& replay_report() const noexcept { return report_; }
    const std::optional<std::filesystem::path>& path() const noexcept { return path_; }

private:
    void replay();

    std::optional<std::filesystem::path> path_;
    std::ofstream log_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<CacheKey, double, CacheKeyHash> index_;
    ReplayReport report_;
};

/// Built-in binary-scoring template with {rubric} and {prompt} placeholders.
const std::string& default_judge_template();

/// Judge front end: cache-first lookups, bounded retries, parallel fan-out.
class Judge {
public:
    Judge(std::shared_ptr<JudgeBackend> backend, JudgeConfig config,
          std::shared_ptr<ScoreCache> cache = std::make_shared<ScoreCache>());

    /// Single score with retries and the indeterminate policy applied.
    double score(const JudgeRequest& request);

    /// Scores every (pair, rubric, side). Only cache misses reach the backend;
    /// completed scores are persisted even when the batch fails.
    ScoreMatrix score_matrix(const std::vector<PreferencePair>& pairs, const std::vector<Rubric>& rubrics);

    std::uint64_t backend_calls() const noexcept { return backend_calls_.load(); }
    std::uint64_t cache_hits() const noexcept { return cache_hits_.load(); }
    void reset_counters() noexcept;

    const JudgeConfig& config() const noexcept { return config_; }
    ScoreCache& cache() noexcept { return *cache_; }

private:
    double call_backend(const JudgeRequest& request);

    std::shared_ptr<JudgeBackend> backend_;
    JudgeConfig config_;
    std::shared_ptr<ScoreCache> cache_;
    std::atomic<std::uint64_t> backend_calls_{0};
    std::atomic<std::uint64_t> cache_hits_{0};
};

/// OpenAI-compatible chat-completions judge that reads first-token log-probabilities.
class RemoteJudge : public JudgeBackend {
public:
    explicit RemoteJudge(JudgeConfig config);

    double score(const JudgeRequest& request) override;
    std::string tag() const override;

    /// p(yes) / (p(yes) + p(no)) over surface variants of the first token, or
    /// 1/0 from the answer text. Empty when neither is readable.
    static std::optional<double> yes_probability(const json& response);

    json request_body(const JudgeRequest& request) const;

private:
    JudgeConfig config_;
    std::string template_;
};

} // namespace autorubric::judge
