#include "autorubric/judge.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <limits>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "autorubric/chat_client.hpp"
#include "autorubric/random.hpp"
#include "autorubric/text.hpp"
#include "default_templates.inc"

namespace autorubric::judge {

void JudgeRequest::validate() const {
    if (rubric_id.empty() || rubric_text.empty() || image_ref.empty() || template_id.empty()) {
        throw Error(ErrorCode::invalid_argument, "judge request with an empty field");
    }
}

void JudgeConfig::validate() const {
    if (max_parallel_requests < 1) throw Error(ErrorCode::config_error, "max_parallel_requests must be >= 1");
    if (retry_budget < 0) throw Error(ErrorCode::config_error, "retry_budget must be >= 0");
    if (temperature < 0.0) throw Error(ErrorCode::config_error, "judge temperature must be >= 0");
    if (max_output_tokens < 1) throw Error(ErrorCode::config_error, "max_output_tokens must be >= 1");
    if (request_timeout_ms < 1 || backoff_initial_ms < 0) throw Error(ErrorCode::config_error, "bad judge timing");
}

void to_json(json& j, const JudgeConfig& c) {
    j = json{{"endpoint_url", c.endpoint_url},
             {"model_name", c.model_name},
             {"api_key_env", c.api_key_env},
             {"temperature", c.temperature},
             {"max_output_tokens", c.max_output_tokens},
             {"request_timeout_ms", c.request_timeout_ms},
             {"max_parallel_requests", c.max_parallel_requests},
             {"retry_budget", c.retry_budget},
             {"backoff_initial_ms", c.backoff_initial_ms},
             {"top_logprobs", c.top_logprobs},
             {"indeterminate_policy", c.indeterminate_policy == IndeterminatePolicy::error ? "error" : "neutral"},
             {"template_path", c.template_path}};
}

void from_json(const json& j, JudgeConfig& c) {
    c.endpoint_url = j.value("endpoint_url", c.endpoint_url);
    c.model_name = j.value("model_name", c.model_name);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.temperature = j.value("temperature", c.temperature);
    c.max_output_tokens = j.value("max_output_tokens", c.max_output_tokens);
    c.request_timeout_ms = j.value("request_timeout_ms", c.request_timeout_ms);
    c.max_parallel_requests = j.value("max_parallel_requests", c.max_parallel_requests);
    c.retry_budget = j.value("retry_budget", c.retry_budget);
    c.backoff_initial_ms = j.value("backoff_initial_ms", c.backoff_initial_ms);
    c.top_logprobs = j.value("top_logprobs", c.top_logprobs);
    if (j.contains("indeterminate_policy")) {
        const auto p = j.at("indeterminate_policy").get<std::string>();
        if (p == "error") {
            c.indeterminate_policy = IndeterminatePolicy::error;
        } else if (p == "neutral") {
            c.indeterminate_policy = IndeterminatePolicy::neutral;
        } else {
            throw Error(ErrorCode::config_error, "indeterminate_policy must be \"error\" or \"neutral\"");
        }
    }
    c.template_path = j.value("template_path", c.template_path);
    c.validate();
}

const std::string& default_judge_template() {
    static const std::string text = templates::judge_binary;
    return text;
}

// ---------------------------------------------------------------------------
// ScoreCache

std::size_t CacheKeyHash::operator()(const CacheKey& k) const noexcept {
    return static_cast<std::size_t>(
        combine_seed({hash_string(k.rubric_id), hash_string(k.pair_id), static_cast<std::uint64_t>(k.side)}));
}

ScoreCache::ScoreCache(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    replay();
    log_.open(path, std::ios::binary | std::ios::app);
    if (!log_) throw Error(ErrorCode::io_error, "cannot open score cache " + path.string());
}

void ScoreCache::replay() {
    if (!std::filesystem::exists(*path_)) return;
    const std::string data = read_file(*path_);
    std::size_t start = 0;
    std::size_t line_number = 0;
    while (start < data.size()) {
        const auto end = data.find('\n', start);
        if (end == std::string::npos) break;
        ++line_number;
        const std::string_view line(data.data() + start, end - start);
        start = end + 1;
        try {
            const auto j = json::parse(line);
            const double score = j.at("score").get<double>();
            if (!(score >= 0.0 && score <= 1.0)) throw std::out_of_range("score outside [0,1]");
            index_[{j.at("rubric_id").get<std::string>(), j.at("pair_id").get<std::string>(),
                    parse_side(j.at("side").get<std::string>())}] = score;
            ++report_.records;
        } catch (const std::exception& e) {
            ++report_.skipped_lines;
            spdlog::warn("score cache {}: skipping line {}: {}", path_->string(), line_number, e.what());
        }
    }
    if (start < data.size()) {
        report_.truncated_bytes = data.size() - start;
        spdlog::warn("score cache {}: dropping {} bytes of unterminated trailing record", path_->string(),
                     report_.truncated_bytes);
        std::filesystem::resize_file(*path_, start);
    }
}

std::optional<double> ScoreCache::get(const CacheKey& key) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

namespace {

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace

void ScoreCache::put(const CacheKey& key, double score, const std::string& backend_tag) {
    if (!(score >= 0.0 && score <= 1.0)) throw Error(ErrorCode::invalid_argument, "cached score outside [0,1]");
    std::unique_lock lock(mutex_);
    index_[key] = score;
    if (!path_) return;
    const json record{{"rubric_id", key.rubric_id}, {"pair_id", key.pair_id}, {"side", to_string(key.side)},
                      {"score", score},         {"backend_tag", backend_tag}, {"timestamp", utc_timestamp()}};
    log_ << record.dump() << '\n';
    log_.flush();
    if (!log_) throw Error(ErrorCode::io_error, "append to score cache failed");
}

std::size_t ScoreCache::size() const {
    std::shared_lock lock(mutex_);
    return index_.size();
}

// ---------------------------------------------------------------------------
// Judge

Judge::Judge(std::shared_ptr<JudgeBackend> backend, JudgeConfig config, std::shared_ptr<ScoreCache> cache)
    : backend_(std::move(backend)), config_(std::move(config)), cache_(std::move(cache)) {
    config_.validate();
    if (!backend_) throw Error(ErrorCode::invalid_argument, "judge without a backend");
    if (!cache_) cache_ = std::make_shared<ScoreCache>();
}

void Judge::reset_counters() noexcept {
    backend_calls_ = 0;
    cache_hits_ = 0;
}

double Judge::call_backend(const JudgeRequest& request) {
    auto delay = std::chrono::milliseconds(config_.backoff_initial_ms);
    for (int attempt = 0;; ++attempt) {
        try {
            ++backend_calls_;
            const double s = backend_->score(request);
            if (!(s >= 0.0 && s <= 1.0)) throw Error(ErrorCode::judge_indeterminate, "backend score outside [0,1]");
            return s;
        } catch (const Error& e) {
            if (e.code() == ErrorCode::judge_indeterminate) {
                if (config_.indeterminate_policy == IndeterminatePolicy::neutral) return 0.5;
                throw;
            }
            if (e.code() == ErrorCode::transport_failure) {
                if (attempt < config_.retry_budget) {
                    spdlog::warn("judge: {} (retry {}/{})", e.what(), attempt + 1, config_.retry_budget);
                    std::this_thread::sleep_for(delay);
                    delay *= 2;
                    continue;
                }
                throw Error(ErrorCode::judge_unavailable, std::string(e.what()) + " after " +
                                                              std::to_string(config_.retry_budget) + " retries");
            }
            if (e.code() == ErrorCode::io_error) throw Error(ErrorCode::judge_unavailable, e.what());
            throw;
        }
    }
}

double Judge::score(const JudgeRequest& request) {
    request.validate();
    if (!request.pair_id.empty()) {
        if (auto hit = cache_->get({request.rubric_id, request.pair_id, request.side})) {
            ++cache_hits_;
            return *hit;
        }
    }
    const double s = call_backend(request);
    if (!request.pair_id.empty()) cache_->put({request.rubric_id, request.pair_id, request.side}, s, backend_->tag());
    return s;
}

ScoreMatrix Judge::score_matrix(const std::vector<PreferencePair>& pairs, const std::vector<Rubric>& rubrics) {
    for (const auto& p : pairs) p.validate();
    const auto rows = static_cast<Eigen::Index>(pairs.size());
    const auto cols = static_cast<Eigen::Index>(rubrics.size());
    Eigen::MatrixXd side_a(rows, cols), side_b(rows, cols);
    const std::string template_id = config_.template_path.empty() ? "default" : config_.template_path;

    auto request_for = [&](Eigen::Index i, Eigen::Index j, Side side) {
        const auto& p = pairs[static_cast<std::size_t>(i)];
        const auto& r = rubrics[static_cast<std::size_t>(j)];
        return JudgeRequest{r.id(), r.text(), p.prompt, side == Side::a ? p.image_a : p.image_b,
                            side, template_id, p.id};
    };

    struct Task {
        Eigen::Index i, j;
        bool both_sides;  // identical images: score once, copy to side b
        Side side;
    };
    std::vector<Task> misses;
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& p = pairs[static_cast<std::size_t>(i)];
        const bool same_image = p.image_a == p.image_b;
        for (Eigen::Index j = 0; j < cols; ++j) {
            const auto& rid = rubrics[static_cast<std::size_t>(j)].id();
            auto a = cache_->get({rid, p.id, Side::a});
            auto b = cache_->get({rid, p.id, Side::b});
            if (same_image && a) b = a;
            if (a) {
                side_a(i, j) = *a;
                ++cache_hits_;
            }
            if (b) {
                side_b(i, j) = *b;
                ++cache_hits_;
            }
            if (same_image && !a) {
                misses.push_back({i, j, true, Side::a});
                continue;
            }
            if (!a) misses.push_back({i, j, false, Side::a});
            if (!b) misses.push_back({i, j, false, Side::b});
        }
    }

    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> completed{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto worker = [&] {
        while (!failed.load()) {
            const auto k = next.fetch_add(1);
            if (k >= misses.size()) return;
            const auto& t = misses[k];
            try {
                const auto req = request_for(t.i, t.j, t.side);
                const double s = call_backend(req);
                cache_->put({req.rubric_id, req.pair_id, t.side}, s, backend_->tag());
                (t.side == Side::a ? side_a : side_b)(t.i, t.j) = s;
                if (t.both_sides) {
                    cache_->put({req.rubric_id, req.pair_id, Side::b}, s, backend_->tag());
                    side_b(t.i, t.j) = s;
                }
                ++completed;
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                failed = true;
            }
        }
    };

    const auto threads = std::min<std::size_t>(static_cast<std::size_t>(config_.max_parallel_requests), misses.size());
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t n = 0; n < threads; ++n) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    if (first_error) {
        try {
            std::rethrow_exception(first_error);
        } catch (const Error& e) {
            throw Error(e.code(), std::string(e.what()) + " (" + std::to_string(completed.load()) + " of " +
                                      std::to_string(misses.size()) + " new scores persisted to the cache)");
        }
    }

    std::vector<std::string> pair_ids, rubric_ids;
    for (const auto& p : pairs) pair_ids.push_back(p.id);
    for (const auto& r : rubrics) rubric_ids.push_back(r.id());
    return ScoreMatrix(std::move(pair_ids), std::move(rubric_ids), std::move(side_a), std::move(side_b));
}

// ---------------------------------------------------------------------------
// RemoteJudge

RemoteJudge::RemoteJudge(JudgeConfig config) : config_(std::move(config)) {
    config_.validate();
    template_ = config_.template_path.empty() ? default_judge_template() : read_file(config_.template_path);
}

std::string RemoteJudge::tag() const { return "remote:" + config_.model_name; }

json RemoteJudge::request_body(const JudgeRequest& request) const {
    const auto text = render_template(template_, {{"rubric", request.rubric_text}, {"prompt", request.prompt}});
    json body{{"model", config_.model_name},
              {"messages", json::array({user_message(text, {request.image_ref})})},
              {"temperature", config_.temperature},
              {"max_tokens", config_.max_output_tokens}};
    if (config_.top_logprobs > 0) {
        body["logprobs"] = true;
        body["top_logprobs"] = config_.top_logprobs;
    }
    return body;
}

namespace {

// Lowercased token with whitespace and tokenizer word-boundary markers removed.
std::string surface_form(const std::string& token) {
    std::string out;
    for (std::size_t k = 0; k < token.size();) {
        if (token.compare(k, 2, "\xC4\xA0") == 0) {  // U+0120, byte-level BPE space
            k += 2;
        } else if (token.compare(k, 3, "\xE2\x96\x81") == 0) {  // U+2581, sentencepiece space
            k += 3;
        } else {
            out.push_back(token[k++]);
        }
    }
    return to_lower(trim(out));
}

std::optional<double> from_text(const std::string& content) {
    std::string word;
    for (char c : to_lower(trim(content))) {
        if (!std::isalpha(static_cast<unsigned char>(c))) break;
        word.push_back(c);
    }
    if (word == "yes") return 1.0;
    if (word == "no") return 0.0;
    return std::nullopt;
}

} // namespace

std::optional<double> RemoteJudge::yes_probability(const json& response) {
    if (!response.contains("choices") || response["choices"].empty()) return std::nullopt;
    const auto& choice = response["choices"][0];
    const json* top = nullptr;
    if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
        const auto& lp = choice["logprobs"];
        if (lp.contains("content") && lp["content"].is_array() && !lp["content"].empty()) {
            const auto& first = lp["content"][0];
            if (first.contains("top_logprobs") && first["top_logprobs"].is_array()) top = &first["top_logprobs"];
        }
    }
    if (top) {
        double yes = 0.0, no = 0.0;
        for (const auto& entry : *top) {
            const auto form = surface_form(entry.value("token", std::string{}));
            const double p = std::exp(entry.value("logprob", -std::numeric_limits<double>::infinity()));
            if (form == "yes") yes += p;
            if (form == "no") no += p;
        }
        if (yes + no > 0.0) return yes / (yes + no);
    }
    if (choice.contains("message") && choice["message"].contains("content") &&
        choice["message"]["content"].is_string()) {
        return from_text(choice["message"]["content"].get<std::string>());
    }
    return std::nullopt;
}

double RemoteJudge::score(const JudgeRequest& request) {
    const Endpoint endpoint{config_.endpoint_url, config_.api_key_env,
                            std::chrono::milliseconds(config_.request_timeout_ms)};
    const auto response = post_chat_completion(endpoint, request_body(request));
    if (auto p = yes_probability(response)) return *p;
    throw Error(ErrorCode::judge_indeterminate, "no yes/no answer for rubric " + request.rubric_id + " on pair " +
                                                    request.pair_id);
}

} // namespace autorubric::judge
