#include "autorubric/proposer.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "autorubric/chat_client.hpp"
#include "autorubric/text.hpp"
#include "default_templates.inc"

namespace autorubric::proposer {

std::string to_string(Role role) {
    switch (role) {
    case Role::vision_reasoner: return "vision_reasoner";
    case Role::rule_extractor: return "rule_extractor";
    case Role::rule_merger: return "rule_merger";
    case Role::failure_diagnoser: return "failure_diagnoser";
    }
    return "unknown";
}

void ProposerConfig::validate() const {
    if (temperature < 0.0) throw Error(ErrorCode::config_error, "proposer temperature must be >= 0");
    if (max_parallel_requests < 1) throw Error(ErrorCode::config_error, "proposer max_parallel_requests must be >= 1");
    if (max_rubrics_per_pair < 1) throw Error(ErrorCode::config_error, "max_rubrics_per_pair must be >= 1");
    if (merge_batch_size < 1) throw Error(ErrorCode::config_error, "merge_batch_size must be >= 1");
    if (retry_budget < 0 || backoff_initial_ms < 0) throw Error(ErrorCode::config_error, "bad proposer retry settings");
    if (!(semantic_dedup.threshold > -1.0 && semantic_dedup.threshold <= 1.0)) {
        throw Error(ErrorCode::config_error, "semantic dedup threshold must lie in (-1, 1]");
    }
    for (const auto* path : {&vision_reasoner_template, &rule_extractor_template, &rule_merger_template,
                             &failure_diagnoser_template}) {
        if (!path->empty() && !std::filesystem::exists(*path)) {
            throw Error(ErrorCode::config_error, "template file not found: " + *path);
        }
    }
}

void to_json(json& j, const ProposerConfig& c) {
    j = json{{"endpoint_url", c.endpoint_url},
             {"model_name", c.model_name},
             {"api_key_env", c.api_key_env},
             {"temperature", c.temperature},
             {"thinking_budget", c.thinking_budget},
             {"thinking_budget_path", c.thinking_budget_path},
             {"max_output_tokens", c.max_output_tokens},
             {"request_timeout_ms", c.request_timeout_ms},
             {"retry_budget", c.retry_budget},
             {"backoff_initial_ms", c.backoff_initial_ms},
             {"max_parallel_requests", c.max_parallel_requests},
             {"max_rubrics_per_pair", c.max_rubrics_per_pair},
             {"merge_batch_size", c.merge_batch_size},
             {"semantic_dedup", {{"enabled", c.semantic_dedup.enabled}, {"threshold", c.semantic_dedup.threshold}}},
             {"templates",
              {{"vision_reasoner", c.vision_reasoner_template},
               {"rule_extractor", c.rule_extractor_template},
               {"rule_merger", c.rule_merger_template},
               {"failure_diagnoser", c.failure_diagnoser_template}}}};
}

void from_json(const json& j, ProposerConfig& c) {
    c.endpoint_url = j.value("endpoint_url", c.endpoint_url);
    c.model_name = j.value("model_name", c.model_name);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.temperature = j.value("temperature", c.temperature);
    c.thinking_budget = j.value("thinking_budget", c.thinking_budget);
    c.thinking_budget_path = j.value("thinking_budget_path", c.thinking_budget_path);
    c.max_output_tokens = j.value("max_output_tokens", c.max_output_tokens);
    c.request_timeout_ms = j.value("request_timeout_ms", c.request_timeout_ms);
    c.retry_budget = j.value("retry_budget", c.retry_budget);
    c.backoff_initial_ms = j.value("backoff_initial_ms", c.backoff_initial_ms);
    c.max_parallel_requests = j.value("max_parallel_requests", c.max_parallel_requests);
    c.max_rubrics_per_pair = j.value("max_rubrics_per_pair", c.max_rubrics_per_pair);
    c.merge_batch_size = j.value("merge_batch_size", c.merge_batch_size);
    if (j.contains("semantic_dedup")) {
        const auto& s = j.at("semantic_dedup");
        c.semantic_dedup.enabled = s.value("enabled", c.semantic_dedup.enabled);
        c.semantic_dedup.threshold = s.value("threshold", c.semantic_dedup.threshold);
    }
    if (j.contains("templates")) {
        const auto& t = j.at("templates");
        c.vision_reasoner_template = t.value("vision_reasoner", c.vision_reasoner_template);
        c.rule_extractor_template = t.value("rule_extractor", c.rule_extractor_template);
        c.rule_merger_template = t.value("rule_merger", c.rule_merger_template);
        c.failure_diagnoser_template = t.value("failure_diagnoser", c.failure_diagnoser_template);
    }
    c.validate();
}

std::string template_for(const ProposerConfig& config, Role role) {
    const std::string* path = nullptr;
    const char* builtin = nullptr;
    switch (role) {
    case Role::vision_reasoner:
        path = &config.vision_reasoner_template;
        builtin = templates::vision_reasoner;
        break;
    case Role::rule_extractor:
        path = &config.rule_extractor_template;
        builtin = templates::rule_extractor;
        break;
    case Role::rule_merger:
        path = &config.rule_merger_template;
        builtin = templates::rule_merger;
        break;
    case Role::failure_diagnoser:
        path = &config.failure_diagnoser_template;
        builtin = templates::failure_diagnoser;
        break;
    }
    return path->empty() ? std::string(builtin) : read_file(*path);
}

void to_json(json& j, const ProposalRecord& r) {
    j = json{{"source_pair_id", r.source_pair_id},
             {"stage", r.stage == Stage::seed ? "seed" : "refinement"},
             {"round", r.round},
             {"diagnosis_text", r.diagnosis_text},
             {"extracted_rubrics", r.extracted_rubrics},
             {"accepted_ids", r.accepted_ids}};
}

void from_json(const json& j, ProposalRecord& r) {
    r.source_pair_id = j.at("source_pair_id").get<std::string>();
    r.stage = j.at("stage").get<std::string>() == "seed" ? Stage::seed : Stage::refinement;
    r.round = j.value("round", 0);
    r.diagnosis_text = j.value("diagnosis_text", std::string{});
    r.extracted_rubrics = j.at("extracted_rubrics").get<std::vector<std::string>>();
    r.accepted_ids = j.at("accepted_ids").get<std::vector<std::string>>();
}

// ---------------------------------------------------------------------------
// Parsing and dedup

namespace {

// Strips "- ", "* ", "• ", "1. ", "1) " prefixes. Empty result means not a list item.
std::string list_item(const std::string& line) {
    const std::string t = trim(line);
    if (t.rfind("- ", 0) == 0 || t.rfind("* ", 0) == 0) return trim(t.substr(2));
    if (t.rfind("\xE2\x80\xA2", 0) == 0) return trim(t.substr(3));
    std::size_t k = 0;
    while (k < t.size() && std::isdigit(static_cast<unsigned char>(t[k]))) ++k;
    if (k > 0 && k + 1 < t.size() && (t[k] == '.' || t[k] == ')') && t[k + 1] == ' ') return trim(t.substr(k + 2));
    return {};
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::dimension_mismatch, "embedding dimensions differ");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

std::string bullet_list(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& s : items) out += "- " + s + "\n";
    return out.empty() ? "(none)\n" : out;
}

std::string preferred_text(Label label) {
    return label == Label::prefer_a ? "the first image (A)" : "the second image (B)";
}

std::string call(TextGenerator& generator, const GenerationRequest& request, const ProposerConfig& config) {
    auto delay = std::chrono::milliseconds(config.backoff_initial_ms);
    for (int attempt = 0;; ++attempt) {
        try {
            return generator.generate(request);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::transport_failure || attempt >= config.retry_budget) throw;
            spdlog::warn("proposer {}: {} (retry {}/{})", to_string(request.role), e.what(), attempt + 1,
                         config.retry_budget);
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }
}

std::vector<std::string> extract(TextGenerator& generator, const ProposerConfig& config, const std::string& analysis,
                                 const PreferencePair& pair, int round) {
    GenerationRequest req;
    req.role = Role::rule_extractor;
    req.text = render_template(template_for(config, Role::rule_extractor), {{"diagnosis", analysis}});
    req.pair_id = pair.id;
    req.prompt = pair.prompt;
    req.label = pair.label;
    req.diagnosis = analysis;
    req.round = round;
    auto statements = parse_statement_list(call(generator, req, config));
    if (statements.size() > static_cast<std::size_t>(config.max_rubrics_per_pair)) {
        statements.resize(static_cast<std::size_t>(config.max_rubrics_per_pair));
    }
    return statements;
}

std::vector<Rubric> to_rubrics(const std::vector<std::string>& statements, Origin origin) {
    std::vector<Rubric> out;
    for (const auto& s : statements) {
        try {
            out.push_back(Rubric::create(s, origin));
        } catch (const Error& e) {
            spdlog::warn("skipping statement \"{}\": {}", s, e.what());
        }
    }
    return out;
}

// Runs fn(k) for k in [0, n) on up to `parallel` threads. Stops handing out
// work after the first failure and reports which indices completed.
template <typename Fn>
std::vector<bool> parallel_for(std::size_t n, int parallel, Fn fn, std::exception_ptr& error) {
    std::vector<char> done(n, 0);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex m;
    auto worker = [&] {
        while (!failed) {
            const auto k = next.fetch_add(1);
            if (k >= n) return;
            try {
                fn(k);
                done[k] = 1;
            } catch (...) {
                std::lock_guard lock(m);
                if (!error) error = std::current_exception();
                failed = true;
            }
        }
    };
    const auto threads = std::min<std::size_t>(static_cast<std::size_t>(parallel), n);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return {done.begin(), done.end()};
}

std::string describe(const std::exception_ptr& error) {
    try {
        std::rethrow_exception(error);
    } catch (const std::exception& e) {
        return e.what();
    }
}

} // namespace

std::vector<std::string> parse_statement_list(const std::string& reply) {
    auto lines = split_lines(reply);
    // Restrict to the first fenced block when there is one.
    std::size_t open = lines.size();
    for (std::size_t k = 0; k < lines.size(); ++k) {
        if (trim(lines[k]).rfind("```", 0) == 0) {
            open = k;
            break;
        }
    }
    if (open < lines.size()) {
        std::size_t close = open + 1;
        while (close < lines.size() && trim(lines[close]).rfind("```", 0) != 0) ++close;
        lines = std::vector<std::string>(lines.begin() + static_cast<long>(open) + 1,
                                         lines.begin() + static_cast<long>(close));
    }
    std::vector<std::string> out;
    for (const auto& line : lines) {
        if (trim(line).empty()) continue;
        auto item = list_item(line);
        if (item.empty()) {
            spdlog::warn("skipping malformed rubric line: \"{}\"", trim(line));
            continue;
        }
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<Rubric> dedup(const std::vector<Rubric>& candidates, const std::vector<Rubric>& existing_pool,
                          const DedupOptions& options) {
    const bool semantic = options.semantic.enabled;
    if (semantic && !options.embed) {
        throw Error(ErrorCode::config_error, "semantic dedup is enabled but no embedding function is configured");
    }
    std::unordered_set<std::string> seen;
    std::vector<std::vector<double>> vectors;
    for (const auto& r : existing_pool) {
        seen.insert(r.id());
        if (semantic) vectors.push_back(options.embed(r.text()));
    }
    std::vector<Rubric> accepted;
    for (const auto& c : candidates) {
        if (seen.count(c.id())) continue;
        if (semantic) {
            auto v = options.embed(c.text());
            bool near = false;
            for (const auto& u : vectors) {
                if (cosine(u, v) > options.semantic.threshold) {
                    near = true;
                    break;
                }
            }
            if (near) continue;
            vectors.push_back(std::move(v));
        }
        seen.insert(c.id());
        accepted.push_back(c);
    }
    return accepted;
}

// ---------------------------------------------------------------------------
// Seed generation

SeedResult generate_seed_rubrics(const std::vector<PreferencePair>& pairs, TextGenerator& generator,
                                 const ProposerConfig& config, const DedupOptions& dedup_options) {
    config.validate();
    if (pairs.empty()) throw Error(ErrorCode::invalid_argument, "seed generation needs at least one pair");

    std::vector<std::vector<std::string>> extracted(pairs.size());
    std::exception_ptr error;
    const auto done = parallel_for(
        pairs.size(), config.max_parallel_requests,
        [&](std::size_t k) {
            const auto& pair = pairs[k];
            GenerationRequest req;
            req.role = Role::vision_reasoner;
            req.text = render_template(template_for(config, Role::vision_reasoner),
                                       {{"prompt", pair.prompt}, {"preferred", preferred_text(pair.label)}});
            req.image_refs = {pair.image_a, pair.image_b};
            req.pair_id = pair.id;
            req.prompt = pair.prompt;
            req.label = pair.label;
            const auto analysis = call(generator, req, config);
            extracted[k] = extract(generator, config, analysis, pair, 0);
        },
        error);

    std::vector<std::string> pool;
    std::vector<ProposalRecord> records;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        if (!done[k]) continue;
        pool.insert(pool.end(), extracted[k].begin(), extracted[k].end());
        records.push_back({pairs[k].id, Stage::seed, 0, "", extracted[k], {}});
    }
    if (error) {
        throw ProposalFailure("seed generation failed: " + describe(error),
                              dedup(to_rubrics(pool, Origin::seed()), {}, dedup_options), records);
    }
    if (pool.empty()) throw Error(ErrorCode::empty_pool, "no rubric statements were extracted from the seed pairs");

    std::vector<std::string> merged;
    const auto batch = static_cast<std::size_t>(config.merge_batch_size);
    for (std::size_t start = 0; start < pool.size(); start += batch) {
        const std::vector<std::string> slice(pool.begin() + static_cast<long>(start),
                                             pool.begin() + static_cast<long>(std::min(pool.size(), start + batch)));
        GenerationRequest req;
        req.role = Role::rule_merger;
        req.text = render_template(template_for(config, Role::rule_merger), {{"rubrics", bullet_list(slice)}});
        req.rubric_texts = slice;
        try {
            const auto out = parse_statement_list(call(generator, req, config));
            merged.insert(merged.end(), out.begin(), out.end());
        } catch (const Error& e) {
            throw ProposalFailure(std::string("seed merge failed: ") + e.what(),
                                  dedup(to_rubrics(pool, Origin::seed()), {}, dedup_options), records);
        }
    }

    SeedResult result;
    result.rubrics = dedup(to_rubrics(merged, Origin::seed()), {}, dedup_options);
    if (result.rubrics.empty()) throw Error(ErrorCode::empty_pool, "the merger returned no rubric statements");
    std::unordered_set<std::string> kept;
    for (const auto& r : result.rubrics) kept.insert(r.id());
    for (auto& record : records) {
        std::unordered_set<std::string> mine;
        for (const auto& r : to_rubrics(record.extracted_rubrics, Origin::seed())) {
            if (kept.count(r.id()) && mine.insert(r.id()).second) record.accepted_ids.push_back(r.id());
        }
    }
    result.records = std::move(records);
    return result;
}

// ---------------------------------------------------------------------------
// Refinement

Draft draft_from_hard_pair(const PreferencePair& pair, const WeightedRubricSet& retained, TextGenerator& generator,
                           const ProposerConfig& config, int round) {
    std::vector<std::string> texts;
    for (const auto& e : retained.entries()) texts.push_back(e.rubric.text());
    GenerationRequest req;
    req.role = Role::failure_diagnoser;
    req.text = render_template(template_for(config, Role::failure_diagnoser),
                               {{"prompt", pair.prompt}, {"preferred", preferred_text(pair.label)},
                                {"rubrics", bullet_list(texts)}});
    req.image_refs = {pair.image_a, pair.image_b};
    req.pair_id = pair.id;
    req.prompt = pair.prompt;
    req.label = pair.label;
    req.rubric_texts = texts;
    req.round = round;
    Draft draft;
    draft.pair_id = pair.id;
    draft.diagnosis = call(generator, req, config);
    draft.statements = extract(generator, config, draft.diagnosis, pair, round);
    return draft;
}

RefinementResult merge_drafts(const std::vector<Draft>& drafts, const std::vector<Rubric>& working_set, int round,
                              const DedupOptions& dedup_options) {
    RefinementResult result;
    std::vector<Rubric> pool = working_set;
    for (const auto& d : drafts) {
        const auto accepted = dedup(to_rubrics(d.statements, Origin::refined(round)), pool, dedup_options);
        ProposalRecord record{d.pair_id, Stage::refinement, round, d.diagnosis, d.statements, {}};
        for (const auto& r : accepted) {
            record.accepted_ids.push_back(r.id());
            pool.push_back(r);
            result.rubrics.push_back(r);
        }
        result.records.push_back(std::move(record));
    }
    return result;
}

RefinementResult propose_from_hard_pairs(const std::vector<PreferencePair>& pairs, const WeightedRubricSet& retained,
                                         const std::vector<Rubric>& working_set, TextGenerator& generator,
                                         const ProposerConfig& config, int round,
                                         const DedupOptions& dedup_options) {
    config.validate();
    std::vector<Draft> drafts(pairs.size());
    std::exception_ptr error;
    const auto done = parallel_for(
        pairs.size(), config.max_parallel_requests,
        [&](std::size_t k) { drafts[k] = draft_from_hard_pair(pairs[k], retained, generator, config, round); },
        error);
    if (error) {
        std::vector<Draft> finished;
        for (std::size_t k = 0; k < pairs.size(); ++k) {
            if (done[k]) finished.push_back(drafts[k]);
        }
        auto partial = merge_drafts(finished, working_set, round, dedup_options);
        throw ProposalFailure("refinement proposal failed: " + describe(error), std::move(partial.rubrics),
                              std::move(partial.records));
    }
    return merge_drafts(drafts, working_set, round, dedup_options);
}

std::vector<Rubric> propose_from_hard_pair(const PreferencePair& pair, const WeightedRubricSet& retained,
                                           const std::vector<Rubric>& working_set, TextGenerator& generator,
                                           const ProposerConfig& config, int round) {
    return propose_from_hard_pairs({pair}, retained, working_set, generator, config, round).rubrics;
}

// ---------------------------------------------------------------------------
// RemoteGenerator

RemoteGenerator::RemoteGenerator(ProposerConfig config) : config_(std::move(config)) { config_.validate(); }

json RemoteGenerator::request_body(const GenerationRequest& request) const {
    json body{{"model", config_.model_name},
              {"messages", json::array({user_message(request.text, request.image_refs)})},
              {"temperature", config_.temperature},
              {"max_tokens", config_.max_output_tokens}};
    if (config_.thinking_budget > 0 && !config_.thinking_budget_path.empty()) {
        body[json::json_pointer(config_.thinking_budget_path)] = config_.thinking_budget;
    }
    return body;
}

std::string RemoteGenerator::generate(const GenerationRequest& request) {
    const Endpoint endpoint{config_.endpoint_url, config_.api_key_env,
                            std::chrono::milliseconds(config_.request_timeout_ms)};
    json response;
    try {
        response = post_chat_completion(endpoint, request_body(request));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::io_error) throw Error(ErrorCode::proposal_failure, e.what());
        throw;
    }
    const auto content = response.value("/choices/0/message/content"_json_pointer, json());
    if (!content.is_string()) throw Error(ErrorCode::proposal_failure, "generator response without text content");
    return content.get<std::string>();
}

} // namespace autorubric::proposer
