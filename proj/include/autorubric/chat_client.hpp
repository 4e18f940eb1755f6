#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace autorubric {

struct Endpoint {
    // Base URL such as http://localhost:8000/v1; /chat/completions is appended.
    std::string url;
    // Name of the environment variable holding the bearer token; empty for none.
    std::string api_key_env;
    std::chrono::milliseconds timeout{60'000};
};

/// POSTs a chat-completions body and returns the parsed response.
/// Connection errors, 408, 429 and 5xx raise transport-failure (retryable);
/// other non-2xx statuses raise io-error.
nlohmann::json post_chat_completion(const Endpoint& endpoint, const nlohmann::json& body);

/// Runs `call`, retrying transport-failure up to `retries` extra times with
/// exponential backoff starting at `initial_backoff`.
nlohmann::json with_retries(int retries, std::chrono::milliseconds initial_backoff,
                            const std::function<nlohmann::json()>& call);

/// http(s) and data: references pass through; anything else is read from disk
/// and inlined as a base64 data URL.
std::string image_url_for(const std::string& image_ref);

/// User message with text followed by one image part per reference.
nlohmann::json user_message(const std::string& text, const std::vector<std::string>& image_refs);

} // namespace autorubric
