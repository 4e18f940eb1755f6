#include "autorubric/chat_client.hpp"

#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "autorubric/error.hpp"
#include "autorubric/text.hpp"

namespace autorubric {

namespace {

struct SplitUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

SplitUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorCode::config_error, "endpoint URL lacks a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, ""};
    std::string path = url.substr(path_start);
    while (!path.empty() && path.back() == '/') path.pop_back();
    return {url.substr(0, path_start), path};
}

bool retryable(int status) { return status == 408 || status == 429 || status >= 500; }

std::string mime_for(const std::filesystem::path& path) {
    const auto ext = to_lower(path.extension().string());
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".webp") return "image/webp";
    if (ext == ".gif") return "image/gif";
    return "image/png";
}

} // namespace

nlohmann::json post_chat_completion(const Endpoint& endpoint, const nlohmann::json& body) {
    const auto url = split_url(endpoint.url);
    httplib::Client client(url.origin);
    const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(endpoint.timeout);
    const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(endpoint.timeout - seconds);
    client.set_connection_timeout(seconds.count(), micros.count());
    client.set_read_timeout(seconds.count(), micros.count());
    client.set_write_timeout(seconds.count(), micros.count());

    httplib::Headers headers;
    if (!endpoint.api_key_env.empty()) {
        if (const char* key = std::getenv(endpoint.api_key_env.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
    }
    auto res = client.Post(url.path + "/chat/completions", headers, body.dump(), "application/json");
    if (!res) {
        throw Error(ErrorCode::transport_failure,
                    "request to " + endpoint.url + " failed: " + httplib::to_string(res.error()));
    }
    if (res->status < 200 || res->status >= 300) {
        const auto code = retryable(res->status) ? ErrorCode::transport_failure : ErrorCode::io_error;
        throw Error(code, "HTTP " + std::to_string(res->status) + " from " + endpoint.url + ": " +
                              res->body.substr(0, 200));
    }
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::transport_failure, std::string("malformed JSON response: ") + e.what());
    }
}

nlohmann::json with_retries(int retries, std::chrono::milliseconds initial_backoff,
                            const std::function<nlohmann::json()>& call) {
    auto delay = initial_backoff;
    for (int attempt = 0;; ++attempt) {
        try {
            return call();
        } catch (const Error& e) {
            if (e.code() != ErrorCode::transport_failure || attempt >= retries) throw;
            spdlog::warn("{} (retry {}/{})", e.what(), attempt + 1, retries);
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }
}

std::string image_url_for(const std::string& image_ref) {
    if (image_ref.rfind("http://", 0) == 0 || image_ref.rfind("https://", 0) == 0 ||
        image_ref.rfind("data:", 0) == 0) {
        return image_ref;
    }
    const std::filesystem::path path(image_ref);
    return "data:" + mime_for(path) + ";base64," + base64_encode(read_file(path));
}

nlohmann::json user_message(const std::string& text, const std::vector<std::string>& image_refs) {
    nlohmann::json content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", text}});
    for (const auto& ref : image_refs) {
        content.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url_for(ref)}}}});
    }
    return {{"role", "user"}, {"content", std::move(content)}};
}

} // namespace autorubric
