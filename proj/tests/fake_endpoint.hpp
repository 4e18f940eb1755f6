#pragma once

#include <mutex>
#include <string>
#include <thread>

#include <json.hpp>

// Include after Eigen users: <resolv.h> defines a _res macro.
#include <httplib.h>

// In-process chat-completions endpoint serving canned responses.
class FakeEndpoint {
public:
    using json = nlohmann::json;

    FakeEndpoint() {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(mutex_);
            last_body = json::parse(req.body);
            last_auth = req.get_header_value("Authorization");
            ++hits;
            if (failures > 0) {
                --failures;
                res.status = 503;
                return;
            }
            res.set_content(reply.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeEndpoint() {
        server_.stop();
        thread_.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

    json reply;
    json last_body;
    std::string last_auth;
    int failures = 0;
    int hits = 0;

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::mutex mutex_;
};

