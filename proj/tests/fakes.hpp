#pragma once

#include <atomic>
#include <string>

#include "autorubric/judge.hpp"
#include "autorubric/random.hpp"

// Deterministic score from (rubric, image): a pure function of the request.
class HashJudge : public autorubric::judge::JudgeBackend {
public:
    double score(const autorubric::judge::JudgeRequest& r) override {
        ++calls;
        const auto h = autorubric::combine_seed({autorubric::hash_string(r.rubric_id), autorubric::hash_string(r.image_ref)});
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    }
    std::string tag() const override { return "hash"; }

    std::atomic<int> calls{0};
};

// Fails with transport errors for the first `failures` calls.
class FlakyJudge : public HashJudge {
public:
    explicit FlakyJudge(int failures) : remaining_(failures) {}

    double score(const autorubric::judge::JudgeRequest& r) override {
        if (remaining_.fetch_sub(1) > 0) {
            throw autorubric::Error(autorubric::ErrorCode::transport_failure, "simulated outage");
        }
        return HashJudge::score(r);
    }

private:
    std::atomic<int> remaining_;
};

inline std::vector<autorubric::PreferencePair> make_pairs(int n, const std::string& prefix = "pair") {
    std::vector<autorubric::PreferencePair> out;
    for (int i = 0; i < n; ++i) {
        const auto id = prefix + std::to_string(i);
        out.push_back({id, "prompt " + std::to_string(i), id + "/a.png", id + "/b.png",
                       i % 3 ? autorubric::Label::prefer_a : autorubric::Label::prefer_b, 0});
    }
    return out;
}

inline std::vector<autorubric::Rubric> make_rubrics(int n, const std::string& prefix = "criterion") {
    std::vector<autorubric::Rubric> out;
    for (int j = 0; j < n; ++j) out.push_back(autorubric::Rubric::create(prefix + " " + std::to_string(j)));
    return out;
}
