#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "autorubric/core.hpp"
#include "autorubric/judge.hpp"
#include "autorubric/proposer.hpp"

namespace autorubric::synth {

struct WorldSpec {
    int num_true = 10;
    // Empty: drawn uniformly from [0.5, 2] with the world seed.
    std::vector<double> true_weights;
    int num_distractors = 40;
    int num_pairs = 256;
    int num_valid_pairs = 128;
    double label_noise = 0.1;
    double score_noise = 0.05;
    std::uint64_t seed = 42;
    // Planted rubrics the seed-stage reasoner may emit; the rest must be found by refinement.
    int num_seed_planted = 5;
    // Distractors attached to every reasoner or diagnoser reply.
    int distractors_per_proposal = 2;

    void validate() const;
};

void to_json(json& j, const WorldSpec& spec);
void from_json(const json& j, WorldSpec& spec);

struct WorldData;

/// Planted-rubric judge: clamp(u + sigma * noise) for planted rubrics, keyed
/// uniform noise for anything else. A pure function of the request.
class SynthJudge : public judge::JudgeBackend {
public:
    explicit SynthJudge(std::shared_ptr<const WorldData> data) : data_(std::move(data)) {}
    double score(const judge::JudgeRequest& request) override;
    std::string tag() const override;

private:
    std::shared_ptr<const WorldData> data_;
};

/// Deterministic generator for the four proposer roles. Reasoner and
/// diagnoser replies are "candidate: <text>" lines; the extractor turns them
/// into a fenced list and the merger echoes its input.
class SynthGenerator : public proposer::TextGenerator {
public:
    explicit SynthGenerator(std::shared_ptr<const WorldData> data) : data_(std::move(data)) {}
    std::string generate(const proposer::GenerationRequest& request) override;

private:
    std::shared_ptr<const WorldData> data_;
};

class World {
public:
    explicit World(WorldSpec spec);

    const WorldSpec& spec() const;
    const std::vector<double>& true_weights() const;
    const std::vector<Rubric>& planted() const;
    const std::vector<Rubric>& distractors() const;
    std::vector<std::string> planted_ids() const;
    bool is_planted(const std::string& rubric_id) const;

    const std::vector<PreferencePair>& train() const;
    const std::vector<PreferencePair>& valid() const;
    /// Additional pairs from the same world under a distinct id prefix.
    std::vector<PreferencePair> make_pairs(const std::string& prefix, int count) const;

    /// Latent satisfaction of planted rubric j on an image: in [0.8, 1] when the
    /// criterion holds, [0, 0.2] otherwise, each with probability one half.
    double latent(const std::string& image_ref, int j) const;
    double true_margin(const PreferencePair& pair) const;

    std::shared_ptr<SynthJudge> judge() const;
    std::shared_ptr<SynthGenerator> generator() const;

private:
    std::shared_ptr<const WorldData> data_;
};

World make_world(const WorldSpec& spec);

} // namespace autorubric::synth
