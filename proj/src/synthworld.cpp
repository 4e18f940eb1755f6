#include "autorubric/synthworld.hpp"

#include <algorithm>
#include <set>

#include "autorubric/random.hpp"

namespace autorubric::synth {

namespace {

// Stream tags for keyed draws.
enum : std::uint64_t { kLatent = 1, kPlantedNoise, kDistractorScore, kLabelFlip, kReasoner, kDiagnoser, kWeights };

double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

std::string padded(int i, int width) {
    auto s = std::to_string(i);
    if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
    return s;
}

std::string candidate_lines(const std::vector<std::string>& texts) {
    std::string out;
    for (const auto& t : texts) out += "candidate: " + t + "\n";
    return out;
}

std::string fenced(const std::vector<std::string>& texts) {
    std::string out = "```\n";
    for (const auto& t : texts) out += "- " + t + "\n";
    return out + "```\n";
}

} // namespace

void WorldSpec::validate() const {
    if (num_true < 1) throw Error(ErrorCode::config_error, "world needs at least one planted rubric");
    if (!true_weights.empty() && true_weights.size() != static_cast<std::size_t>(num_true)) {
        throw Error(ErrorCode::config_error, "true_weights must have num_true entries");
    }
    for (double w : true_weights) {
        if (!(w > 0.0)) throw Error(ErrorCode::config_error, "true weights must be positive");
    }
    if (num_distractors < 0 || num_pairs < 1 || num_valid_pairs < 1) {
        throw Error(ErrorCode::config_error, "world sizes must be positive");
    }
    if (!(label_noise >= 0.0 && label_noise < 0.5)) throw Error(ErrorCode::config_error, "label_noise must lie in [0, 0.5)");
    if (!(score_noise >= 0.0)) throw Error(ErrorCode::config_error, "score_noise must be >= 0");
    if (num_seed_planted < 0 || num_seed_planted > num_true) {
        throw Error(ErrorCode::config_error, "num_seed_planted must lie in [0, num_true]");
    }
    if (distractors_per_proposal < 0) throw Error(ErrorCode::config_error, "distractors_per_proposal must be >= 0");
}

void to_json(json& j, const WorldSpec& s) {
    j = json{{"num_true", s.num_true},
             {"true_weights", s.true_weights},
             {"num_distractors", s.num_distractors},
             {"num_pairs", s.num_pairs},
             {"num_valid_pairs", s.num_valid_pairs},
             {"label_noise", s.label_noise},
             {"score_noise", s.score_noise},
             {"seed", s.seed},
             {"num_seed_planted", s.num_seed_planted},
             {"distractors_per_proposal", s.distractors_per_proposal}};
}

void from_json(const json& j, WorldSpec& s) {
    s.num_true = j.value("num_true", s.num_true);
    s.true_weights = j.value("true_weights", s.true_weights);
    s.num_distractors = j.value("num_distractors", s.num_distractors);
    s.num_pairs = j.value("num_pairs", s.num_pairs);
    s.num_valid_pairs = j.value("num_valid_pairs", s.num_valid_pairs);
    s.label_noise = j.value("label_noise", s.label_noise);
    s.score_noise = j.value("score_noise", s.score_noise);
    s.seed = j.value("seed", s.seed);
    s.num_seed_planted = j.value("num_seed_planted", s.num_seed_planted);
    s.distractors_per_proposal = j.value("distractors_per_proposal", s.distractors_per_proposal);
    s.validate();
}

struct WorldData {
    WorldSpec spec;
    std::vector<double> weights;
    std::vector<Rubric> planted;
    std::vector<Rubric> distractors;
    std::unordered_map<std::string, int> planted_index;
    std::vector<PreferencePair> train;
    std::vector<PreferencePair> valid;

    // Decisive satisfaction: near 1 when the criterion holds, near 0 otherwise.
    double latent(const std::string& image_ref, int j) const {
        const auto h = combine_seed({spec.seed, kLatent, hash_string(image_ref), static_cast<std::uint64_t>(j)});
        const double v = 0.2 * unit(mix64(h));
        return (h & 1) ? 1.0 - v : v;
    }

    double margin(const std::string& a, const std::string& b) const {
        double m = 0.0;
        for (int j = 0; j < spec.num_true; ++j) m += weights[static_cast<std::size_t>(j)] * (latent(a, j) - latent(b, j));
        return m;
    }

    // Signed by the label: positive when rubric j argues for the preferred side.
    double contribution(const proposer::GenerationRequest& r, int j) const {
        if (r.image_refs.size() < 2 || !r.label) return 0.0;
        const double d = latent(r.image_refs[0], j) - latent(r.image_refs[1], j);
        return sign(*r.label) * weights[static_cast<std::size_t>(j)] * d;
    }

    std::vector<PreferencePair> make_pairs(const std::string& prefix, int count) const {
        std::vector<PreferencePair> out;
        out.reserve(static_cast<std::size_t>(count));
        const int width = std::max(4, static_cast<int>(std::to_string(count).size()));
        for (int i = 0; i < count; ++i) {
            const std::string id = prefix + "-" + padded(i, width);
            const std::string base = "synth://" + std::to_string(spec.seed) + "/" + id;
            PreferencePair p;
            p.id = id;
            p.prompt = "synthetic prompt " + id;
            double m = 0.0;
            for (int attempt = 0; m == 0.0; ++attempt) {
                const std::string stem = attempt == 0 ? base : base + "~" + std::to_string(attempt);
                p.image_a = stem + "/a";
                p.image_b = stem + "/b";
                m = margin(p.image_a, p.image_b);
            }
            const bool flip = unit(combine_seed({spec.seed, kLabelFlip, hash_string(id)})) < spec.label_noise;
            p.label = (m > 0.0) != flip ? Label::prefer_a : Label::prefer_b;
            out.push_back(std::move(p));
        }
        return out;
    }
};

World::World(WorldSpec spec) {
    spec.validate();
    auto d = std::make_shared<WorldData>();
    d->spec = std::move(spec);
    const auto& s = d->spec;
    d->weights = s.true_weights;
    if (d->weights.empty()) {
        Rng rng(combine_seed({s.seed, kWeights}));
        for (int j = 0; j < s.num_true; ++j) d->weights.push_back(rng.uniform(0.5, 2.0));
    }
    for (int j = 0; j < s.num_true; ++j) {
        d->planted.push_back(Rubric::create("the image satisfies planted criterion " + padded(j, 2)));
        d->planted_index[d->planted.back().id()] = j;
    }
    for (int j = 0; j < s.num_distractors; ++j) {
        d->distractors.push_back(Rubric::create("the image shows distractor feature " + padded(j, 3)));
    }
    d->train = d->make_pairs("train", s.num_pairs);
    d->valid = d->make_pairs("valid", s.num_valid_pairs);
    data_ = std::move(d);
}

const WorldSpec& World::spec() const { return data_->spec; }
const std::vector<double>& World::true_weights() const { return data_->weights; }
const std::vector<Rubric>& World::planted() const { return data_->planted; }
const std::vector<Rubric>& World::distractors() const { return data_->distractors; }

std::vector<std::string> World::planted_ids() const {
    std::vector<std::string> out;
    for (const auto& r : data_->planted) out.push_back(r.id());
    return out;
}

bool World::is_planted(const std::string& rubric_id) const { return data_->planted_index.count(rubric_id) > 0; }
const std::vector<PreferencePair>& World::train() const { return data_->train; }
const std::vector<PreferencePair>& World::valid() const { return data_->valid; }

std::vector<PreferencePair> World::make_pairs(const std::string& prefix, int count) const {
    return data_->make_pairs(prefix, count);
}

double World::latent(const std::string& image_ref, int j) const { return data_->latent(image_ref, j); }

double World::true_margin(const PreferencePair& pair) const { return data_->margin(pair.image_a, pair.image_b); }

std::shared_ptr<SynthJudge> World::judge() const { return std::make_shared<SynthJudge>(data_); }
std::shared_ptr<SynthGenerator> World::generator() const { return std::make_shared<SynthGenerator>(data_); }

World make_world(const WorldSpec& spec) { return World(spec); }

double SynthJudge::score(const judge::JudgeRequest& r) {
    const auto& s = data_->spec;
    const auto rid = hash_string(r.rubric_id);
    const auto img = hash_string(r.image_ref);
    const auto it = data_->planted_index.find(r.rubric_id);
    if (it == data_->planted_index.end()) return unit(combine_seed({s.seed, kDistractorScore, rid, img}));
    double noise = 0.0;
    if (s.score_noise > 0.0) noise = s.score_noise * Rng(combine_seed({s.seed, kPlantedNoise, rid, img})).normal();
    return std::clamp(data_->latent(r.image_ref, it->second) + noise, 0.0, 1.0);
}

std::string SynthJudge::tag() const { return "synth:" + std::to_string(data_->spec.seed); }

std::string SynthGenerator::generate(const proposer::GenerationRequest& r) {
    using proposer::Role;
    const auto& s = data_->spec;
    switch (r.role) {
    case Role::vision_reasoner: {
        std::vector<std::string> out;
        int best = -1;
        double best_c = 0.0;
        for (int j = 0; j < s.num_seed_planted; ++j) {
            const double c = data_->contribution(r, j);
            if (c > best_c) {
                best_c = c;
                best = j;
            }
        }
        if (best >= 0) out.push_back(data_->planted[static_cast<std::size_t>(best)].text());
        if (s.num_distractors > 0) {
            Rng rng(combine_seed({s.seed, kReasoner, hash_string(r.pair_id)}));
            std::set<std::uint64_t> used;
            const auto want = std::min(s.distractors_per_proposal, s.num_distractors);
            while (used.size() < static_cast<std::size_t>(want)) {
                const auto k = rng.below(static_cast<std::uint64_t>(s.num_distractors));
                if (used.insert(k).second) out.push_back(data_->distractors[k].text());
            }
        }
        return candidate_lines(out);
    }
    case Role::failure_diagnoser: {
        std::set<std::string> retained;
        std::uint64_t retained_hash = 0;
        for (const auto& t : r.rubric_texts) retained.insert(rubric_id(t));
        for (const auto& id : retained) retained_hash = combine_seed({retained_hash, hash_string(id)});
        Rng rng(combine_seed({s.seed, kDiagnoser, hash_string(r.pair_id), static_cast<std::uint64_t>(r.round),
                              retained_hash}));
        std::vector<int> open;
        std::vector<double> mass;
        double total = 0.0;
        for (int j = 0; j < s.num_true; ++j) {
            const double c = data_->contribution(r, j);
            if (c > 0.0 && !retained.count(data_->planted[static_cast<std::size_t>(j)].id())) {
                open.push_back(j);
                mass.push_back(c);
                total += c;
            }
        }
        std::vector<std::string> out;
        if (!open.empty()) {
            double u = rng.uniform() * total;
            std::size_t pick = 0;
            while (pick + 1 < open.size() && u >= mass[pick]) u -= mass[pick++];
            out.push_back(data_->planted[static_cast<std::size_t>(open[pick])].text());
        }
        for (int k = 0; k < s.distractors_per_proposal; ++k) {
            out.push_back("the image shows incidental detail " + std::to_string(rng.below(1'000'000'000)) + " from " +
                          r.pair_id);
        }
        return "Diagnosis for " + r.pair_id + ":\n" + candidate_lines(out);
    }
    case Role::rule_extractor: {
        std::vector<std::string> texts;
        std::size_t start = 0;
        const std::string key = "candidate: ";
        while (start < r.diagnosis.size()) {
            auto end = r.diagnosis.find('\n', start);
            if (end == std::string::npos) end = r.diagnosis.size();
            const auto line = r.diagnosis.substr(start, end - start);
            if (line.rfind(key, 0) == 0) texts.push_back(line.substr(key.size()));
            start = end + 1;
        }
        return fenced(texts);
    }
    case Role::rule_merger: return fenced(r.rubric_texts);
    }
    return {};
}

} // namespace autorubric::synth
