#include "autorubric/seedsel.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "autorubric/random.hpp"
#include "autorubric/text.hpp"

namespace autorubric::seedsel {

namespace {

constexpr int kMaxIterations = 100;

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        const double x = a[t] - b[t];
        d += x * x;
    }
    return d;
}

} // namespace

void SeedSelectConfig::validate() const {
    if (target_count < 1) throw Error(ErrorCode::config_error, "seed target_count must be >= 1");
    if (num_clusters < 1) throw Error(ErrorCode::config_error, "seed num_clusters must be >= 1");
}

void to_json(json& j, const SeedSelectConfig& c) {
    j = json{{"target_count", c.target_count}, {"num_clusters", c.num_clusters}, {"rng_seed", c.rng_seed}};
}

void from_json(const json& j, SeedSelectConfig& c) {
    c.target_count = j.value("target_count", c.target_count);
    c.num_clusters = j.value("num_clusters", c.num_clusters);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.validate();
}

Clustering cluster_prompts(const std::vector<std::vector<double>>& x, int k, std::uint64_t seed) {
    if (x.empty()) throw Error(ErrorCode::invalid_argument, "cannot cluster zero embeddings");
    if (k < 1) throw Error(ErrorCode::invalid_argument, "cluster count must be >= 1");
    const std::size_t n = x.size();
    const std::size_t dim = x[0].size();
    for (const auto& v : x) {
        if (v.size() != dim) throw Error(ErrorCode::dimension_mismatch, "embedding vectors differ in dimension");
    }
    const auto distinct = std::set<std::vector<double>>(x.begin(), x.end()).size();
    if (static_cast<std::size_t>(k) > distinct) {
        spdlog::warn("only {} distinct embeddings; reducing k from {} to {}", distinct, k, distinct);
        k = static_cast<int>(distinct);
    }

    Rng rng(seed);
    std::vector<std::vector<double>> centers{x[rng.below(n)]};
    std::vector<double> nearest(n);
    for (std::size_t i = 0; i < n; ++i) nearest[i] = squared_distance(x[i], centers[0]);
    while (centers.size() < static_cast<std::size_t>(k)) {
        const auto far = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
        centers.push_back(x[far]);
        for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], squared_distance(x[i], centers.back()));
    }

    Clustering out;
    out.k = k;
    out.labels.assign(n, -1);
    for (int it = 0; it < kMaxIterations; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double d = squared_distance(x[i], centers[static_cast<std::size_t>(c)]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (out.labels[i] != best) {
                out.labels[i] = best;
                changed = true;
            }
        }
        out.iterations = it + 1;
        if (!changed) break;
        std::vector<std::vector<double>> sums(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
        std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<std::size_t>(out.labels[i]);
            ++counts[c];
            for (std::size_t t = 0; t < dim; ++t) sums[c][t] += x[i][t];
        }
        for (std::size_t c = 0; c < centers.size(); ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t t = 0; t < dim; ++t) centers[c][t] = sums[c][t] / static_cast<double>(counts[c]);
        }
    }
    return out;
}

std::vector<std::string> select_seed(const std::vector<std::string>& pair_ids, const std::vector<double>& margins,
                                     const std::vector<int>& labels, int m) {
    if (pair_ids.size() != margins.size() || pair_ids.size() != labels.size()) {
        throw Error(ErrorCode::dimension_mismatch, "pair ids, margins and labels must align");
    }
    if (m < 1) throw Error(ErrorCode::invalid_argument, "seed target count must be >= 1");
    const std::size_t n = pair_ids.size();
    if (static_cast<std::size_t>(m) > n) {
        spdlog::warn("requested {} seed pairs but only {} are available; selecting all", m, n);
    }
    std::map<int, std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(margins[i] >= 0.0)) throw Error(ErrorCode::invalid_argument, "margin for " + pair_ids[i] + " is negative");
        clusters[labels[i]].push_back(i);
    }
    for (auto& [label, members] : clusters) {
        std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
            if (margins[a] != margins[b]) return margins[a] > margins[b];
            return pair_ids[a] < pair_ids[b];
        });
    }
    const std::size_t target = std::min(n, static_cast<std::size_t>(m));
    std::vector<std::string> out;
    for (std::size_t depth = 0; out.size() < target; ++depth) {
        for (const auto& [label, members] : clusters) {
            if (depth < members.size() && out.size() < target) out.push_back(pair_ids[members[depth]]);
        }
    }
    return out;
}

EmbeddingTable read_embeddings(const std::filesystem::path& path) {
    EmbeddingTable out;
    for (const auto& rec : read_ndjson(path)) {
        out[rec.at("pair_id").get<std::string>()] = rec.at("vector").get<std::vector<double>>();
    }
    return out;
}

MarginTable read_margins(const std::filesystem::path& path) {
    MarginTable out;
    for (const auto& rec : read_ndjson(path)) {
        out[rec.at("pair_id").get<std::string>()] = rec.at("margin").get<double>();
    }
    return out;
}

SeedSelection select_seed_pairs(const std::vector<PreferencePair>& pairs, const EmbeddingTable& embeddings,
                                const MarginTable& margins, const SeedSelectConfig& config) {
    config.validate();
    std::vector<std::string> problems;
    SeedSelection out;
    std::vector<std::vector<double>> vectors;
    std::vector<double> margin_values;
    for (const auto& p : pairs) {
        const auto e = embeddings.find(p.id);
        const auto m = margins.find(p.id);
        if (e == embeddings.end()) problems.push_back(p.id + ": no embedding record");
        if (m == margins.end()) problems.push_back(p.id + ": no margin record");
        if (e == embeddings.end() || m == margins.end()) continue;
        out.pair_ids.push_back(p.id);
        vectors.push_back(e->second);
        margin_values.push_back(m->second);
    }
    if (!problems.empty()) {
        std::string msg = std::to_string(problems.size()) + " missing record(s):";
        for (const auto& p : problems) msg += "\n  " + p;
        throw Error(ErrorCode::invalid_argument, msg);
    }
    out.clustering = cluster_prompts(vectors, std::min<int>(config.num_clusters, static_cast<int>(vectors.size())),
                                     config.rng_seed);
    out.selected = select_seed(out.pair_ids, margin_values, out.clustering.labels, config.target_count);
    return out;
}

} // namespace autorubric::seedsel
