#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "autorubric/core.hpp"

namespace autorubric::seedsel {

struct SeedSelectConfig {
    int target_count = 256;
    int num_clusters = 16;
    std::uint64_t rng_seed = 42;

    void validate() const;
};

void to_json(json& j, const SeedSelectConfig& config);
void from_json(const json& j, SeedSelectConfig& config);

struct Clustering {
    std::vector<int> labels;
    int k = 0;  // effective cluster count after degenerate-input reduction
    int iterations = 0;
};

/// k-means with farthest-point seeding from a seeded first center. At most
/// 100 Lloyd iterations; stops when assignments no longer change.
Clustering cluster_prompts(const std::vector<std::vector<double>>& embeddings, int k, std::uint64_t seed);

/// Round-robin over clusters in label order, each cluster ordered by margin
/// descending then id. Returns min(m, n) ids.
std::vector<std::string> select_seed(const std::vector<std::string>& pair_ids, const std::vector<double>& margins,
                                     const std::vector<int>& labels, int m);

using EmbeddingTable = std::map<std::string, std::vector<double>>;
using MarginTable = std::map<std::string, double>;

/// NDJSON {pair_id, vector}.
EmbeddingTable read_embeddings(const std::filesystem::path& path);
/// NDJSON {pair_id, margin}.
MarginTable read_margins(const std::filesystem::path& path);

struct SeedSelection {
    std::vector<std::string> selected;
    Clustering clustering;
    std::vector<std::string> pair_ids;  // input order, aligned with clustering.labels
};

/// Joins pairs with their embedding and margin records. Every missing record
/// is listed in the invalid-argument error.
SeedSelection select_seed_pairs(const std::vector<PreferencePair>& pairs, const EmbeddingTable& embeddings,
                                const MarginTable& margins, const SeedSelectConfig& config);

} // namespace autorubric::seedsel
