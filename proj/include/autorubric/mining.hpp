#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "autorubric/core.hpp"

namespace autorubric::mining {

struct MiningConfig {
    int hard_pairs_per_round = 16;
    double margin_percentile = 0.3;
    double reward_quantile = 0.7;
    // Pairs whose selection count has reached this value are never mined again.
    int stale_cap = 4;

    void validate() const;
};

enum class Bucket { wrong_small = 0, wrong_large = 1, high_reward_wrong = 2 };

std::string to_string(Bucket bucket);

struct MisrankedPair {
    std::string pair_id;
    double margin = 0.0;
    double reward_a = 0.0;
    double reward_b = 0.0;
};

struct BucketAssignment {
    std::string pair_id;
    Bucket bucket = Bucket::wrong_small;
    double abs_margin = 0.0;
    double reward_a = 0.0;
    double reward_b = 0.0;
};

struct Buckets {
    std::array<std::vector<BucketAssignment>, 3> members;
    double reward_threshold = 0.0;
    double margin_threshold = 0.0;

    const std::vector<BucketAssignment>& operator[](Bucket b) const { return members[static_cast<int>(b)]; }
    std::size_t total() const { return members[0].size() + members[1].size() + members[2].size(); }
};

/// Linear interpolation between order statistics at h = (n - 1) p.
double quantile(std::vector<double> values, double p);

/// High-reward precedence, then |margin| < margin threshold, else wrong_large.
Buckets partition(const std::vector<MisrankedPair>& misranked, const std::vector<double>& all_image_rewards,
                  const MiningConfig& config);

using PhaseWeights = std::array<double, 3>;

/// Curriculum schedule over 0-based rounds. Throws out-of-range when round >= total_rounds.
PhaseWeights phase_weights(int round, int total_rounds);

/// Per-bucket sample sizes summing to min(K, candidates), split by weight and
/// capped by bucket capacity; shortfalls move to the other buckets by weight.
std::array<int, 3> allocate(const std::array<int, 3>& capacity, const PhaseWeights& weights, int k);

using SelectionCounts = std::map<std::string, int>;

/// Excludes capped pairs, samples without replacement within buckets, and
/// increments the counts of the returned pairs. Pure given `seed`.
std::vector<std::string> sample_hard_pairs(const Buckets& buckets, const PhaseWeights& weights,
                                           const MiningConfig& config, SelectionCounts& selection_counts,
                                           std::uint64_t seed);

void to_json(json& j, const MiningConfig& config);
void from_json(const json& j, MiningConfig& config);

} // namespace autorubric::mining
