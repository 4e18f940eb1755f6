#include "autorubric/mining.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "autorubric/random.hpp"

namespace autorubric::mining {

void MiningConfig::validate() const {
    if (hard_pairs_per_round < 1) throw Error(ErrorCode::config_error, "hard_pairs_per_round must be >= 1");
    if (!(margin_percentile > 0.0 && margin_percentile < 1.0)) {
        throw Error(ErrorCode::config_error, "margin_percentile must lie in (0,1)");
    }
    if (!(reward_quantile > 0.0 && reward_quantile < 1.0)) {
        throw Error(ErrorCode::config_error, "reward_quantile must lie in (0,1)");
    }
    if (stale_cap < 1) throw Error(ErrorCode::config_error, "stale_cap must be >= 1");
}

std::string to_string(Bucket bucket) {
    switch (bucket) {
    case Bucket::wrong_small: return "wrong_small";
    case Bucket::wrong_large: return "wrong_large";
    case Bucket::high_reward_wrong: return "high_reward_wrong";
    }
    return "unknown";
}

double quantile(std::vector<double> values, double p) {
    if (values.empty()) throw Error(ErrorCode::undefined_metric, "quantile of an empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::invalid_argument, "quantile level outside [0,1]");
    std::sort(values.begin(), values.end());
    const double h = static_cast<double>(values.size() - 1) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Buckets partition(const std::vector<MisrankedPair>& misranked, const std::vector<double>& all_image_rewards,
                  const MiningConfig& config) {
    config.validate();
    Buckets out;
    if (misranked.empty()) return out;

    std::vector<double> abs_margins;
    for (const auto& m : misranked) abs_margins.push_back(std::abs(m.margin));
    out.margin_threshold = quantile(abs_margins, config.margin_percentile);
    out.reward_threshold = all_image_rewards.empty() ? 0.0 : quantile(all_image_rewards, config.reward_quantile);

    for (const auto& m : misranked) {
        BucketAssignment a{m.pair_id, Bucket::wrong_large, std::abs(m.margin), m.reward_a, m.reward_b};
        if (!all_image_rewards.empty() && m.reward_a >= out.reward_threshold && m.reward_b >= out.reward_threshold) {
            a.bucket = Bucket::high_reward_wrong;
        } else if (a.abs_margin < out.margin_threshold) {
            a.bucket = Bucket::wrong_small;
        }
        out.members[static_cast<int>(a.bucket)].push_back(std::move(a));
    }
    return out;
}

PhaseWeights phase_weights(int round, int total_rounds) {
    if (total_rounds < 1 || round < 0 || round >= total_rounds) {
        throw Error(ErrorCode::out_of_range,
                    "round " + std::to_string(round) + " outside [0, " + std::to_string(total_rounds) + ")");
    }
    if (round < 3) return {0.6, 0.4, 0.0};
    if (round < total_rounds - 1) return {0.5, 0.3, 0.2};
    return {0.3, 0.3, 0.4};
}

std::array<int, 3> allocate(const std::array<int, 3>& capacity, const PhaseWeights& weights, int k) {
    std::array<int, 3> alloc{0, 0, 0};
    int remaining = std::min(k, capacity[0] + capacity[1] + capacity[2]);
    while (remaining > 0) {
        std::array<double, 3> share{0.0, 0.0, 0.0};
        double total = 0.0;
        for (int b = 0; b < 3; ++b) {
            if (capacity[b] > alloc[b] && weights[b] > 0.0) share[b] = weights[b];
            total += share[b];
        }
        // Only zero-weight buckets have room left: split by spare capacity.
        if (total == 0.0) {
            for (int b = 0; b < 3; ++b) {
                share[b] = static_cast<double>(capacity[b] - alloc[b]);
                total += share[b];
            }
        }
        std::array<int, 3> take{0, 0, 0};
        std::array<double, 3> frac{0.0, 0.0, 0.0};
        int given = 0;
        for (int b = 0; b < 3; ++b) {
            const double exact = remaining * share[b] / total;
            take[b] = static_cast<int>(std::floor(exact));
            frac[b] = share[b] > 0.0 ? exact - take[b] : -1.0;
            given += take[b];
        }
        std::array<int, 3> order{0, 1, 2};
        std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return frac[x] > frac[y]; });
        for (int n = 0; given < remaining; n = (n + 1) % 3) {
            if (share[order[n]] <= 0.0) continue;
            ++take[order[n]];
            ++given;
        }
        for (int b = 0; b < 3; ++b) {
            const int granted = std::min(take[b], capacity[b] - alloc[b]);
            alloc[b] += granted;
            remaining -= granted;
        }
    }
    return alloc;
}

std::vector<std::string> sample_hard_pairs(const Buckets& buckets, const PhaseWeights& weights,
                                           const MiningConfig& config, SelectionCounts& selection_counts,
                                           std::uint64_t seed) {
    config.validate();
    const double sum = weights[0] + weights[1] + weights[2];
    if (std::abs(sum - 1.0) > 1e-9 || *std::min_element(weights.begin(), weights.end()) < 0.0) {
        throw Error(ErrorCode::invalid_argument, "phase weights must be nonnegative and sum to 1");
    }

    std::array<std::vector<std::string>, 3> eligible;
    std::array<int, 3> capacity{};
    for (int b = 0; b < 3; ++b) {
        for (const auto& a : buckets.members[b]) {
            auto it = selection_counts.find(a.pair_id);
            const int count = it == selection_counts.end() ? 0 : it->second;
            if (count < config.stale_cap) eligible[b].push_back(a.pair_id);
        }
        std::sort(eligible[b].begin(), eligible[b].end());
        eligible[b].erase(std::unique(eligible[b].begin(), eligible[b].end()), eligible[b].end());
        capacity[b] = static_cast<int>(eligible[b].size());
    }

    const auto alloc = allocate(capacity, weights, config.hard_pairs_per_round);
    Rng rng(seed);
    std::vector<std::string> out;
    for (int b = 0; b < 3; ++b) {
        auto& pool = eligible[b];
        for (int n = 0; n < alloc[b]; ++n) {
            const auto pick = n + static_cast<std::size_t>(rng.below(pool.size() - static_cast<std::size_t>(n)));
            std::swap(pool[static_cast<std::size_t>(n)], pool[pick]);
            out.push_back(pool[static_cast<std::size_t>(n)]);
        }
    }
    for (const auto& id : out) ++selection_counts[id];
    return out;
}

void to_json(json& j, const MiningConfig& config) {
    j = json{{"hard_pairs_per_round", config.hard_pairs_per_round},
             {"margin_percentile", config.margin_percentile},
             {"reward_quantile", config.reward_quantile},
             {"stale_cap", config.stale_cap}};
}

void from_json(const json& j, MiningConfig& config) {
    config.hard_pairs_per_round = j.value("hard_pairs_per_round", config.hard_pairs_per_round);
    config.margin_percentile = j.value("margin_percentile", config.margin_percentile);
    config.reward_quantile = j.value("reward_quantile", config.reward_quantile);
    config.stale_cap = j.value("stale_cap", config.stale_cap);
    config.validate();
}

} // namespace autorubric::mining
