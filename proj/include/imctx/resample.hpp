#pragma once

// Resampled retrieval pools: inverse-density, balanced downsampling, SMOTER.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imctx/common.hpp"
#include "imctx/data.hpp"
#include "imctx/retrieval.hpp"

namespace imctx {

enum class Strategy { Vanilla, Downsample, Inverse, Smoter, Augmented };

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::Vanilla: return "vanilla";
        case Strategy::Downsample: return "downsample";
        case Strategy::Inverse: return "inverse";
        case Strategy::Smoter: return "smoter";
        case Strategy::Augmented: return "augmented";
    }
    return "?";
}

inline Strategy parse_strategy(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "vanilla") return Strategy::Vanilla;
    if (s == "downsample" || s == "downsampling") return Strategy::Downsample;
    if (s == "inverse") return Strategy::Inverse;
    if (s == "smoter") return Strategy::Smoter;
    if (s == "augmented") return Strategy::Augmented;
    throw UsageError("unknown strategy: " + s);
}

inline constexpr Strategy kAllStrategies[] = {Strategy::Vanilla, Strategy::Downsample, Strategy::Inverse,
                                              Strategy::Smoter, Strategy::Augmented};

struct ResamplePlan {
    std::vector<std::size_t> targets;
    Strategy strategy = Strategy::Vanilla;
    std::uint64_t seed = 0;
    /// Degenerate cases handled with a fallback (e.g. SMOTER duplication).
    std::size_t warnings = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["strategy"] = to_string(strategy);
        j["seed"] = seed;
        j["targets"] = targets;
        j["warnings"] = warnings;
        return j;
    }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> members_by_bin(const Dataset& train, const BinStats& bins) {
    std::vector<std::vector<std::size_t>> members(bins.num_bins());
    for (std::size_t i = 0; i < train.size(); ++i) members[bins.bin_of(train.samples[i].label)].push_back(i);
    for (std::size_t b = 0; b < members.size(); ++b)
        if (members[b].size() != bins.counts[b])
            throw DataError("bin statistics were not computed from this training set (bin " + std::to_string(b) + ")");
    return members;
}

/// Uniform sample of `take` indices from `pool`: without replacement when
/// take <= |pool|, with replacement otherwise.
inline std::vector<std::size_t> draw(std::vector<std::size_t> pool, std::size_t take, std::mt19937_64& rng) {
    std::vector<std::size_t> out;
    out.reserve(take);
    if (take <= pool.size()) {
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
            out.push_back(pool[i]);
        }
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t i = 0; i < take; ++i) out.push_back(pool[pick(rng)]);
    }
    return out;
}

}  // namespace detail

/// Per-bin targets round(n · w_b) with w_b = (1/c_b) / Σ 1/c_b' over nonempty bins.
inline std::vector<std::size_t> inverse_density_targets(const std::vector<std::size_t>& counts) {
    std::size_t n = 0;
    double denom = 0.0;
    for (auto c : counts) {
        n += c;
        if (c > 0) denom += 1.0 / static_cast<double>(c);
    }
    std::vector<std::size_t> t(counts.size(), 0);
    if (n == 0) return t;
    for (std::size_t b = 0; b < counts.size(); ++b) {
        if (counts[b] == 0) continue;
        double w = (1.0 / static_cast<double>(counts[b])) / denom;
        t[b] = static_cast<std::size_t>(std::llround(w * static_cast<double>(n)));
    }
    return t;
}

/// Companion pool whose bin counts are inversely proportional to the training
/// counts. Oversampled bins are drawn with replacement.
inline Dataset inverse_density_dataset(const Dataset& train, const BinStats& bins, std::uint64_t seed,
                                       ResamplePlan* plan = nullptr) {
    if (train.empty()) throw DataError("cannot resample an empty training set");
    auto members = detail::members_by_bin(train, bins);
    auto targets = inverse_density_targets(bins.counts);
    auto rng = make_rng(seed, 0x1a7e45);
    Dataset out = train.like();
    for (std::size_t b = 0; b < members.size(); ++b) {
        if (targets[b] == 0) continue;
        for (auto i : detail::draw(members[b], targets[b], rng)) out.add(train.samples[i]);
    }
    if (plan) *plan = {targets, Strategy::Inverse, seed, 0};
    return out;
}

/// Caps every nonempty bin at the smallest nonempty bin count. Output keeps
/// training order.
inline Dataset downsample_balanced(const Dataset& train, const BinStats& bins, std::uint64_t seed,
                                   ResamplePlan* plan = nullptr) {
    if (train.empty()) throw DataError("cannot resample an empty training set");
    auto members = detail::members_by_bin(train, bins);
    std::size_t c_min = train.size();
    for (auto c : bins.counts)
        if (c > 0) c_min = std::min(c_min, c);
    auto rng = make_rng(seed, 0xd0a5);
    std::vector<char> keep(train.size(), 0);
    std::vector<std::size_t> targets(bins.num_bins(), 0);
    for (std::size_t b = 0; b < members.size(); ++b) {
        if (members[b].empty()) continue;
        targets[b] = c_min;
        for (auto i : detail::draw(members[b], c_min, rng)) keep[i] = 1;
    }
    Dataset out = train.like();
    for (std::size_t i = 0; i < train.size(); ++i)
        if (keep[i]) out.add(train.samples[i]);
    if (plan) *plan = {targets, Strategy::Downsample, seed, 0};
    return out;
}

/// Convex combination (1−u)·a + u·b of two samples.
inline Sample interpolate(const Sample& a, const Sample& b, double u) {
    Sample s;
    s.features.resize(a.features.size());
    for (std::size_t j = 0; j < a.features.size(); ++j) s.features[j] = (1.0 - u) * a.features[j] + u * b.features[j];
    s.label = (1.0 - u) * a.label + u * b.label;
    return s;
}

inline constexpr std::size_t kSmoterBudgetFactor = 5;

/// Number of synthetic samples SMOTER adds to a Few bin with `count` members:
/// enough to reach the Medium threshold, at most 5× the original count.
constexpr std::size_t smoter_need(std::size_t count) {
    if (count == 0 || count >= kFewThreshold) return 0;
    return std::min(kFewThreshold - count, kSmoterBudgetFactor * count);
}

/// Grows Few-region bins with synthetic samples interpolated between a Few
/// sample and one of its `neighbors_k` nearest Few-region samples (Euclidean,
/// raw features). Output is the training set followed by the synthetics.
inline Dataset smoter_augment(const Dataset& train, const BinStats& bins, std::uint64_t seed,
                              std::size_t neighbors_k = 5, ResamplePlan* plan = nullptr) {
    if (train.empty()) throw DataError("cannot resample an empty training set");
    if (neighbors_k == 0) throw UsageError("SMOTER needs neighbors_k >= 1");
    auto members = detail::members_by_bin(train, bins);

    std::vector<std::size_t> few;  // training indices of Few-region samples
    for (std::size_t b = 0; b < members.size(); ++b)
        if (!members[b].empty() && bins.regions[b] == ShotRegion::Few)
            few.insert(few.end(), members[b].begin(), members[b].end());
    std::sort(few.begin(), few.end());

    Dataset out = train;
    std::vector<std::size_t> targets(bins.num_bins(), 0);
    std::size_t warnings = 0;
    if (few.empty()) {
        if (plan) *plan = {targets, Strategy::Smoter, seed, 0};
        return out;
    }

    std::vector<Vector> rows;
    Vector labels;
    for (auto i : few) {
        rows.push_back(train.samples[i].features);
        labels.push_back(train.samples[i].label);
    }
    RetrievalIndex few_index(rows, labels, Metric::Euclidean);
    std::size_t next_id = 0;
    for (const auto& s : train.samples) next_id = std::max(next_id, s.id + 1);

    auto rng = make_rng(seed, 0x5307e4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t b = 0; b < members.size(); ++b) {
        const auto& m = members[b];
        if (m.empty() || bins.regions[b] != ShotRegion::Few) continue;
        const std::size_t need = smoter_need(m.size());
        targets[b] = m.size() + need;
        for (std::size_t j = 0; j < need; ++j) {
            const Sample& base = train.samples[m[j % m.size()]];
            // Position of `base` in the Few index.
            auto pos = static_cast<std::size_t>(std::lower_bound(few.begin(), few.end(), m[j % m.size()]) - few.begin());
            auto nn = few_index.knn_transformed(rows[pos], std::min(neighbors_k + 1, few.size()));
            std::vector<std::size_t> candidates;
            for (const auto& n : nn)
                if (n.row != pos && candidates.size() < neighbors_k) candidates.push_back(n.row);
            Sample syn;
            if (candidates.empty()) {
                ++warnings;
                syn = base;
            } else {
                std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
                const Sample& other = train.samples[few[candidates[pick(rng)]]];
                syn = interpolate(base, other, unit(rng));
            }
            syn.id = next_id++;
            out.add(std::move(syn));
        }
    }
    if (plan) *plan = {targets, Strategy::Smoter, seed, warnings};
    return out;
}

struct Pools {
    Dataset primary;
    std::optional<Dataset> inverse;
    ResamplePlan plan;
};

/// Retrieval pools for a sampling strategy. Only Augmented yields a second pool.
inline Pools build_pools(const Dataset& train, Strategy strategy, const BinStats& bins, std::uint64_t seed) {
    Pools p;
    p.plan.strategy = strategy;
    p.plan.seed = seed;
    switch (strategy) {
        case Strategy::Vanilla:
            p.primary = train;
            p.plan.targets = bins.counts;
            break;
        case Strategy::Downsample: p.primary = downsample_balanced(train, bins, seed, &p.plan); break;
        case Strategy::Inverse: p.primary = inverse_density_dataset(train, bins, seed, &p.plan); break;
        case Strategy::Smoter: p.primary = smoter_augment(train, bins, seed, 5, &p.plan); break;
        case Strategy::Augmented:
            p.primary = train;
            p.inverse = inverse_density_dataset(train, bins, seed, &p.plan);
            p.plan.strategy = Strategy::Augmented;
            break;
    }
    return p;
}

}  // namespace imctx
