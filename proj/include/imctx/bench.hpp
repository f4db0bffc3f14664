#pragma once

// Synthetic skewed regression benchmark with an exponentially decaying label
// density. Labels in bin b are uniform on [b, b+1); features are
// [y / B, y² / B²] plus Gaussian noise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "imctx/common.hpp"
#include "imctx/data.hpp"

namespace imctx {

struct BenchConfig {
    std::size_t bins = 12;
    double ratio = 0.55;
    /// Training count of bin 0; bin b gets max(1, round(base · ratio^b)).
    std::size_t base_count = 1000;
    double noise = 0.05;
    /// Balanced test set size per bin.
    std::size_t test_per_bin = 20;
    std::uint64_t seed = 0;

    void validate() const {
        if (bins == 0) throw UsageError("benchmark needs at least one bin");
        if (!(ratio > 0.0 && ratio <= 1.0)) throw UsageError("benchmark ratio must lie in (0, 1]");
        if (base_count == 0) throw UsageError("benchmark base count must be positive");
        if (!(noise >= 0.0)) throw UsageError("benchmark noise must be non-negative");
    }

    std::vector<std::size_t> train_counts() const {
        std::vector<std::size_t> c;
        for (std::size_t b = 0; b < bins; ++b) {
            auto v = std::llround(static_cast<double>(base_count) * std::pow(ratio, static_cast<double>(b)));
            c.push_back(static_cast<std::size_t>(std::max<long long>(1, v)));
        }
        return c;
    }

    /// Bin configuration that reproduces the generating bins.
    BinConfig bin_config() const {
        return BinConfig::count(bins).with_range(0.0, static_cast<double>(bins));
    }

    nlohmann::ordered_json to_json() const {
        return {{"bins", bins},   {"ratio", ratio},       {"base_count", base_count},
                {"noise", noise}, {"test_per_bin", test_per_bin}, {"seed", seed}};
    }
};

struct Bench {
    Dataset train;
    Dataset test;
};

namespace detail {
inline Dataset bench_draw(const BenchConfig& c, const std::vector<std::size_t>& counts, std::mt19937_64& rng) {
    Dataset ds;
    ds.feature_dim = 2;
    ds.feature_names = {"x0", "x1"};
    ds.label_name = "y";
    const double B = static_cast<double>(c.bins);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> eps(0.0, c.noise > 0.0 ? c.noise : 1.0);
    for (std::size_t b = 0; b < counts.size(); ++b) {
        for (std::size_t i = 0; i < counts[b]; ++i) {
            const double y = static_cast<double>(b) + unit(rng);
            Sample s;
            s.label = y;
            s.features = {y / B, y * y / (B * B)};
            if (c.noise > 0.0)
                for (auto& f : s.features) f += eps(rng);
            s.id = ds.size();
            ds.add(std::move(s));
        }
    }
    return ds;
}
}  // namespace detail

inline Bench generate_bench(const BenchConfig& c) {
    c.validate();
    auto rng = make_rng(c.seed, 0xbe7c);
    Bench out;
    out.train = detail::bench_draw(c, c.train_counts(), rng);
    if (c.test_per_bin > 0) out.test = detail::bench_draw(c, std::vector<std::size_t>(c.bins, c.test_per_bin), rng);
    return out;
}

}  // namespace imctx
