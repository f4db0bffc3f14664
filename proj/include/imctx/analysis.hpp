#pragma once

// Error metrics, per-region reports, bias/variance bound curves and
// empirical error-vs-k curves.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "imctx/common.hpp"
#include "imctx/data.hpp"
#include "imctx/predict.hpp"
#include "imctx/retrieval.hpp"

namespace imctx {

// ---------------------------------------------------------------------------
// Metrics

namespace detail {
inline void check_pair(std::span<const double> y, std::span<const double> yhat) {
    if (y.size() != yhat.size())
        throw UsageError("metric inputs differ in length (" + std::to_string(y.size()) + " vs " +
                         std::to_string(yhat.size()) + ")");
    if (y.empty()) throw UsageError("metric inputs are empty");
}
}  // namespace detail

inline double metric_mae(std::span<const double> y, std::span<const double> yhat) {
    detail::check_pair(y, yhat);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
    return s / static_cast<double>(y.size());
}

inline double metric_mse(std::span<const double> y, std::span<const double> yhat) {
    detail::check_pair(y, yhat);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    return s / static_cast<double>(y.size());
}

inline double metric_rmse(std::span<const double> y, std::span<const double> yhat) {
    return std::sqrt(metric_mse(y, yhat));
}

inline constexpr double kGmFloor = 1e-10;

/// Geometric mean of |e_i|, computed in log space; exact hits are floored at 1e−10.
inline double metric_gm(std::span<const double> y, std::span<const double> yhat) {
    detail::check_pair(y, yhat);
    // Extended precision keeps the log-space round trip exact for hand values.
    long double s = 0.0L;
    for (std::size_t i = 0; i < y.size(); ++i) s += std::log(static_cast<long double>(std::max(std::abs(y[i] - yhat[i]), kGmFloor)));
    return static_cast<double>(std::exp(s / static_cast<long double>(y.size())));
}

// ---------------------------------------------------------------------------
// Per-region reports

enum class Region { All, Many, Medium, Few };
inline constexpr std::array<Region, 4> kRegions = {Region::All, Region::Many, Region::Medium, Region::Few};

inline const char* to_string(Region r) {
    switch (r) {
        case Region::All: return "all";
        case Region::Many: return "many";
        case Region::Medium: return "medium";
        case Region::Few: return "few";
    }
    return "?";
}

inline Region to_region(ShotRegion s) {
    switch (s) {
        case ShotRegion::Many: return Region::Many;
        case ShotRegion::Medium: return Region::Medium;
        case ShotRegion::Few: return Region::Few;
    }
    return Region::All;
}

struct MetricSet {
    double mae = 0.0, rmse = 0.0, mse = 0.0, gm = 0.0;
};

inline MetricSet compute_metrics(std::span<const double> y, std::span<const double> yhat) {
    return {metric_mae(y, yhat), metric_rmse(y, yhat), metric_mse(y, yhat), metric_gm(y, yhat)};
}

struct RegionMetrics {
    std::array<std::size_t, 4> counts{};
    /// Absent when the region has no test samples.
    std::array<std::optional<MetricSet>, 4> metrics{};

    std::size_t count(Region r) const { return counts[static_cast<std::size_t>(r)]; }
    const std::optional<MetricSet>& operator[](Region r) const { return metrics[static_cast<std::size_t>(r)]; }
};

/// Each test sample takes the shot region of its label's training bin;
/// `labels` decide the region and `y` supplies the targets.
inline RegionMetrics per_region_report(std::span<const double> y, std::span<const double> yhat,
                                       std::span<const double> labels, const BinStats& bins) {
    if (labels.size() != y.size()) throw UsageError("labels and targets differ in length");
    detail::check_pair(y, yhat);
    std::array<Vector, 4> ys, ps;
    for (std::size_t i = 0; i < y.size(); ++i) {
        auto r = static_cast<std::size_t>(to_region(region_of_label(labels[i], bins)));
        for (std::size_t slot : {std::size_t{0}, r}) {
            ys[slot].push_back(y[i]);
            ps[slot].push_back(yhat[i]);
        }
    }
    RegionMetrics m;
    for (std::size_t r = 0; r < 4; ++r) {
        m.counts[r] = ys[r].size();
        if (!ys[r].empty()) m.metrics[r] = compute_metrics(ys[r], ps[r]);
    }
    return m;
}

inline RegionMetrics per_region_report(std::span<const double> y, std::span<const double> yhat,
                                       const BinStats& bins) {
    return per_region_report(y, yhat, y, bins);
}

// ---------------------------------------------------------------------------
// Bound curves

struct BoundCurve {
    double query_label = 0.0;
    double sigma = 0.0;
    std::vector<std::size_t> k;
    Vector bias2, variance, total;
};

/// Orders candidate labels by distance to the query label (ideal retrieval
/// in label space); ties keep their input order.
inline Vector ideal_candidates(double query_label, Vector labels) {
    std::stable_sort(labels.begin(), labels.end(), [&](double a, double b) {
        return std::abs(a - query_label) < std::abs(b - query_label);
    });
    return labels;
}

/// For k = 1..k_max: bias² = (y − mean of first k labels)², variance = σ²/k,
/// total = bias² + σ²/k + σ². `candidates` must already be in retrieval order.
inline BoundCurve bound_curve(double query_label, std::span<const double> candidates, double sigma,
                              std::size_t k_max) {
    if (candidates.empty()) throw UsageError("bound curve needs at least one candidate label");
    if (k_max == 0) throw UsageError("k_max must be at least 1");
    if (k_max > candidates.size())
        throw UsageError("k_max " + std::to_string(k_max) + " exceeds the " + std::to_string(candidates.size()) +
                         " candidates");
    BoundCurve c;
    c.query_label = query_label;
    c.sigma = sigma;
    const double s2 = sigma * sigma;
    double sum = 0.0;
    for (std::size_t k = 1; k <= k_max; ++k) {
        sum += candidates[k - 1];
        const double mean = sum / static_cast<double>(k);
        const double b2 = (query_label - mean) * (query_label - mean);
        const double var = s2 / static_cast<double>(k);
        c.k.push_back(k);
        c.bias2.push_back(b2);
        c.variance.push_back(var);
        c.total.push_back(b2 + var + s2);
    }
    return c;
}

/// Index of the smallest total (first on ties).
inline std::size_t argmin_total(const BoundCurve& c) {
    return static_cast<std::size_t>(std::min_element(c.total.begin(), c.total.end()) - c.total.begin());
}

/// Residual standard deviation of a global OLS fit on the training set.
inline double estimate_sigma(const Dataset& train, std::optional<double> override_sigma = std::nullopt) {
    if (override_sigma) return *override_sigma;
    if (train.empty()) throw DataError("cannot estimate sigma from an empty training set");
    auto fit = fit_ols(train);
    double ss = 0.0;
    for (const auto& s : train.samples) {
        double r = s.label - fit(s.features);
        ss += r * r;
    }
    return std::sqrt(ss / static_cast<double>(train.size()));
}

// ---------------------------------------------------------------------------
// Rank statistics

/// Ranks starting at 1 with ties sharing their average rank.
inline Vector average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    Vector ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation (Pearson on average ranks). Returns 0 when either
/// side is constant.
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw UsageError("spearman needs two equal-length vectors (n >= 2)");
    auto ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Seed-averaged reports

struct MetricSummary {
    MetricSet mean, stddev;
    std::size_t seeds = 0;
};

struct EvalReport {
    std::vector<std::uint64_t> seeds;
    std::vector<RegionMetrics> per_seed;

    /// Mean and population standard deviation over the seeds where the region
    /// was non-empty.
    std::optional<MetricSummary> summary(Region r) const {
        std::vector<MetricSet> vals;
        for (const auto& m : per_seed)
            if (m[r]) vals.push_back(*m[r]);
        if (vals.empty()) return std::nullopt;
        MetricSummary s;
        s.seeds = vals.size();
        const double n = static_cast<double>(vals.size());
        auto field = [&](auto member) {
            double mean = 0.0;
            for (const auto& v : vals) mean += v.*member;
            mean /= n;
            double var = 0.0;
            for (const auto& v : vals) var += (v.*member - mean) * (v.*member - mean);
            s.mean.*member = mean;
            s.stddev.*member = std::sqrt(var / n);
        };
        field(&MetricSet::mae);
        field(&MetricSet::rmse);
        field(&MetricSet::mse);
        field(&MetricSet::gm);
        return s;
    }
};

// ---------------------------------------------------------------------------
// Empirical error curves

struct CurvePoint {
    std::size_t k = 0;
    Region region = Region::All;
    std::size_t count = 0;
    std::optional<double> mse;
};

/// Per-region MSE as a function of context size. Vanilla retrieval uses k
/// neighbours from `train_index`; when `inverse_index` is given, retrieval is
/// augmented with k/2 from each pool (k'_s = k − k/2 from the training pool).
inline std::vector<CurvePoint> empirical_error_curve(const Dataset& test, const RetrievalIndex& train_index,
                                                     const RetrievalIndex* inverse_index,
                                                     const FeatureTransform& transform,
                                                     const ContextPredictor& predictor,
                                                     const std::vector<std::size_t>& ks, const BinStats& bins) {
    std::vector<CurvePoint> out;
    const auto y = test.labels();
    for (auto k : ks) {
        if (k == 0) throw UsageError("curve k values must be positive");
        Vector pred;
        pred.reserve(test.size());
        for (const auto& s : test.samples) {
            ContextSet ctx = inverse_index ? augmented_retrieve(train_index, inverse_index, s.features, transform,
                                                                k - k / 2, k / 2)
                                           : vanilla_retrieve(train_index, s.features, transform, k);
            pred.push_back(predictor(make_prompt(ctx)).value);
        }
        auto rm = per_region_report(y, pred, bins);
        for (auto r : kRegions)
            out.push_back({k, r, rm.count(r), rm[r] ? std::optional<double>(rm[r]->mse) : std::nullopt});
    }
    return out;
}

}  // namespace imctx
