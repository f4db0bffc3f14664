#pragma once

// Exact nearest-neighbour retrieval over transformed feature pools.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "imctx/common.hpp"
#include "imctx/data.hpp"
#include "imctx/transform.hpp"

namespace imctx {

enum class Metric { Cosine, Euclidean };

enum class PoolTag { Train, Inverse };

inline const char* to_string(PoolTag t) { return t == PoolTag::Train ? "train" : "inverse"; }

struct Neighbor {
    std::size_t row = 0;
    /// Larger is closer: cosine similarity, or negated squared distance.
    double score = 0.0;
};

/// Immutable store of transformed pool rows. Queries are read-only and may
/// run concurrently.
class RetrievalIndex {
public:
    RetrievalIndex(const Dataset& pool, const FeatureTransform& transform, Metric metric = Metric::Cosine,
                   PoolTag tag = PoolTag::Train)
        : metric_(metric), tag_(tag), dim_(transform.output_dim()) {
        if (pool.empty()) throw DataError("cannot index an empty pool");
        rows_.reserve(pool.size() * dim_);
        norms_.reserve(pool.size());
        for (const auto& s : pool.samples) {
            auto t = transform.apply(s.features);
            double n2 = 0.0;
            for (double v : t) n2 += v * v;
            norms_.push_back(std::sqrt(n2));
            rows_.insert(rows_.end(), t.begin(), t.end());
            raw_.push_back(s.features);
            labels_.push_back(s.label);
        }
    }

    /// Builds directly from already-transformed rows.
    RetrievalIndex(const std::vector<Vector>& transformed, const Vector& labels, Metric metric = Metric::Cosine,
                   PoolTag tag = PoolTag::Train)
        : metric_(metric), tag_(tag), dim_(transformed.empty() ? 0 : transformed.front().size()) {
        if (transformed.empty()) throw DataError("cannot index an empty pool");
        if (labels.size() != transformed.size()) throw DataError("label count does not match row count");
        for (const auto& t : transformed) {
            if (t.size() != dim_) throw DataError("rows of differing dimension");
            if (!all_finite(t)) throw DataError("non-finite row in index");
            double n2 = 0.0;
            for (double v : t) n2 += v * v;
            norms_.push_back(std::sqrt(n2));
            rows_.insert(rows_.end(), t.begin(), t.end());
            raw_.push_back(t);
        }
        labels_ = labels;
    }

    std::size_t size() const { return labels_.size(); }
    std::size_t dim() const { return dim_; }
    Metric metric() const { return metric_; }
    PoolTag tag() const { return tag_; }
    double label(std::size_t row) const { return labels_[row]; }
    const Vector& raw_features(std::size_t row) const { return raw_[row]; }
    std::span<const double> transformed(std::size_t row) const { return {rows_.data() + row * dim_, dim_}; }
    bool zero_norm(std::size_t row) const { return norms_[row] == 0.0; }

    /// Similarity of a transformed query to one row. Zero-norm rows (or a
    /// zero-norm query) score −1 under cosine.
    double score(std::span<const double> q, double q_norm, std::size_t row) const {
        auto r = transformed(row);
        if (metric_ == Metric::Cosine) {
            if (norms_[row] == 0.0 || q_norm == 0.0) return -1.0;
            double dot = 0.0;
            for (std::size_t j = 0; j < dim_; ++j) dot += q[j] * r[j];
            return dot / (q_norm * norms_[row]);
        }
        double d2 = 0.0;
        for (std::size_t j = 0; j < dim_; ++j) d2 += (q[j] - r[j]) * (q[j] - r[j]);
        return -d2;
    }

    /// Exact top-k over an already-transformed query; ties go to the lower row.
    /// k above the pool size is clamped and counted in `clamped`.
    std::vector<Neighbor> knn_transformed(std::span<const double> q, std::size_t k,
                                          std::size_t* clamped = nullptr) const {
        if (q.size() != dim_)
            throw DataError("query has dimension " + std::to_string(q.size()) + ", index expects " +
                            std::to_string(dim_));
        if (k > size()) {
            if (clamped) ++*clamped;
            k = size();
        }
        double qn = 0.0;
        for (double v : q) qn += v * v;
        qn = std::sqrt(qn);
        std::vector<Neighbor> all(size());
        for (std::size_t i = 0; i < size(); ++i) all[i] = {i, score(q, qn, i)};
        auto closer = [](const Neighbor& a, const Neighbor& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.row < b.row;
        };
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), closer);
        all.resize(k);
        return all;
    }

private:
    Metric metric_;
    PoolTag tag_;
    std::size_t dim_;
    std::vector<double> rows_;
    Vector norms_;
    std::vector<Vector> raw_;
    Vector labels_;
};

inline std::vector<Neighbor> knn(const RetrievalIndex& index, std::span<const double> query, std::size_t k,
                                 const FeatureTransform& transform, std::size_t* clamped = nullptr) {
    if (k == 0) throw UsageError("k must be at least 1");
    auto q = transform.apply(query);
    return index.knn_transformed(q, k, clamped);
}

struct ContextEntry {
    Vector raw;
    Vector transformed;
    double label = 0.0;
    PoolTag source = PoolTag::Train;
    std::size_t row = 0;
};

/// Ordered context pairs for one query; train block first, each block in
/// descending similarity.
struct ContextSet {
    std::vector<ContextEntry> entries;
    Vector query_raw;
    Vector query_transformed;

    std::size_t size() const { return entries.size(); }
    Vector labels() const {
        Vector out;
        for (const auto& e : entries) out.push_back(e.label);
        return out;
    }
};

namespace detail {
inline void append_block(ContextSet& ctx, const RetrievalIndex& idx, const std::vector<Neighbor>& nn) {
    for (const auto& n : nn) {
        auto t = idx.transformed(n.row);
        ctx.entries.push_back({idx.raw_features(n.row), Vector(t.begin(), t.end()), idx.label(n.row), idx.tag(), n.row});
    }
}
}  // namespace detail

/// k'_s neighbours from the training pool followed by k̃_s from the inverse
/// pool. Either count may be zero (but not both); cross-pool duplicates are kept.
inline ContextSet augmented_retrieve(const RetrievalIndex& train_index, const RetrievalIndex* inverse_index,
                                     std::span<const double> query, const FeatureTransform& transform,
                                     std::size_t k_train, std::size_t k_inverse, std::size_t* clamped = nullptr) {
    if (k_train + k_inverse == 0) throw UsageError("retrieval needs at least one neighbour");
    if (k_inverse > 0 && inverse_index == nullptr) throw UsageError("augmented retrieval needs an inverse pool");
    ContextSet ctx;
    ctx.query_raw.assign(query.begin(), query.end());
    ctx.query_transformed = transform.apply(query);
    if (k_train > 0) detail::append_block(ctx, train_index, train_index.knn_transformed(ctx.query_transformed, k_train, clamped));
    if (k_inverse > 0)
        detail::append_block(ctx, *inverse_index, inverse_index->knn_transformed(ctx.query_transformed, k_inverse, clamped));
    return ctx;
}

inline ContextSet vanilla_retrieve(const RetrievalIndex& index, std::span<const double> query,
                                   const FeatureTransform& transform, std::size_t k, std::size_t* clamped = nullptr) {
    return augmented_retrieve(index, nullptr, query, transform, k, 0, clamped);
}

}  // namespace imctx
