#pragma once

// Closed-form in-context predictors and the chunk-ensemble wrapper.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "imctx/common.hpp"
#include "imctx/data.hpp"
#include "imctx/retrieval.hpp"

namespace imctx {

/// Context pairs (xs[i], ys[i]) and one query, all in the same representation.
struct Prompt {
    std::vector<Vector> xs;
    Vector ys;
    Vector query;

    std::size_t size() const { return ys.size(); }
    std::size_t dim() const { return query.size(); }

    void validate() const {
        if (xs.size() != ys.size()) throw DataError("prompt has mismatched context inputs and labels");
        for (const auto& x : xs)
            if (x.size() != query.size()) throw DataError("prompt context dimension differs from query dimension");
    }
};

/// Prompt in transformed feature space built from a retrieved context.
inline Prompt make_prompt(const ContextSet& ctx, bool transformed = true) {
    Prompt p;
    for (const auto& e : ctx.entries) {
        p.xs.push_back(transformed ? e.transformed : e.raw);
        p.ys.push_back(e.label);
    }
    p.query = transformed ? ctx.query_transformed : ctx.query_raw;
    return p;
}

struct Prediction {
    double value = 0.0;
    std::optional<Vector> per_chunk;
    std::string predictor;
};

using ContextPredictor = std::function<Prediction(const Prompt&)>;

inline Prediction predict_average(const Prompt& p) {
    if (p.ys.empty()) throw UsageError("averaging needs a non-empty context");
    double sum = 0.0;
    for (double y : p.ys) sum += y;
    return {sum / static_cast<double>(p.ys.size()), std::nullopt, "average"};
}

struct LinearFit {
    Eigen::VectorXd weights;
    double intercept = 0.0;
    /// Ridge penalty actually used (after retries), or 0 for OLS.
    double lambda = 0.0;
    bool rank_deficient = false;

    double operator()(const Vector& x) const {
        double v = intercept;
        for (Eigen::Index j = 0; j < weights.size(); ++j) v += weights[j] * x[static_cast<std::size_t>(j)];
        return v;
    }
};

namespace detail {
inline void centered_design(const std::vector<Vector>& xs, const Vector& ys, Eigen::MatrixXd& X, Eigen::VectorXd& y,
                            Eigen::RowVectorXd& x_mean, double& y_mean) {
    const auto n = static_cast<Eigen::Index>(xs.size());
    const auto d = static_cast<Eigen::Index>(xs.front().size());
    X.resize(n, d);
    y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) X(i, j) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        y[i] = ys[static_cast<std::size_t>(i)];
    }
    x_mean = X.colwise().mean();
    y_mean = y.mean();
    X.rowwise() -= x_mean;
    y.array() -= y_mean;
}
}  // namespace detail

inline constexpr int kRidgeRetries = 3;

/// Ridge regression with an unpenalized intercept, solved on centred data by
/// Cholesky of the normal equations. On factorization failure λ is multiplied
/// by 10, up to three times.
inline LinearFit fit_ridge(const std::vector<Vector>& xs, const Vector& ys, double lambda) {
    if (xs.empty()) throw UsageError("ridge needs at least one context pair");
    if (!(lambda > 0.0)) throw UsageError("ridge lambda must be positive");
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    Eigen::RowVectorXd x_mean;
    double y_mean = 0.0;
    detail::centered_design(xs, ys, X, y, x_mean, y_mean);
    const Eigen::MatrixXd gram = X.transpose() * X;
    const Eigen::VectorXd rhs = X.transpose() * y;
    double lam = lambda;
    for (int attempt = 0; attempt <= kRidgeRetries; ++attempt, lam *= 10.0) {
        Eigen::MatrixXd A = gram;
        A.diagonal().array() += lam;
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() != Eigen::Success) continue;
        Eigen::VectorXd w = llt.solve(rhs);
        if (!w.allFinite()) continue;
        LinearFit fit;
        fit.weights = std::move(w);
        fit.intercept = y_mean - x_mean.dot(fit.weights);
        fit.lambda = lam;
        return fit;
    }
    throw RuntimeError("ridge normal equations are not positive definite after " + std::to_string(kRidgeRetries) +
                       " retries (final lambda " + format_double(lam / 10.0) + "); the context is ill-conditioned");
}

inline Prediction predict_ridge_icl(const Prompt& p, double lambda = 1e-3) {
    p.validate();
    auto fit = fit_ridge(p.xs, p.ys, lambda);
    double v = fit(p.query);
    if (!std::isfinite(v)) throw RuntimeError("ridge prediction is not finite");
    return {v, std::nullopt, "ridge"};
}

/// Ordinary least squares with intercept. Rank-deficient designs get the
/// minimum-norm slope on centred data and set `rank_deficient`.
inline LinearFit fit_ols(const std::vector<Vector>& xs, const Vector& ys) {
    if (xs.empty()) throw UsageError("OLS needs at least one sample");
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    Eigen::RowVectorXd x_mean;
    double y_mean = 0.0;
    detail::centered_design(xs, ys, X, y, x_mean, y_mean);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(X);
    LinearFit fit;
    fit.rank_deficient = cod.rank() < X.cols();
    fit.weights = cod.rank() == 0 ? Eigen::VectorXd::Zero(X.cols()) : Eigen::VectorXd(cod.solve(y));
    fit.intercept = y_mean - x_mean.dot(fit.weights);
    return fit;
}

inline LinearFit fit_ols(const Dataset& train) {
    if (train.empty()) throw DataError("OLS needs a non-empty training set");
    std::vector<Vector> xs;
    xs.reserve(train.size());
    for (const auto& s : train.samples) xs.push_back(s.features);
    return fit_ols(xs, train.labels());
}

inline Prediction predict_ols_global(const Dataset& train, const Vector& query) {
    return {fit_ols(train)(query), std::nullopt, "ols"};
}

/// Splits inputs into ceil(d/m) contiguous chunks of width m (the last one
/// zero-padded), applies `base` per chunk with the labels unchanged, and
/// averages. With d <= m the base predictor is called on the prompt as is.
inline Prediction chunk_ensemble(const ContextPredictor& base, const Prompt& p, std::size_t m) {
    if (m == 0) throw UsageError("chunk width must be at least 1");
    p.validate();
    const std::size_t d = p.dim();
    if (d <= m) {
        auto out = base(p);
        out.per_chunk = Vector{out.value};
        return out;
    }
    const std::size_t chunks = (d + m - 1) / m;
    auto slice = [&](const Vector& x, std::size_t c) {
        Vector s(m, 0.0);
        for (std::size_t j = 0; j < m && c * m + j < d; ++j) s[j] = x[c * m + j];
        return s;
    };
    Prediction out;
    out.per_chunk = Vector{};
    double sum = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) {
        Prompt sub;
        sub.ys = p.ys;
        sub.query = slice(p.query, c);
        sub.xs.reserve(p.xs.size());
        for (const auto& x : p.xs) sub.xs.push_back(slice(x, c));
        auto r = base(sub);
        out.per_chunk->push_back(r.value);
        out.predictor = r.predictor;
        sum += r.value;
    }
    out.value = sum / static_cast<double>(chunks);
    return out;
}

}  // namespace imctx
