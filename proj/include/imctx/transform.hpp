#pragma once

// Feature preprocessing: standard scaling and a Yeo-Johnson power transform,
// concatenated into a 2d representation.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "imctx/common.hpp"
#include "imctx/io.hpp"

namespace imctx {

inline constexpr double kLambdaMin = -5.0;
inline constexpr double kLambdaMax = 5.0;

/// Yeo-Johnson transform of a single value.
inline double yeo_johnson(double x, double lambda) {
    constexpr double eps = 1e-12;
    if (x >= 0.0) {
        const double l = std::log1p(x);
        if (std::abs(lambda) < eps) return l;
        return std::expm1(lambda * l) / lambda;
    }
    const double l = std::log1p(-x);
    const double p = 2.0 - lambda;
    if (std::abs(p) < eps) return -l;
    return -std::expm1(p * l) / p;
}

/// Profile log-likelihood of the Yeo-Johnson parameter for one column, with
/// the transformed variance at its maximum-likelihood value.
inline double yeo_johnson_llf(std::span<const double> column, double lambda) {
    const auto n = static_cast<double>(column.size());
    double mean = 0.0;
    std::vector<double> t(column.size());
    double log_jac = 0.0;
    for (std::size_t i = 0; i < column.size(); ++i) {
        t[i] = yeo_johnson(column[i], lambda);
        mean += t[i];
        log_jac += std::copysign(std::log1p(std::abs(column[i])), column[i]);
    }
    mean /= n;
    double var = 0.0;
    for (double v : t) var += (v - mean) * (v - mean);
    var /= n;
    if (!(var > 0.0) || !std::isfinite(var)) return -std::numeric_limits<double>::infinity();
    return -0.5 * n * std::log(var) + (lambda - 1.0) * log_jac;
}

/// Maximizes the profile log-likelihood by golden-section search on [−5, 5].
inline double fit_yeo_johnson_lambda(std::span<const double> column, double tol = 1e-4) {
    const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = kLambdaMin, b = kLambdaMax;
    double c = b - invphi * (b - a);
    double d = a + invphi * (b - a);
    double fc = yeo_johnson_llf(column, c);
    double fd = yeo_johnson_llf(column, d);
    while (b - a > tol) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = yeo_johnson_llf(column, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = yeo_johnson_llf(column, d);
        }
    }
    return 0.5 * (a + b);
}

struct FeatureTransform {
    Vector means, stds;
    Vector lambdas;
    Vector power_means, power_stds;
    /// Dimensions with zero variance; their std is fixed to 1.
    std::vector<bool> constant;

    std::size_t input_dim() const { return means.size(); }
    std::size_t output_dim() const { return 2 * means.size(); }

    /// concat(standardize(x), standardize(yeo_johnson(x)))
    Vector apply(std::span<const double> x) const {
        const std::size_t d = input_dim();
        if (x.size() != d)
            throw DataError("transform expects " + std::to_string(d) + " features, got " + std::to_string(x.size()));
        Vector out(2 * d);
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::isfinite(x[j])) throw DataError("non-finite feature at index " + std::to_string(j));
            out[j] = (x[j] - means[j]) / stds[j];
            out[d + j] = (yeo_johnson(x[j], lambdas[j]) - power_means[j]) / power_stds[j];
        }
        return out;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["format"] = "imctx-feature-transform-v1";
        j["means"] = means;
        j["stds"] = stds;
        j["lambdas"] = lambdas;
        j["power_means"] = power_means;
        j["power_stds"] = power_stds;
        j["constant"] = constant;
        return j;
    }

    static FeatureTransform from_json(const nlohmann::json& j) {
        FeatureTransform t;
        try {
            t.means = j.at("means").get<Vector>();
            t.stds = j.at("stds").get<Vector>();
            t.lambdas = j.at("lambdas").get<Vector>();
            t.power_means = j.at("power_means").get<Vector>();
            t.power_stds = j.at("power_stds").get<Vector>();
            t.constant = j.at("constant").get<std::vector<bool>>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed feature transform: ") + e.what());
        }
        const auto d = t.means.size();
        if (t.stds.size() != d || t.lambdas.size() != d || t.power_means.size() != d || t.power_stds.size() != d ||
            t.constant.size() != d)
            throw DataError("feature transform vectors have inconsistent lengths");
        return t;
    }

    void save(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }

    static FeatureTransform load(const std::filesystem::path& path) {
        try {
            return from_json(nlohmann::json::parse(read_file(path)));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(path.string() + ": " + e.what());
        }
    }
};

namespace detail {
inline void mean_std(std::span<const double> v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    sd = std::sqrt(var / static_cast<double>(v.size()));
}
}  // namespace detail

/// Fits per-dimension scaling (population statistics) and Yeo-Johnson
/// parameters on the rows of `features`.
inline FeatureTransform fit_transform(const std::vector<Vector>& features) {
    if (features.size() < 2) throw DataError("fitting a feature transform needs at least 2 rows");
    const std::size_t d = features.front().size();
    if (d == 0) throw DataError("feature dimension must be positive");
    FeatureTransform t;
    t.means.resize(d);
    t.stds.resize(d);
    t.lambdas.resize(d);
    t.power_means.resize(d);
    t.power_stds.resize(d);
    t.constant.assign(d, false);
    std::vector<double> col(features.size());
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < features.size(); ++i) {
            if (features[i].size() != d) throw DataError("row " + std::to_string(i) + " has the wrong dimension");
            if (!std::isfinite(features[i][j]))
                throw DataError("non-finite feature at row " + std::to_string(i) + ", column " + std::to_string(j));
            col[i] = features[i][j];
        }
        detail::mean_std(col, t.means[j], t.stds[j]);
        if (!(t.stds[j] > 0.0)) {
            t.constant[j] = true;
            t.stds[j] = 1.0;
            t.lambdas[j] = 1.0;
        } else {
            t.lambdas[j] = fit_yeo_johnson_lambda(col);
        }
        for (auto& v : col) v = yeo_johnson(v, t.lambdas[j]);
        detail::mean_std(col, t.power_means[j], t.power_stds[j]);
        if (!(t.power_stds[j] > 0.0)) t.power_stds[j] = 1.0;
    }
    return t;
}

}  // namespace imctx
