#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "imctx/predict.hpp"
#include "test_util.hpp"

using namespace imctx;

namespace {

Prompt linear_prompt(std::mt19937_64& rng, std::size_t n, std::size_t d, double noise, double* truth = nullptr) {
    std::normal_distribution<double> g;
    Vector w(d);
    for (auto& v : w) v = g(rng);
    auto f = [&](const Vector& x) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += w[j] * x[j];
        return s;
    };
    Prompt p;
    for (std::size_t i = 0; i < n; ++i) {
        Vector x(d);
        for (auto& v : x) v = g(rng);
        p.xs.push_back(x);
        p.ys.push_back(f(x) + noise * g(rng));
    }
    p.query.resize(d);
    for (auto& v : p.query) v = g(rng);
    if (truth) *truth = f(p.query);
    return p;
}

// Closed-form ridge oracle on augmented design with the intercept unpenalized.
double ridge_oracle(const Prompt& p, double lambda) {
    const auto n = static_cast<Eigen::Index>(p.size()), d = static_cast<Eigen::Index>(p.dim());
    Eigen::MatrixXd X(n, d + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        for (Eigen::Index j = 0; j < d; ++j) X(i, j + 1) = p.xs[i][j];
        y[i] = p.ys[i];
    }
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(d + 1, d + 1) * lambda;
    P(0, 0) = 0.0;
    Eigen::VectorXd b = (X.transpose() * X + P).colPivHouseholderQr().solve(X.transpose() * y);
    double v = b[0];
    for (Eigen::Index j = 0; j < d; ++j) v += b[j + 1] * p.query[j];
    return v;
}

}  // namespace

TEST(Average, MeanOfLabels) {
    Prompt p{{{0.0}, {1.0}, {2.0}}, {1.0, 2.0, 6.0}, {5.0}};
    EXPECT_DOUBLE_EQ(predict_average(p).value, 3.0);
    EXPECT_THROW(predict_average(Prompt{{}, {}, {1.0}}), UsageError);
}

TEST(Ridge, ExactLineRecovered) {
    // y = 2x + 1 with a tiny penalty.
    Prompt p{{{0.0}, {1.0}, {2.0}, {3.0}}, {1.0, 3.0, 5.0, 7.0}, {10.0}};
    EXPECT_NEAR(predict_ridge_icl(p, 1e-9).value, 21.0, 1e-6);
}

TEST(Ridge, HandComputedShrinkage) {
    // Centred x = [-1, 1], y = [-1, 1]: slope = 2 / (2 + λ). λ = 2 → 0.5; intercept 0.
    Prompt p{{{0.0}, {2.0}}, {0.0, 2.0}, {3.0}};
    const double v = predict_ridge_icl(p, 2.0).value;
    EXPECT_NEAR(v, 1.0 + 0.5 * 2.0, 1e-12);
}

TEST(Ridge, MatchesClosedFormOracle) {
    std::mt19937_64 rng(31);
    for (int t = 0; t < 50; ++t) {
        auto p = linear_prompt(rng, 5 + t % 20, 1 + t % 8, 0.3);
        for (double lam : {1e-3, 0.1, 10.0}) EXPECT_NEAR(predict_ridge_icl(p, lam).value, ridge_oracle(p, lam), 1e-8);
    }
}

TEST(Ridge, ShrinkageMonotoneInLambda) {
    std::mt19937_64 rng(7);
    auto p = linear_prompt(rng, 30, 4, 0.1);
    double prev = std::numeric_limits<double>::infinity();
    for (double lam : {1e-4, 1e-2, 1.0, 10.0, 100.0, 1e4}) {
        auto fit = fit_ridge(p.xs, p.ys, lam);
        EXPECT_LE(fit.weights.norm(), prev + 1e-12);
        prev = fit.weights.norm();
    }
}

TEST(Ridge, UnderdeterminedStillSolves) {
    std::mt19937_64 rng(1);
    auto p = linear_prompt(rng, 3, 10, 0.0);
    EXPECT_TRUE(std::isfinite(predict_ridge_icl(p, 1e-3).value));
    EXPECT_THROW(predict_ridge_icl(p, 0.0), UsageError);
}

TEST(Ridge, BeatsAveragingOnLinearTasks) {
    std::mt19937_64 rng(99);
    double se_r = 0, se_a = 0;
    for (int t = 0; t < 100; ++t) {
        double truth;
        auto p = linear_prompt(rng, 20, 5, 0.1, &truth);
        se_r += std::pow(predict_ridge_icl(p).value - truth, 2);
        se_a += std::pow(predict_average(p).value - truth, 2);
    }
    EXPECT_LT(se_r, se_a);
}

TEST(Ols, AgreesWithTinyRidge) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 20; ++t) {
        auto p = linear_prompt(rng, 40, 1 + t % 6, 0.5);
        auto ols = fit_ols(p.xs, p.ys);
        EXPECT_FALSE(ols.rank_deficient);
        EXPECT_NEAR(ols(p.query), predict_ridge_icl(p, 1e-12).value, 1e-6);
    }
}

TEST(Ols, RankDeficientMinNorm) {
    // Duplicate column: min-norm splits the slope equally.
    Prompt p{{{0, 0}, {1, 1}, {2, 2}}, {0, 2, 4}, {1, 1}};
    auto fit = fit_ols(p.xs, p.ys);
    EXPECT_TRUE(fit.rank_deficient);
    EXPECT_NEAR(fit.weights[0], 1.0, 1e-10);
    EXPECT_NEAR(fit.weights[1], 1.0, 1e-10);
    EXPECT_NEAR(fit.intercept, 0.0, 1e-10);
}

TEST(Ols, GlobalOnDataset) {
    Dataset ds;
    ds.feature_dim = 1;
    for (int i = 0; i < 10; ++i) ds.add({{double(i)}, 3.0 * i - 2.0, std::size_t(i)});
    EXPECT_NEAR(predict_ols_global(ds, {4.0}).value, 10.0, 1e-10);
}

TEST(Chunk, SmallDimIsBitIdentical) {
    std::mt19937_64 rng(3);
    auto p = linear_prompt(rng, 15, 6, 0.2);
    ContextPredictor r = [](const Prompt& q) { return predict_ridge_icl(q); };
    EXPECT_EQ(chunk_ensemble(r, p, 6).value, predict_ridge_icl(p).value);
    EXPECT_EQ(chunk_ensemble(r, p, 20).value, predict_ridge_icl(p).value);
}

TEST(Chunk, FortyDimsInTwoChunks) {
    std::mt19937_64 rng(3);
    auto p = linear_prompt(rng, 25, 40, 0.2);
    ContextPredictor r = [](const Prompt& q) { return predict_ridge_icl(q); };
    auto out = chunk_ensemble(r, p, 20);
    ASSERT_TRUE(out.per_chunk);
    ASSERT_EQ(out.per_chunk->size(), 2u);
    // Oracle: slice by hand.
    double sum = 0;
    for (int c = 0; c < 2; ++c) {
        Prompt s;
        s.ys = p.ys;
        for (auto& x : p.xs) s.xs.emplace_back(x.begin() + 20 * c, x.begin() + 20 * (c + 1));
        s.query.assign(p.query.begin() + 20 * c, p.query.begin() + 20 * (c + 1));
        const double v = predict_ridge_icl(s).value;
        EXPECT_EQ((*out.per_chunk)[c], v);
        sum += v;
    }
    EXPECT_DOUBLE_EQ(out.value, sum / 2);
}

TEST(Chunk, LastChunkZeroPadded) {
    std::mt19937_64 rng(5);
    auto p = linear_prompt(rng, 10, 25, 0.0);
    std::vector<Prompt> seen;
    ContextPredictor spy = [&](const Prompt& q) {
        seen.push_back(q);
        return predict_average(q);
    };
    auto out = chunk_ensemble(spy, p, 20);
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen[1].dim(), 20u);
    for (std::size_t j = 5; j < 20; ++j) {
        EXPECT_EQ(seen[1].query[j], 0.0);
        for (auto& x : seen[1].xs) EXPECT_EQ(x[j], 0.0);
    }
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(seen[1].query[j], p.query[20 + j]);
    EXPECT_EQ(seen[1].ys, p.ys);
    EXPECT_DOUBLE_EQ(out.value, predict_average(p).value);
    EXPECT_THROW(chunk_ensemble(spy, p, 0), UsageError);
}

TEST(Prompt, ValidatesShapes) {
    Prompt p{{{1.0, 2.0}}, {1.0, 2.0}, {0.0, 0.0}};
    EXPECT_THROW(p.validate(), DataError);
    Prompt q{{{1.0}}, {1.0}, {0.0, 0.0}};
    EXPECT_THROW(q.validate(), DataError);
}
