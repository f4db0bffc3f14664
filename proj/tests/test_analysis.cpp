#include <gtest/gtest.h>

#include "imctx/analysis.hpp"
#include "test_util.hpp"

using namespace imctx;

TEST(Metrics, HandValues) {
    Vector y = {0, 0}, p = {1, -1};
    EXPECT_DOUBLE_EQ(metric_mae(y, p), 1.0);
    EXPECT_DOUBLE_EQ(metric_mse(y, p), 1.0);
    EXPECT_DOUBLE_EQ(metric_rmse(y, p), 1.0);
    EXPECT_DOUBLE_EQ(metric_mae(Vector{5}, Vector{2}), 3.0);
    EXPECT_DOUBLE_EQ(metric_rmse(Vector{5}, Vector{2}), 3.0);
    auto m = compute_metrics(Vector{1, 2}, Vector{1, 2});
    EXPECT_EQ(m.mae, 0.0);
    EXPECT_EQ(m.mse, 0.0);
    EXPECT_EQ(m.rmse, 0.0);
    EXPECT_THROW(metric_mae(Vector{1}, Vector{1, 2}), UsageError);
    EXPECT_ANY_THROW(metric_mae(Vector{}, Vector{}));
}

TEST(Metrics, GeometricMean) {
    EXPECT_EQ(metric_gm(Vector{0, 0, 0}, Vector{2, -2, 2}), 2.0);
    EXPECT_EQ(metric_gm(Vector{0, 0}, Vector{1, 4}), 2.0);
    EXPECT_EQ(metric_gm(Vector{0, 0}, Vector{2, 0}), std::sqrt(2.0 * 1e-10));
}

TEST(MetricsProperty, GmAtMostMae) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    for (int t = 0; t < 200; ++t) {
        Vector y(1 + t % 30), p(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = n(rng);
            p[i] = y[i] + n(rng);
        }
        EXPECT_LE(metric_gm(y, p), metric_mae(y, p) * (1 + 1e-12));
        EXPECT_NEAR(metric_rmse(y, p), std::sqrt(metric_mse(y, p)), 1e-12);
    }
}

TEST(Regions, OneFewOneMany) {
    auto train_y = testutil::labels_from_counts({150, 3});
    auto bins = compute_bin_stats(train_y, BinConfig::count(2).with_range(0, 2));
    Vector y = {1.5, 0.5}, p = {5.5, 2.5};  // errors 4 (Few) and 2 (Many)
    auto r = per_region_report(y, p, bins);
    EXPECT_DOUBLE_EQ(r[Region::All]->mae, 3.0);
    EXPECT_DOUBLE_EQ(r[Region::Few]->mae, 4.0);
    EXPECT_DOUBLE_EQ(r[Region::Many]->mae, 2.0);
    EXPECT_FALSE(r[Region::Medium].has_value());
    EXPECT_EQ(r.count(Region::Medium), 0u);
}

TEST(Regions, AllManyLeavesOthersAbsent) {
    auto bins = compute_bin_stats(testutil::labels_from_counts({150, 200}), BinConfig::count(2).with_range(0, 2));
    auto r = per_region_report(Vector{0.2, 1.7}, Vector{0, 2}, bins);
    EXPECT_EQ(r.count(Region::Many), 2u);
    EXPECT_FALSE(r[Region::Medium]);
    EXPECT_FALSE(r[Region::Few]);
}

TEST(RegionsProperty, PartitionReproducesAll) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0, 4);
    std::normal_distribution<double> n;
    auto bins = compute_bin_stats(testutil::labels_from_counts({300, 50, 10, 0}), BinConfig::count(4).with_range(0, 4));
    for (int t = 0; t < 50; ++t) {
        Vector y(40), p(40);
        for (int i = 0; i < 40; ++i) {
            y[i] = u(rng);
            p[i] = y[i] + n(rng);
        }
        auto r = per_region_report(y, p, bins);
        std::size_t total = 0;
        double mae = 0, mse = 0;
        for (auto reg : {Region::Many, Region::Medium, Region::Few}) {
            total += r.count(reg);
            if (r[reg]) {
                mae += r[reg]->mae * r.count(reg);
                mse += r[reg]->mse * r.count(reg);
            }
        }
        EXPECT_EQ(total, r.count(Region::All));
        EXPECT_NEAR(mae / total, r[Region::All]->mae, 1e-12);
        EXPECT_NEAR(mse / total, r[Region::All]->mse, 1e-12);
    }
}

TEST(Bound, HandComputedExample) {
    auto c = bound_curve(10.0, Vector{1, 2, 3, 4}, 1.0, 4);
    ASSERT_EQ(c.k.size(), 4u);
    EXPECT_DOUBLE_EQ(c.bias2[3], 56.25);
    EXPECT_DOUBLE_EQ(c.variance[3], 0.25);
    EXPECT_DOUBLE_EQ(c.total[3], 57.5);
    EXPECT_EQ(bound_curve(10.0, Vector{1}, 1.0, 1).k.size(), 1u);
    EXPECT_THROW(bound_curve(1.0, Vector{}, 1.0, 1), UsageError);
    EXPECT_THROW(bound_curve(1.0, Vector{1, 2}, 1.0, 3), UsageError);
}

TEST(BoundProperty, IdentityAndMonotoneVariance) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0, 3);
    for (int t = 0; t < 50; ++t) {
        Vector labels(60);
        for (auto& v : labels) v = n(rng);
        const double q = n(rng), sigma = 0.1 + t * 0.05;
        auto c = bound_curve(q, ideal_candidates(q, labels), sigma, 60);
        for (std::size_t i = 0; i < c.k.size(); ++i) {
            EXPECT_EQ(c.total[i], c.bias2[i] + c.variance[i] + sigma * sigma);
            if (i) {
                EXPECT_LT(c.variance[i], c.variance[i - 1]);
            }
        }
    }
}

TEST(Bound, ZeroBiasIsStrictlyDecreasing) {
    auto c = bound_curve(3.0, Vector(20, 3.0), 0.5, 20);
    for (std::size_t i = 0; i < c.k.size(); ++i) {
        EXPECT_EQ(c.bias2[i], 0.0);
        if (i) {
            EXPECT_LT(c.total[i], c.total[i - 1]);
        }
    }
    EXPECT_EQ(argmin_total(c), 19u);
}

TEST(Bound, IdealCandidatesSortByLabelDistance) {
    EXPECT_EQ(ideal_candidates(5.0, {1, 6, 4, 9, 5}), (Vector{5, 6, 4, 1, 9}));
}

TEST(Bound, SkewedFewQueryIsUShaped) {
    // Few query at label 9.5 with 3 neighbours in its bin and a dense mass far away.
    auto y = testutil::labels_from_counts({1000, 550, 303, 166, 92, 50, 28, 15, 8, 3});
    auto c = bound_curve(9.5, ideal_candidates(9.5, y), 0.5, 50);
    const auto k = argmin_total(c);
    EXPECT_LT(k, 10u);
    EXPECT_GT(c.total.back(), c.total[k]);
}

TEST(Sigma, EstimatesAndOverride) {
    Dataset exact;
    exact.feature_dim = 2;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n;
    for (int i = 0; i < 200; ++i) {
        double a = n(rng), b = n(rng);
        exact.add({{a, b}, 2 * a - b + 1, std::size_t(i)});
    }
    EXPECT_LT(estimate_sigma(exact), 1e-8);
    Dataset noisy;
    noisy.feature_dim = 1;
    for (int i = 0; i < 10000; ++i) {
        double x = n(rng);
        noisy.add({{x}, x + n(rng), std::size_t(i)});
    }
    const double s = estimate_sigma(noisy);
    EXPECT_GE(s, 0.9);
    EXPECT_LE(s, 1.1);
    EXPECT_EQ(estimate_sigma(noisy, 2.0), 2.0);
}

TEST(Ranks, SpearmanAndTies) {
    EXPECT_EQ(average_ranks(Vector{10, 20, 20, 5}), (Vector{2, 3.5, 3.5, 1}));
    EXPECT_DOUBLE_EQ(spearman(Vector{1, 2, 3}, Vector{10, 20, 30}), 1.0);
    EXPECT_DOUBLE_EQ(spearman(Vector{1, 2, 3}, Vector{3, 2, 1}), -1.0);
    EXPECT_DOUBLE_EQ(spearman(Vector{1, 2, 3}, Vector{5, 5, 5}), 0.0);
    EXPECT_THROW(spearman(Vector{1}, Vector{1}), UsageError);
}

TEST(Report, SeedMeansAreArithmetic) {
    auto bins = compute_bin_stats(testutil::labels_from_counts({150}), BinConfig::count(1).with_range(0, 1));
    EvalReport rep;
    Vector y = {0.5, 0.5};
    for (double e : {1.0, 2.0, 6.0}) {
        rep.seeds.push_back(rep.seeds.size());
        rep.per_seed.push_back(per_region_report(y, Vector{0.5 + e, 0.5 - e}, bins));
    }
    auto s = rep.summary(Region::All);
    ASSERT_TRUE(s);
    EXPECT_EQ(s->seeds, 3u);
    EXPECT_DOUBLE_EQ(s->mean.mae, 3.0);
    EXPECT_NEAR(s->stddev.mae, std::sqrt(((4.0) + 1.0 + 9.0) / 3.0), 1e-12);
    EXPECT_FALSE(rep.summary(Region::Few));
}

TEST(Curve, RowsAndNearestNeighbourAtKOne) {
    auto train = testutil::make_dataset(testutil::labels_from_counts({120, 40, 5}), 3, 1);
    auto test = testutil::make_dataset(testutil::labels_from_counts({5, 5, 5}), 3, 2);
    auto bins = compute_bin_stats(train.labels(), BinConfig::count(3).with_range(0, 3));
    std::vector<Vector> xs;
    for (auto& s : train.samples) xs.push_back(s.features);
    auto t = fit_transform(xs);
    RetrievalIndex idx(train, t);
    ContextPredictor avg = predict_average;
    auto pts = empirical_error_curve(test, idx, nullptr, t, avg, {1, 5, 10}, bins);
    ASSERT_EQ(pts.size(), 12u);
    // k = 1 oracle: squared error of the nearest neighbour's label.
    double se = 0;
    for (auto& s : test.samples) {
        auto nn = knn(idx, s.features, 1, t);
        se += std::pow(train.samples[nn[0].row].label - s.label, 2);
    }
    ASSERT_EQ(pts[0].region, Region::All);
    EXPECT_NEAR(*pts[0].mse, se / test.size(), 1e-12);
    EXPECT_EQ(pts[0].count, 15u);
}
