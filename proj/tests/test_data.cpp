#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "imctx/data.hpp"
#include "test_util.hpp"

using namespace imctx;

TEST(Csv, ParsesHeaderAndDropsLabelColumn) {
    auto ds = parse_csv("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
    EXPECT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.feature_dim, 2u);
    EXPECT_EQ(ds.samples[1].features, (Vector{4, 5}));
    EXPECT_DOUBLE_EQ(ds.samples[2].label, 9.0);
    EXPECT_EQ(ds.feature_names, (std::vector<std::string>{"a", "b"}));
}

TEST(Csv, LabelColumnByNameOrIndex) {
    auto by_name = parse_csv("y,a,b\n1,2,3\n", "y");
    EXPECT_DOUBLE_EQ(by_name.samples[0].label, 1.0);
    EXPECT_EQ(by_name.samples[0].features, (Vector{2, 3}));
    auto by_index = parse_csv("1,2,3\n4,5,6\n", "1", false);
    EXPECT_DOUBLE_EQ(by_index.samples[1].label, 5.0);
    EXPECT_EQ(by_index.samples[1].features, (Vector{4, 6}));
    EXPECT_THROW(parse_csv("a,b\n1,2\n", "zz"), DataError);
}

TEST(Csv, RaggedRowReportsRowNumber) {
    try {
        parse_csv("1,2,3\n4,5\n", "-1", false);
        FAIL() << "expected a ragged-row error";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
    }
}

TEST(Csv, RejectsNonNumericAndNonFinite) {
    EXPECT_THROW(parse_csv("a,y\n1,x\n"), DataError);
    EXPECT_THROW(parse_csv("a,y\nnan,1\n"), DataError);
    EXPECT_THROW(parse_csv("a,y\n1,inf\n"), DataError);
}

TEST(Csv, SkipsCommentsAndBlankLines) {
    auto ds = parse_csv("# manifest\na,y\n\n1,2\n# note\n3,4\n");
    EXPECT_EQ(ds.size(), 2u);
}

TEST(Csv, RoundTripIsBitExact) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    Dataset ds;
    ds.feature_dim = 3;
    ds.feature_names = {"p", "q", "r"};
    ds.label_name = "t";
    for (int i = 0; i < 200; ++i) ds.add({{u(rng), u(rng) * 1e-12, u(rng) * 1e200}, u(rng) / 3.0, 0});
    auto back = parse_csv(to_csv(ds, "comment line"));
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.samples[i].features, ds.samples[i].features);
        EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    }
}

TEST(Csv, LoadsBoston) {
    auto ds = load_csv(std::string(IMCTX_SOURCE_DIR) + "/data/boston.csv", "MEDV");
    EXPECT_EQ(ds.size(), 506u);
    EXPECT_EQ(ds.feature_dim, 13u);
}

TEST(Csv, MissingFileNamesPath) {
    try {
        load_csv("/nonexistent/file.csv");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/file.csv"), std::string::npos);
    }
}

TEST(Bins, TopEdgeInclusive) {
    auto a = assign_bins({0, 5, 10}, BinConfig::count(2).with_range(0, 10));
    EXPECT_EQ(a.indices, (std::vector<std::size_t>{0, 1, 1}));
    EXPECT_EQ(a.clamped, 0u);
}

TEST(Bins, IntegerAgesWidthOne) {
    Vector ages;
    for (int i = 0; i <= 100; ++i) ages.push_back(i);
    auto a = assign_bins(ages, BinConfig::width(1.0));
    EXPECT_EQ(a.edges.size(), 102u);
    for (std::size_t i = 0; i <= 100; ++i) EXPECT_EQ(a.indices[i], i);
}

TEST(Bins, DegenerateRangeIsUnitBin) {
    auto a = assign_bins({3, 3, 3}, BinConfig::count(4));
    EXPECT_EQ(a.indices, (std::vector<std::size_t>{0, 0, 0}));
    ASSERT_EQ(a.edges.size(), 2u);
    EXPECT_DOUBLE_EQ(a.edges[0], 2.5);
    EXPECT_DOUBLE_EQ(a.edges[1], 3.5);
}

TEST(Bins, OutOfRangeClampedAndCounted) {
    auto a = assign_bins({-4, 0, 10, 12}, BinConfig::count(2).with_range(0, 10));
    EXPECT_EQ(a.indices, (std::vector<std::size_t>{0, 0, 1, 1}));
    EXPECT_EQ(a.clamped, 2u);
}

TEST(Bins, InvalidConfigRejected) {
    EXPECT_THROW(BinConfig::count(0).validate(), UsageError);
    EXPECT_THROW(BinConfig::width(0.0).validate(), UsageError);
    EXPECT_THROW(BinConfig::width(-1.0).validate(), UsageError);
}

TEST(Bins, EdgesStrictlyIncreasingAndCountsSum) {
    std::mt19937_64 rng(9);
    std::exponential_distribution<double> e(0.3);
    for (int trial = 0; trial < 50; ++trial) {
        Vector y;
        for (int i = 0; i < 300; ++i) y.push_back(e(rng));
        auto st = compute_bin_stats(y, BinConfig::count(1 + trial % 20));
        for (std::size_t i = 1; i < st.edges.size(); ++i) EXPECT_LT(st.edges[i - 1], st.edges[i]);
        EXPECT_EQ(st.total(), y.size());
        for (std::size_t b = 0; b < st.num_bins(); ++b) EXPECT_EQ(st.regions[b], shot_region(st.counts[b]));
    }
}

TEST(ShotRegion, ExactThresholds) {
    EXPECT_EQ(shot_region(0), ShotRegion::Few);
    EXPECT_EQ(shot_region(19), ShotRegion::Few);
    EXPECT_EQ(shot_region(20), ShotRegion::Medium);
    EXPECT_EQ(shot_region(100), ShotRegion::Medium);
    EXPECT_EQ(shot_region(101), ShotRegion::Many);
}

TEST(ShotRegion, RegionOfLabel) {
    auto y = testutil::labels_from_counts({150, 0, 30});
    auto st = compute_bin_stats(y, BinConfig::count(3).with_range(0, 3));
    EXPECT_EQ(region_of_label(0.2, st), ShotRegion::Many);
    EXPECT_EQ(region_of_label(1.5, st), ShotRegion::Few);  // empty bin
    EXPECT_EQ(region_of_label(1.0, st), ShotRegion::Few);  // edge goes right
    EXPECT_EQ(region_of_label(3.0, st), ShotRegion::Medium);  // top edge stays in the last bin
    EXPECT_EQ(region_of_label(99.0, st), ShotRegion::Medium);  // clamped
}

TEST(Split, UniformCounts) {
    auto ds = testutil::make_dataset(testutil::labels_from_counts({100, 100}));
    auto s = balanced_split(ds, 0.2, BinConfig::count(2).with_range(0, 2), 0);
    EXPECT_EQ(s.cap, 20u);
    EXPECT_EQ(s.test_counts, (std::vector<std::size_t>{20, 20}));
    EXPECT_EQ(s.test.size(), 40u);
    EXPECT_EQ(s.train.size(), 160u);
}

TEST(Split, CapRuleKeepsOneTrainSample) {
    auto ds = testutil::make_dataset(testutil::labels_from_counts({97, 2, 1}));
    auto s = balanced_split(ds, 0.3, BinConfig::count(3).with_range(0, 3), 0);
    // round(100 * 0.3) = 30 over 3 nonempty bins: cap 10; min(cap, count - 1) per bin.
    EXPECT_EQ(s.cap, 10u);
    EXPECT_EQ(s.test_counts, (std::vector<std::size_t>{10, 1, 0}));
}

TEST(Split, ZeroCapIsUsageError) {
    auto ds = testutil::make_dataset(testutil::labels_from_counts({5, 5, 5}));
    EXPECT_THROW(balanced_split(ds, 0.1, BinConfig::count(3).with_range(0, 3), 0), UsageError);
    EXPECT_THROW(balanced_split(ds, 1.5, BinConfig::count(3).with_range(0, 3), 0), UsageError);
}

TEST(Split, BostonNear44) {
    auto ds = load_csv(std::string(IMCTX_SOURCE_DIR) + "/data/boston.csv", "MEDV");
    auto s = balanced_split(ds, 0.1, BinConfig::count(15), 0);
    EXPECT_GE(s.test.size(), 30u);
    EXPECT_LE(s.test.size(), 51u);
    EXPECT_EQ(s.train.size() + s.test.size(), 506u);
}

TEST(SplitProperty, PartitionDeterminismBalance) {
    std::mt19937_64 rng(17);
    std::gamma_distribution<double> g(1.5, 2.0);
    for (int trial = 0; trial < 40; ++trial) {
        Vector y;
        const int n = 100 + trial * 13;
        for (int i = 0; i < n; ++i) y.push_back(g(rng));
        auto ds = testutil::make_dataset(y, 3, trial);
        const auto cfg = BinConfig::count(5 + trial % 10);
        const double frac = 0.1 + 0.01 * (trial % 20);
        SplitResult s;
        try {
            s = balanced_split(ds, frac, cfg, trial);
        } catch (const UsageError&) {
            continue;
        }
        // Partition by sample identity.
        std::multiset<std::size_t> ids;
        for (const auto& x : s.train.samples) ids.insert(x.id);
        for (const auto& x : s.test.samples) ids.insert(x.id);
        ASSERT_EQ(ids.size(), ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ids.count(i), 1u);
        // Determinism.
        auto again = balanced_split(ds, frac, cfg, trial);
        EXPECT_EQ(to_csv(again.train), to_csv(s.train));
        EXPECT_EQ(to_csv(again.test), to_csv(s.test));
        // Balance: full bins exactly at cap; under-full bins keep one training sample.
        for (std::size_t b = 0; b < s.bin_counts.size(); ++b) {
            if (s.bin_counts[b] == 0) {
                EXPECT_EQ(s.test_counts[b], 0u);
            } else if (s.bin_counts[b] > s.cap) {
                EXPECT_EQ(s.test_counts[b], s.cap);
            } else {
                EXPECT_EQ(s.test_counts[b], s.bin_counts[b] - 1);
            }
        }
        auto train_stats = compute_bin_stats(s.train.labels(), s.edges);
        for (std::size_t b = 0; b < s.bin_counts.size(); ++b)
            if (s.bin_counts[b] > 0) {
                EXPECT_GE(train_stats.counts[b], 1u);
            }
    }
}

TEST(Split, ManifestRecordsCounts) {
    auto ds = testutil::make_dataset(testutil::labels_from_counts({40, 40}));
    auto cfg = BinConfig::count(2).with_range(0, 2);
    auto s = balanced_split(ds, 0.25, cfg, 5);
    auto m = split_manifest(s, 0.25, cfg, 5);
    EXPECT_EQ(m["seed"].get<int>(), 5);
    EXPECT_EQ(m["test_counts"].get<std::vector<std::size_t>>(), (std::vector<std::size_t>{10, 10}));
    EXPECT_EQ(m["bin_counts"].get<std::vector<std::size_t>>(), (std::vector<std::size_t>{40, 40}));
}
