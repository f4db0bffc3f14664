#pragma once

// Datasets, label binning, shot regions and balanced train/test splitting.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "imctx/common.hpp"
#include "imctx/io.hpp"

namespace imctx {

struct Sample {
    Vector features;
    double label = 0.0;
    /// Row of origin; preserved through splits and resampling.
    std::size_t id = 0;
};

struct Dataset {
    std::size_t feature_dim = 0;
    std::vector<Sample> samples;
    std::vector<std::string> feature_names;
    std::string label_name = "label";

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    Vector labels() const {
        Vector out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(s.label);
        return out;
    }

    /// Empty copy sharing dimension and column names.
    Dataset like() const {
        Dataset d;
        d.feature_dim = feature_dim;
        d.feature_names = feature_names;
        d.label_name = label_name;
        return d;
    }

    void add(Sample s) { samples.push_back(std::move(s)); }

    void validate() const {
        if (samples.empty()) throw DataError("dataset is empty");
        if (feature_dim == 0) throw DataError("dataset feature dimension must be positive");
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            if (s.features.size() != feature_dim)
                throw DataError("sample " + std::to_string(i) + " has " + std::to_string(s.features.size()) +
                                " features, expected " + std::to_string(feature_dim));
            if (!all_finite(s.features) || !std::isfinite(s.label))
                throw DataError("sample " + std::to_string(i) + " contains a non-finite value");
        }
    }
};

// ---------------------------------------------------------------------------
// CSV

/// Parses a comma-delimited numeric table. Blank lines and lines starting
/// with '#' are skipped. `label_column` is either a header name or an integer
/// index (negative counts from the end).
inline Dataset parse_csv(std::string_view text, const std::string& label_column = "-1", bool has_header = true) {
    std::vector<std::vector<std::string_view>> rows;
    std::vector<std::size_t> line_numbers;
    std::vector<std::string_view> header;

    auto split = [](std::string_view line) {
        std::vector<std::string_view> cells;
        std::size_t start = 0;
        while (true) {
            auto pos = line.find(',', start);
            if (pos == std::string_view::npos) {
                cells.push_back(line.substr(start));
                break;
            }
            cells.push_back(line.substr(start, pos - start));
            start = pos + 1;
        }
        return cells;
    };

    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool header_seen = !has_header;
    while (pos <= text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) {
            if (end == text.size()) break;
            continue;
        }
        if (line.front() == '#') continue;
        if (!header_seen) {
            header = split(line);
            header_seen = true;
            continue;
        }
        rows.push_back(split(line));
        line_numbers.push_back(line_no);
        if (end == text.size()) break;
    }
    if (rows.empty()) throw DataError("CSV has no data rows");

    const std::size_t ncols = has_header ? header.size() : rows.front().size();
    for (std::size_t r = 0; r < rows.size(); ++r)
        if (rows[r].size() != ncols)
            throw DataError("ragged row " + std::to_string(r + 1) + " (line " + std::to_string(line_numbers[r]) + "): expected " +
                            std::to_string(ncols) + " columns, found " + std::to_string(rows[r].size()));
    if (ncols < 2) throw DataError("CSV needs at least one feature column and a label column");

    long label_idx = -1;
    bool numeric = !label_column.empty();
    for (std::size_t i = 0; i < label_column.size(); ++i) {
        char c = label_column[i];
        if (!(std::isdigit(static_cast<unsigned char>(c)) || (i == 0 && c == '-'))) numeric = false;
    }
    if (label_column == "-") numeric = false;
    if (numeric) {
        label_idx = std::stol(label_column);
        if (label_idx < 0) label_idx += static_cast<long>(ncols);
    } else {
        if (!has_header) throw DataError("label column given by name but the CSV has no header");
        auto it = std::find_if(header.begin(), header.end(), [&](std::string_view h) {
            while (!h.empty() && h.front() == ' ') h.remove_prefix(1);
            while (!h.empty() && h.back() == ' ') h.remove_suffix(1);
            return h == label_column;
        });
        if (it == header.end()) throw DataError("label column not found: " + label_column);
        label_idx = static_cast<long>(it - header.begin());
    }
    if (label_idx < 0 || label_idx >= static_cast<long>(ncols))
        throw DataError("label column index out of range: " + label_column);

    Dataset ds;
    ds.feature_dim = ncols - 1;
    for (std::size_t c = 0; c < ncols; ++c) {
        std::string name = has_header ? std::string(header[c]) : "x" + std::to_string(c);
        if (static_cast<long>(c) == label_idx)
            ds.label_name = name;
        else
            ds.feature_names.push_back(name);
    }
    ds.samples.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        Sample s;
        s.id = r;
        s.features.reserve(ds.feature_dim);
        for (std::size_t c = 0; c < ncols; ++c) {
            bool ok = false;
            double v = parse_double(rows[r][c], ok);
            if (!ok)
                throw DataError("non-numeric cell at line " + std::to_string(line_numbers[r]) + ", column " +
                                std::to_string(c + 1) + ": '" + std::string(rows[r][c]) + "'");
            if (!std::isfinite(v))
                throw DataError("non-finite value at line " + std::to_string(line_numbers[r]) + ", column " +
                                std::to_string(c + 1));
            if (static_cast<long>(c) == label_idx)
                s.label = v;
            else
                s.features.push_back(v);
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline Dataset load_csv(const std::filesystem::path& path, const std::string& label_column = "-1",
                        bool has_header = true) {
    if (!std::filesystem::exists(path)) throw DataError("file not found: " + path.string());
    try {
        return parse_csv(read_file(path), label_column, has_header);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// Features first, label last. Values use shortest round-trip decimal text.
inline std::string to_csv(const Dataset& ds, const std::string& comment = {}) {
    std::string out;
    if (!comment.empty()) out += "# " + comment + "\n";
    for (std::size_t c = 0; c < ds.feature_dim; ++c) {
        out += c < ds.feature_names.size() ? ds.feature_names[c] : "x" + std::to_string(c);
        out += ',';
    }
    out += ds.label_name + "\n";
    for (const auto& s : ds.samples) {
        for (double v : s.features) {
            out += format_double(v);
            out += ',';
        }
        out += format_double(s.label);
        out += '\n';
    }
    return out;
}

inline void write_csv(const std::filesystem::path& path, const Dataset& ds, const std::string& comment = {}) {
    write_file_atomic(path, to_csv(ds, comment));
}

// ---------------------------------------------------------------------------
// Binning

enum class ShotRegion { Many, Medium, Few };

inline const char* to_string(ShotRegion r) {
    switch (r) {
        case ShotRegion::Many: return "many";
        case ShotRegion::Medium: return "medium";
        case ShotRegion::Few: return "few";
    }
    return "?";
}

inline constexpr std::size_t kFewThreshold = 20;     // Few: count < 20
inline constexpr std::size_t kManyThreshold = 100;   // Many: count > 100

constexpr ShotRegion shot_region(std::size_t count) {
    if (count < kFewThreshold) return ShotRegion::Few;
    if (count <= kManyThreshold) return ShotRegion::Medium;
    return ShotRegion::Many;
}

struct BinConfig {
    enum class Mode { Count, Width };
    Mode mode = Mode::Count;
    std::size_t num_bins = 15;
    double bin_width = 1.0;
    /// When unset, the range is taken from the labels being binned.
    bool has_range = false;
    double label_min = 0.0;
    double label_max = 0.0;

    static BinConfig count(std::size_t n) {
        BinConfig c;
        c.mode = Mode::Count;
        c.num_bins = n;
        return c;
    }
    static BinConfig width(double w) {
        BinConfig c;
        c.mode = Mode::Width;
        c.bin_width = w;
        return c;
    }
    BinConfig with_range(double lo, double hi) const {
        BinConfig c = *this;
        c.has_range = true;
        c.label_min = lo;
        c.label_max = hi;
        return c;
    }

    void validate() const {
        if (mode == Mode::Count && num_bins < 1) throw UsageError("bin count must be at least 1");
        if (mode == Mode::Width && !(bin_width > 0.0 && std::isfinite(bin_width)))
            throw UsageError("bin width must be positive");
        if (has_range && !(label_min <= label_max)) throw UsageError("bin range must satisfy min <= max");
    }

    /// Edges for this config; `labels` supply the range when none is set.
    /// Count mode: equal-width bins exactly covering [min, max]. Width mode:
    /// bins [min + i·w, min + (i+1)·w) for i = 0..floor((max−min)/w).
    /// A degenerate range becomes one unit-width bin centred on the value.
    std::vector<double> edges(const Vector& labels) const {
        validate();
        double lo = label_min, hi = label_max;
        if (!has_range) {
            if (labels.empty()) throw DataError("cannot derive a bin range from no labels");
            auto [mn, mx] = std::minmax_element(labels.begin(), labels.end());
            lo = *mn;
            hi = *mx;
        }
        if (!(lo < hi)) return {lo - 0.5, lo + 0.5};
        std::vector<double> e;
        if (mode == Mode::Count) {
            e.resize(num_bins + 1);
            for (std::size_t i = 0; i <= num_bins; ++i)
                e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(num_bins);
            e.back() = hi;
        } else {
            auto n = static_cast<std::size_t>(std::floor((hi - lo) / bin_width)) + 1;
            e.resize(n + 1);
            for (std::size_t i = 0; i <= n; ++i) e[i] = lo + bin_width * static_cast<double>(i);
        }
        return e;
    }
};

/// Bin index of `label` under `edges`: edges[i] <= label < edges[i+1], with
/// the top edge inclusive. Out-of-range labels clamp to the boundary bins and
/// set `clamped`.
inline std::size_t bin_index(const std::vector<double>& edges, double label, bool* clamped = nullptr) {
    const std::size_t nb = edges.size() - 1;
    bool out = label < edges.front() || label > edges.back();
    if (clamped) *clamped = out;
    auto it = std::upper_bound(edges.begin(), edges.end(), label);
    if (it == edges.begin()) return 0;
    auto idx = static_cast<std::size_t>(it - edges.begin()) - 1;
    return std::min(idx, nb - 1);
}

struct BinAssignment {
    std::vector<std::size_t> indices;
    std::vector<double> edges;
    std::size_t clamped = 0;
};

inline BinAssignment assign_bins(const Vector& labels, const BinConfig& config) {
    if (!all_finite(labels)) throw DataError("labels must be finite");
    BinAssignment a;
    a.edges = config.edges(labels);
    a.indices.reserve(labels.size());
    for (double y : labels) {
        bool c = false;
        a.indices.push_back(bin_index(a.edges, y, &c));
        a.clamped += c ? 1 : 0;
    }
    return a;
}

struct BinStats {
    std::vector<double> edges;
    std::vector<std::size_t> counts;
    std::vector<ShotRegion> regions;

    std::size_t num_bins() const { return counts.size(); }
    std::size_t bin_of(double label) const { return bin_index(edges, label); }
    std::size_t nonempty_bins() const {
        return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
    }
    std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

inline BinStats make_bin_stats(std::vector<double> edges, const std::vector<std::size_t>& indices) {
    BinStats b;
    b.edges = std::move(edges);
    b.counts.assign(b.edges.size() - 1, 0);
    for (auto i : indices) ++b.counts[i];
    b.regions.reserve(b.counts.size());
    for (auto c : b.counts) b.regions.push_back(shot_region(c));
    return b;
}

inline BinStats compute_bin_stats(const Vector& labels, const BinConfig& config) {
    auto a = assign_bins(labels, config);
    return make_bin_stats(std::move(a.edges), a.indices);
}

/// Bin statistics of `train` over fixed edges (e.g. edges fitted on a larger set).
inline BinStats compute_bin_stats(const Vector& labels, const std::vector<double>& edges) {
    std::vector<std::size_t> idx;
    idx.reserve(labels.size());
    for (double y : labels) idx.push_back(bin_index(edges, y));
    return make_bin_stats(edges, idx);
}

inline ShotRegion region_of_label(double label, const BinStats& bins) { return bins.regions[bins.bin_of(label)]; }

// ---------------------------------------------------------------------------
// Splitting

struct SplitResult {
    Dataset train;
    Dataset test;
    std::vector<double> edges;
    std::vector<std::size_t> bin_counts;
    std::vector<std::size_t> test_counts;
    std::size_t cap = 0;
};

/// Per-bin test cap = floor(round(n·fraction) / nonempty_bins). Each nonempty
/// bin contributes min(cap, count − 1) test samples, so every nonempty bin keeps
/// at least one training sample. Both outputs preserve input row order.
inline SplitResult balanced_split(const Dataset& dataset, double test_fraction, const BinConfig& config,
                                  std::uint64_t seed) {
    if (dataset.empty()) throw DataError("cannot split an empty dataset");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw UsageError("test fraction must lie in (0, 1)");
    const auto labels = dataset.labels();
    auto assignment = assign_bins(labels, config);
    const std::size_t nb = assignment.edges.size() - 1;

    std::vector<std::vector<std::size_t>> members(nb);
    for (std::size_t i = 0; i < labels.size(); ++i) members[assignment.indices[i]].push_back(i);
    std::size_t nonempty = 0;
    for (const auto& m : members) nonempty += m.empty() ? 0 : 1;

    const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(dataset.size()) * test_fraction));
    const std::size_t cap = target / nonempty;
    if (cap == 0)
        throw UsageError("test fraction " + format_double(test_fraction) + " gives a per-bin test cap of 0 over " +
                         std::to_string(nonempty) + " nonempty bins; use a larger fraction or coarser bins");

    auto rng = make_rng(seed, 0x5b117);
    std::vector<char> is_test(dataset.size(), 0);
    SplitResult out;
    out.cap = cap;
    out.edges = assignment.edges;
    for (std::size_t b = 0; b < nb; ++b) {
        auto& m = members[b];
        out.bin_counts.push_back(m.size());
        std::size_t take = m.empty() ? 0 : std::min(cap, m.size() - 1);
        out.test_counts.push_back(take);
        if (take == 0) continue;
        // Partial Fisher-Yates: first `take` entries form a uniform sample.
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, m.size() - 1);
            std::swap(m[i], m[pick(rng)]);
            is_test[m[i]] = 1;
        }
    }
    out.train = dataset.like();
    out.test = dataset.like();
    for (std::size_t i = 0; i < dataset.size(); ++i)
        (is_test[i] ? out.test : out.train).add(dataset.samples[i]);
    return out;
}

inline nlohmann::ordered_json bin_config_json(const BinConfig& c) {
    nlohmann::ordered_json j;
    j["mode"] = c.mode == BinConfig::Mode::Count ? "count" : "width";
    if (c.mode == BinConfig::Mode::Count)
        j["num_bins"] = c.num_bins;
    else
        j["bin_width"] = c.bin_width;
    if (c.has_range) j["range"] = {c.label_min, c.label_max};
    return j;
}

inline nlohmann::ordered_json split_manifest(const SplitResult& s, double test_fraction, const BinConfig& config,
                                             std::uint64_t seed) {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["test_fraction"] = test_fraction;
    j["bins"] = bin_config_json(config);
    j["edges"] = s.edges;
    j["per_bin_cap"] = s.cap;
    j["bin_counts"] = s.bin_counts;
    j["test_counts"] = s.test_counts;
    j["train_size"] = s.train.size();
    j["test_size"] = s.test.size();
    return j;
}

}  // namespace imctx
