#pragma once

// Config-driven experiment pipelines: split, run, ablate, bound and curves,
// with CSV/text reports and manifests.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "imctx/analysis.hpp"
#include "imctx/common.hpp"
#include "imctx/data.hpp"
#include "imctx/external.hpp"
#include "imctx/io.hpp"
#include "imctx/predict.hpp"
#include "imctx/resample.hpp"
#include "imctx/retrieval.hpp"
#include "imctx/transform.hpp"
#include "imctx/transformer.hpp"

namespace imctx {

// ---------------------------------------------------------------------------
// Configuration

enum class PredictorKind { Average, Ridge, Ols, IclCheckpoint, External };

inline const char* to_string(PredictorKind p) {
    switch (p) {
        case PredictorKind::Average: return "average";
        case PredictorKind::Ridge: return "ridge";
        case PredictorKind::Ols: return "ols";
        case PredictorKind::IclCheckpoint: return "icl-checkpoint";
        case PredictorKind::External: return "external";
    }
    return "?";
}

inline PredictorKind parse_predictor(const std::string& s) {
    if (s == "average") return PredictorKind::Average;
    if (s == "ridge") return PredictorKind::Ridge;
    if (s == "ols") return PredictorKind::Ols;
    if (s == "icl-checkpoint" || s == "icl") return PredictorKind::IclCheckpoint;
    if (s == "external") return PredictorKind::External;
    throw UsageError("unknown predictor: " + s);
}

namespace detail {

inline std::string trim(std::string s) {
    auto issp = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && issp(static_cast<unsigned char>(s.back()))) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && issp(static_cast<unsigned char>(s[i]))) ++i;
    return s.substr(i);
}

inline double to_double(const std::string& key, const std::string& v) {
    bool ok = false;
    double d = parse_double(v, ok);
    if (!ok || !std::isfinite(d)) throw UsageError("config key " + key + ": expected a number, got '" + v + "'");
    return d;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
    std::string t = trim(v);
    std::uint64_t out = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), out);
    if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size())
        throw UsageError("config key " + key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
    std::string t = trim(v);
    if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return false;
    throw UsageError("config key " + key + ": expected a boolean, got '" + v + "'");
}

template <typename T>
std::vector<T> to_list(const std::string& key, const std::string& v, T (*conv)(const std::string&, const std::string&)) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(conv(key, item));
    }
    return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
    return static_cast<std::size_t>(to_uint(key, v));
}

}  // namespace detail

struct ExperimentConfig {
    std::filesystem::path dataset;
    /// Fixed test set; when set, no split is performed and seeds only drive resampling.
    std::filesystem::path test_path;
    std::string label_column = "-1";
    bool has_header = true;
    BinConfig bins = BinConfig::count(15);
    double test_fraction = 0.1;
    Strategy strategy = Strategy::Augmented;
    std::size_t k_train = 10;
    std::size_t k_inverse = 10;
    Metric metric = Metric::Cosine;
    PredictorKind predictor = PredictorKind::Average;
    double ridge_lambda = 1e-3;
    /// Chunk width; 0 means no chunking (the model width is used for icl-checkpoint).
    std::size_t chunk_dim = 0;
    std::filesystem::path checkpoint;
    std::filesystem::path external_config;
    std::optional<double> sigma;
    std::size_t k_max = 50;
    std::vector<std::size_t> curve_ks;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::filesystem::path output_dir = "out";
    /// Directory that relative paths resolve against.
    std::filesystem::path base_dir;

    /// Context size for a non-augmented strategy.
    std::size_t k_total() const { return k_train + k_inverse; }

    /// Sets one key, e.g. "retrieval.k_train". Unknown keys are rejected.
    void set(const std::string& key, const std::string& raw) {
        using namespace detail;
        const std::string v = trim(raw);
        if (key == "data.path") dataset = v;
        else if (key == "data.test_path") test_path = v;
        else if (key == "data.label_column") label_column = v;
        else if (key == "data.header") has_header = to_bool(key, v);
        else if (key == "bins.mode") {
            if (v == "count") bins.mode = BinConfig::Mode::Count;
            else if (v == "width") bins.mode = BinConfig::Mode::Width;
            else throw UsageError("config key bins.mode: expected count or width, got '" + v + "'");
        } else if (key == "bins.count") {
            bins.num_bins = to_size(key, v);
            bins.mode = BinConfig::Mode::Count;
        } else if (key == "bins.width") {
            bins.bin_width = to_double(key, v);
            bins.mode = BinConfig::Mode::Width;
        } else if (key == "bins.min") {
            bins.label_min = to_double(key, v);
            bins.has_range = true;
        } else if (key == "bins.max") {
            bins.label_max = to_double(key, v);
            bins.has_range = true;
        } else if (key == "split.test_fraction") test_fraction = to_double(key, v);
        else if (key == "retrieval.strategy") strategy = parse_strategy(v);
        else if (key == "retrieval.k_train") k_train = to_size(key, v);
        else if (key == "retrieval.k_inverse") k_inverse = to_size(key, v);
        else if (key == "retrieval.metric") {
            if (v == "cosine") metric = Metric::Cosine;
            else if (v == "euclidean") metric = Metric::Euclidean;
            else throw UsageError("config key retrieval.metric: expected cosine or euclidean, got '" + v + "'");
        } else if (key == "predictor.kind") predictor = parse_predictor(v);
        else if (key == "predictor.lambda") ridge_lambda = to_double(key, v);
        else if (key == "predictor.chunk_dim") chunk_dim = to_size(key, v);
        else if (key == "predictor.checkpoint") checkpoint = v;
        else if (key == "predictor.external_config") external_config = v;
        else if (key == "analysis.sigma") {
            if (v.empty() || v == "auto") sigma.reset();
            else sigma = to_double(key, v);
        } else if (key == "analysis.k_max") k_max = to_size(key, v);
        else if (key == "analysis.curve_ks") curve_ks = to_list<std::size_t>(key, v, &to_size);
        else if (key == "run.seeds") seeds = to_list<std::uint64_t>(key, v, &to_uint);
        else if (key == "run.output_dir") output_dir = v;
        else throw UsageError("unknown config key: " + key);
    }

    /// Applies "key=value".
    void set_assignment(const std::string& kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("override must look like section.key=value: " + kv);
        set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }

    /// Reads an INI file with [section] headers and key = value lines.
    static ExperimentConfig load(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path)) throw UsageError("config file not found: " + path.string());
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::ini_parser::read_ini(path.string(), tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw UsageError("malformed config " + path.string() + ": " + e.what());
        }
        ExperimentConfig c;
        c.base_dir = path.parent_path();
        for (const auto& [section, child] : tree) {
            if (child.empty()) throw UsageError("config key outside a section: " + section);
            for (const auto& [key, value] : child) c.set(section + "." + key, value.get_value<std::string>());
        }
        return c;
    }

    std::filesystem::path resolve(const std::filesystem::path& p) const {
        if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
        return base_dir / p;
    }

    void validate() const {
        if (seeds.empty()) throw UsageError("seed list is empty");
        bins.validate();
        if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw UsageError("split.test_fraction must lie in (0, 1)");
        if (k_total() == 0) throw UsageError("retrieval needs k_train + k_inverse >= 1");
        if (strategy == Strategy::Augmented && k_train == 0 && k_inverse == 0)
            throw UsageError("augmented retrieval needs at least one neighbour");
        if (!(ridge_lambda > 0.0)) throw UsageError("predictor.lambda must be positive");
        if (predictor == PredictorKind::IclCheckpoint && checkpoint.empty())
            throw UsageError("predictor icl-checkpoint needs predictor.checkpoint");
        if (predictor == PredictorKind::External && external_config.empty())
            throw UsageError("predictor external needs predictor.external_config");
        if (k_max == 0) throw UsageError("analysis.k_max must be at least 1");
        if (sigma && !(*sigma >= 0.0)) throw UsageError("analysis.sigma must be non-negative");
    }

    /// Everything that affects results (output location excluded).
    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["data"] = {{"path", dataset.generic_string()},
                     {"test_path", test_path.generic_string()},
                     {"label_column", label_column},
                     {"header", has_header}};
        j["bins"] = bin_config_json(bins);
        j["split"] = {{"test_fraction", test_fraction}};
        j["retrieval"] = {{"strategy", to_string(strategy)},
                          {"k_train", k_train},
                          {"k_inverse", k_inverse},
                          {"metric", metric == Metric::Cosine ? "cosine" : "euclidean"}};
        j["predictor"] = {{"kind", to_string(predictor)},
                          {"lambda", ridge_lambda},
                          {"chunk_dim", chunk_dim},
                          {"checkpoint", checkpoint.generic_string()},
                          {"external_config", external_config.generic_string()}};
        j["analysis"] = {{"sigma", sigma ? nlohmann::ordered_json(*sigma) : nlohmann::ordered_json("auto")},
                         {"k_max", k_max},
                         {"curve_ks", curve_ks}};
        j["run"] = {{"seeds", seeds}};
        return j;
    }

    std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

inline std::string seed_list(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
    return s;
}

/// One-line provenance record prefixed to every artifact.
inline std::string manifest_line(const std::string& command, const std::string& config_hash,
                                 const std::vector<std::uint64_t>& seeds, const std::string& extra = {}) {
    std::string s = "imctx " + command + " config_hash=" + config_hash + " seeds=" + seed_list(seeds);
    if (!extra.empty()) s += " " + extra;
    return s;
}

// ---------------------------------------------------------------------------
// Parallel execution

/// Worker count from IMCTX_WORKERS (default 1).
inline std::size_t worker_count() {
    const char* v = std::getenv("IMCTX_WORKERS");
    if (v == nullptr || *v == '\0') return 1;
    std::uint64_t n = detail::to_uint("IMCTX_WORKERS", v);
    if (n == 0) throw UsageError("IMCTX_WORKERS must be at least 1");
    return static_cast<std::size_t>(std::min<std::uint64_t>(n, 256));
}

/// Runs fn(worker, i) for i in [0, n) on contiguous per-worker ranges; the
/// exception of the lowest failing index is rethrown.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t worker, std::size_t i)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(0, i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(w, i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Predictors

/// Native transformer as a context predictor. Labels are standardized per
/// prompt before entering the model and mapped back afterwards.
class IclCheckpointPredictor {
public:
    explicit IclCheckpointPredictor(std::shared_ptr<const icl::IclModel<float>> model) : model_(std::move(model)) {}

    std::size_t input_dim() const { return model_->config().input_dim; }

    Prediction operator()(const Prompt& p) const {
        if (p.ys.empty()) throw UsageError("icl-checkpoint needs a non-empty context");
        double mean = 0.0;
        for (double y : p.ys) mean += y;
        mean /= static_cast<double>(p.ys.size());
        double var = 0.0;
        for (double y : p.ys) var += (y - mean) * (y - mean);
        double sd = std::sqrt(var / static_cast<double>(p.ys.size()));
        if (!(sd > 1e-12)) sd = 1.0;
        Vector ys(p.ys.size());
        for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = (p.ys[i] - mean) / sd;
        double v = model_->predict(p.xs, ys, p.query) * sd + mean;
        if (!std::isfinite(v)) throw RuntimeError("icl-checkpoint produced a non-finite prediction");
        return {v, std::nullopt, "icl-checkpoint"};
    }

private:
    std::shared_ptr<const icl::IclModel<float>> model_;
};

// ---------------------------------------------------------------------------
// Pipelines

struct SeedData {
    Dataset train, test;
    BinStats bins;
};

/// Train/test data for one seed: a balanced split, or the fixed test set.
inline SeedData prepare_seed_data(const ExperimentConfig& cfg, const Dataset& data,
                                  const std::optional<Dataset>& fixed_test, std::uint64_t seed) {
    SeedData s;
    if (fixed_test) {
        s.train = data;
        s.test = *fixed_test;
        s.bins = compute_bin_stats(s.train.labels(), cfg.bins);
    } else {
        auto split = balanced_split(data, cfg.test_fraction, cfg.bins, seed);
        s.train = std::move(split.train);
        s.test = std::move(split.test);
        s.bins = compute_bin_stats(s.train.labels(), split.edges);
    }
    return s;
}

struct LoadedData {
    Dataset data;
    std::optional<Dataset> fixed_test;
};

inline LoadedData load_experiment_data(const ExperimentConfig& cfg) {
    if (cfg.dataset.empty()) throw UsageError("config needs data.path");
    LoadedData d;
    d.data = load_csv(cfg.resolve(cfg.dataset), cfg.label_column, cfg.has_header);
    if (!cfg.test_path.empty()) {
        d.fixed_test = load_csv(cfg.resolve(cfg.test_path), cfg.label_column, cfg.has_header);
        if (d.fixed_test->feature_dim != d.data.feature_dim)
            throw DataError("test set has " + std::to_string(d.fixed_test->feature_dim) + " features, train has " +
                            std::to_string(d.data.feature_dim));
    }
    return d;
}

struct SeedResult {
    std::uint64_t seed = 0;
    RegionMetrics metrics;
    Vector labels, predictions;
    std::vector<ShotRegion> regions;
    ResamplePlan plan;
};

/// Shared, seed-independent predictor resources.
struct PredictorResources {
    std::shared_ptr<const icl::IclModel<float>> icl_model;
    std::optional<ExternalPredictorConfig> external;

    static PredictorResources load(const ExperimentConfig& cfg) {
        PredictorResources r;
        if (cfg.predictor == PredictorKind::IclCheckpoint)
            r.icl_model = std::make_shared<const icl::IclModel<float>>(
                icl::IclModel<float>::load(cfg.resolve(cfg.checkpoint)));
        if (cfg.predictor == PredictorKind::External) r.external = ExternalPredictorConfig::load(cfg.resolve(cfg.external_config));
        return r;
    }
};

/// One full evaluation: resample, index, retrieve, predict, score.
inline SeedResult run_seed(const ExperimentConfig& cfg, const SeedData& sd, std::uint64_t seed,
                           const PredictorResources& res, std::size_t workers) {
    SeedResult out;
    out.seed = seed;
    const std::string where = "seed " + std::to_string(seed) + ": ";
    try {
        std::vector<Vector> train_x;
        for (const auto& s : sd.train.samples) train_x.push_back(s.features);
        const auto transform = fit_transform(train_x);
        auto pools = build_pools(sd.train, cfg.strategy, sd.bins, seed);
        out.plan = pools.plan;
        RetrievalIndex primary(pools.primary, transform, cfg.metric, PoolTag::Train);
        std::optional<RetrievalIndex> inverse;
        if (pools.inverse) inverse.emplace(*pools.inverse, transform, cfg.metric, PoolTag::Inverse);
        const bool augmented = cfg.strategy == Strategy::Augmented;

        std::optional<LinearFit> ols;
        if (cfg.predictor == PredictorKind::Ols) ols = fit_ols(sd.train);

        const std::size_t n = sd.test.size();
        out.predictions.assign(n, 0.0);
        workers = cfg.predictor == PredictorKind::External ? std::min(workers, n) : workers;
        std::vector<std::unique_ptr<ExternalPredictor>> children;
        if (res.external)
            for (std::size_t w = 0; w < std::max<std::size_t>(1, std::min(workers, n)); ++w)
                children.push_back(std::make_unique<ExternalPredictor>(*res.external));

        std::optional<IclCheckpointPredictor> icl_pred;
        if (res.icl_model) icl_pred.emplace(res.icl_model);

        parallel_for(n, workers, [&](std::size_t w, std::size_t i) {
            const auto& q = sd.test.samples[i].features;
            if (ols) {
                out.predictions[i] = (*ols)(q);
                return;
            }
            ContextSet ctx = augmented ? augmented_retrieve(primary, &*inverse, q, transform, cfg.k_train, cfg.k_inverse)
                                       : vanilla_retrieve(primary, q, transform, cfg.k_total());
            Prompt p = make_prompt(ctx);
            ContextPredictor base;
            std::size_t m = cfg.chunk_dim;
            switch (cfg.predictor) {
                case PredictorKind::Average: base = predict_average; break;
                case PredictorKind::Ridge:
                    base = [&](const Prompt& pp) { return predict_ridge_icl(pp, cfg.ridge_lambda); };
                    break;
                case PredictorKind::IclCheckpoint:
                    base = [&](const Prompt& pp) { return (*icl_pred)(pp); };
                    if (m == 0) m = icl_pred->input_dim();
                    break;
                case PredictorKind::External:
                    base = [&](const Prompt& pp) {
                        return Prediction{children[w]->predict_one(pp), std::nullopt, "external"};
                    };
                    if (m == 0) m = res.external->input_dim;
                    break;
                case PredictorKind::Ols: break;
            }
            out.predictions[i] = (m == 0 ? base(p) : chunk_ensemble(base, p, m)).value;
        });
        for (auto& c : children) c->finish();

        out.labels = sd.test.labels();
        for (double y : out.labels) out.regions.push_back(region_of_label(y, sd.bins));
        out.metrics = per_region_report(out.labels, out.predictions, sd.bins);
    } catch (const DataError& e) {
        throw DataError(where + e.what());
    } catch (const UsageError& e) {
        throw UsageError(where + e.what());
    } catch (const RuntimeError& e) {
        throw RuntimeError(where + e.what());
    }
    return out;
}

struct RunOutput {
    EvalReport report;
    std::vector<SeedResult> seeds;
};

inline RunOutput run_experiment(const ExperimentConfig& cfg, const LoadedData& data, std::size_t workers) {
    cfg.validate();
    auto res = PredictorResources::load(cfg);
    RunOutput out;
    for (auto seed : cfg.seeds) {
        auto sd = prepare_seed_data(cfg, data.data, data.fixed_test, seed);
        out.seeds.push_back(run_seed(cfg, sd, seed, res, workers));
        out.report.seeds.push_back(seed);
        out.report.per_seed.push_back(out.seeds.back().metrics);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {
inline std::string opt_num(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }
}  // namespace detail

inline std::string per_seed_csv(const EvalReport& r, const std::string& manifest) {
    std::string s = "# " + manifest + "\nseed,region,count,mae,rmse,mse,gm\n";
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) {
        for (auto reg : kRegions) {
            const auto& m = r.per_seed[i][reg];
            s += std::to_string(r.seeds[i]) + "," + to_string(reg) + "," + std::to_string(r.per_seed[i].count(reg));
            if (m)
                s += "," + format_double(m->mae) + "," + format_double(m->rmse) + "," + format_double(m->mse) + "," +
                     format_double(m->gm);
            else
                s += ",,,,";
            s += "\n";
        }
    }
    return s;
}

inline std::string summary_csv(const EvalReport& r, const std::string& manifest) {
    std::string s = "# " + manifest +
                    "\nregion,seeds,mae_mean,mae_std,rmse_mean,rmse_std,mse_mean,mse_std,gm_mean,gm_std\n";
    for (auto reg : kRegions) {
        auto sm = r.summary(reg);
        s += std::string(to_string(reg)) + "," + std::to_string(sm ? sm->seeds : 0);
        if (sm)
            s += "," + format_double(sm->mean.mae) + "," + format_double(sm->stddev.mae) + "," +
                 format_double(sm->mean.rmse) + "," + format_double(sm->stddev.rmse) + "," +
                 format_double(sm->mean.mse) + "," + format_double(sm->stddev.mse) + "," +
                 format_double(sm->mean.gm) + "," + format_double(sm->stddev.gm);
        else
            s += ",,,,,,,,";
        s += "\n";
    }
    return s;
}

/// Aligned plain-text table of seed means ± std.
inline std::string summary_table(const EvalReport& r, const std::string& title) {
    auto cell = [](double m, double sd) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", m, sd);
        return std::string(buf);
    };
    std::vector<std::vector<std::string>> rows = {{"region", "n", "MAE", "RMSE", "MSE", "GM"}};
    for (std::size_t i = 0; i < kRegions.size(); ++i) {
        auto reg = kRegions[i];
        auto sm = r.summary(reg);
        std::size_t n = r.per_seed.empty() ? 0 : r.per_seed.front().count(reg);
        if (sm)
            rows.push_back({to_string(reg), std::to_string(n), cell(sm->mean.mae, sm->stddev.mae),
                            cell(sm->mean.rmse, sm->stddev.rmse), cell(sm->mean.mse, sm->stddev.mse),
                            cell(sm->mean.gm, sm->stddev.gm)});
        else
            rows.push_back({to_string(reg), std::to_string(n), "-", "-", "-", "-"});
    }
    std::vector<std::size_t> width(rows.front().size(), 0);
    auto display_len = [](const std::string& s) {
        std::size_t n = 0;
        for (unsigned char c : s) n += (c & 0xc0) != 0x80;  // count UTF-8 code points
        return n;
    };
    for (const auto& row : rows)
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], display_len(row[c]));
    std::string out = title + "\n";
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            out += row[c] + std::string(width[c] - display_len(row[c]) + (c + 1 < row.size() ? 2 : 0), ' ');
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += "\n";
    }
    return out;
}

inline std::string predictions_csv(const SeedResult& r, const Dataset& test, const std::string& manifest) {
    std::string s = "# " + manifest + "\nid,label,prediction,region\n";
    for (std::size_t i = 0; i < r.labels.size(); ++i)
        s += std::to_string(test.samples[i].id) + "," + format_double(r.labels[i]) + "," +
             format_double(r.predictions[i]) + "," + to_string(r.regions[i]) + "\n";
    return s;
}

/// Writes per-seed and summary CSVs, the text table, per-seed predictions and
/// a JSON manifest into `dir`.
inline void write_run_outputs(const std::filesystem::path& dir, const ExperimentConfig& cfg, const LoadedData& data,
                              const RunOutput& run, const std::string& command) {
    const auto manifest = manifest_line(command, cfg.hash(), cfg.seeds,
                                        std::string("strategy=") + to_string(cfg.strategy) +
                                            " predictor=" + to_string(cfg.predictor));
    write_file_atomic(dir / "report_per_seed.csv", per_seed_csv(run.report, manifest));
    write_file_atomic(dir / "report_summary.csv", summary_csv(run.report, manifest));
    write_file_atomic(dir / "report.txt", "# " + manifest + "\n" +
                                              summary_table(run.report, std::string("strategy ") +
                                                                            to_string(cfg.strategy) + ", predictor " +
                                                                            to_string(cfg.predictor)));
    for (const auto& sr : run.seeds) {
        auto sd = prepare_seed_data(cfg, data.data, data.fixed_test, sr.seed);
        write_file_atomic(dir / ("predictions_seed" + std::to_string(sr.seed) + ".csv"),
                          predictions_csv(sr, sd.test, manifest));
    }
    nlohmann::ordered_json m;
    m["manifest"] = manifest;
    m["command"] = command;
    m["config_hash"] = cfg.hash();
    m["config"] = cfg.to_json();
    m["resample_plans"] = nlohmann::ordered_json::array();
    for (const auto& sr : run.seeds) m["resample_plans"].push_back(sr.plan.to_json());
    write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
    Strategy strategy;
    Region region;
    MetricSummary summary;
    std::size_t rank = 0;
};

/// Ranks strategies per region by mean MAE (ties keep strategy order).
inline std::vector<AblationRow> rank_strategies(const std::vector<std::pair<Strategy, EvalReport>>& reports) {
    std::vector<AblationRow> rows;
    for (auto reg : kRegions) {
        std::vector<AblationRow> block;
        for (const auto& [st, rep] : reports)
            if (auto sm = rep.summary(reg)) block.push_back({st, reg, *sm, 0});
        std::vector<std::size_t> order(block.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](auto a, auto b) { return block[a].summary.mean.mae < block[b].summary.mean.mae; });
        for (std::size_t r = 0; r < order.size(); ++r) block[order[r]].rank = r + 1;
        rows.insert(rows.end(), block.begin(), block.end());
    }
    return rows;
}

inline std::string comparison_csv(const std::vector<AblationRow>& rows, const std::string& manifest) {
    std::string s = "# " + manifest + "\nregion,strategy,mae_mean,rmse_mean,mse_mean,gm_mean,mae_std,rank\n";
    for (const auto& r : rows)
        s += std::string(to_string(r.region)) + "," + to_string(r.strategy) + "," +
             format_double(r.summary.mean.mae) + "," + format_double(r.summary.mean.rmse) + "," +
             format_double(r.summary.mean.mse) + "," + format_double(r.summary.mean.gm) + "," +
             format_double(r.summary.stddev.mae) + "," + std::to_string(r.rank) + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// Bound curves

struct RegionBound {
    Region region;
    std::size_t test_row = 0;
    BoundCurve curve;
};

/// Representative query of a region: among test points in the region, sorted
/// by (training count of the label's bin, label, row), the median element.
inline std::optional<std::size_t> representative_query(const Dataset& test, const BinStats& bins, Region region) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < test.size(); ++i)
        if (to_region(region_of_label(test.samples[i].label, bins)) == region) rows.push_back(i);
    if (rows.empty()) return std::nullopt;
    auto key = [&](std::size_t i) {
        return std::make_tuple(bins.counts[bins.bin_of(test.samples[i].label)], test.samples[i].label, i);
    };
    std::sort(rows.begin(), rows.end(), [&](auto a, auto b) { return key(a) < key(b); });
    return rows[(rows.size() - 1) / 2];
}

/// Bound curves for the representative query of each nonempty region.
/// Regions without test points are reported in `skipped`.
inline std::vector<RegionBound> region_bounds(const SeedData& sd, double sigma, std::size_t k_max,
                                              std::vector<Region>* skipped = nullptr) {
    std::vector<RegionBound> out;
    const auto labels = sd.train.labels();
    const std::size_t kk = std::min(k_max, labels.size());
    for (auto reg : {Region::Many, Region::Medium, Region::Few}) {
        auto row = representative_query(sd.test, sd.bins, reg);
        if (!row) {
            if (skipped) skipped->push_back(reg);
            continue;
        }
        const double y = sd.test.samples[*row].label;
        auto cands = ideal_candidates(y, labels);
        out.push_back({reg, *row, bound_curve(y, cands, sigma, kk)});
    }
    return out;
}

inline std::string bound_csv(const std::vector<RegionBound>& bounds, const std::string& manifest) {
    std::string s = "# " + manifest + "\nregion,query_label,k,bias2,variance,total\n";
    for (const auto& b : bounds)
        for (std::size_t i = 0; i < b.curve.k.size(); ++i)
            s += std::string(to_string(b.region)) + "," + format_double(b.curve.query_label) + "," +
                 std::to_string(b.curve.k[i]) + "," + format_double(b.curve.bias2[i]) + "," +
                 format_double(b.curve.variance[i]) + "," + format_double(b.curve.total[i]) + "\n";
    return s;
}

inline std::string curve_csv(const std::vector<CurvePoint>& pts, const std::string& manifest) {
    std::string s = "# " + manifest + "\nk,region,count,mse\n";
    for (const auto& p : pts)
        s += std::to_string(p.k) + "," + to_string(p.region) + "," + std::to_string(p.count) + "," +
             detail::opt_num(p.mse) + "\n";
    return s;
}

}  // namespace imctx
