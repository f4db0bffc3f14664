// imctx command-line interface.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "imctx/imctx.hpp"

namespace fs = std::filesystem;
using namespace imctx;

namespace {

struct ExperimentFlags {
    std::string config;
    std::vector<std::string> sets;
    std::string data, strategy, predictor, out, seeds;

    void add_to(CLI::App* app) {
        app->add_option("-c,--config", config, "INI config file");
        app->add_option("-s,--set", sets, "Override a config key: section.key=value (repeatable)");
        app->add_option("--data", data, "Dataset CSV (data.path)");
        app->add_option("--strategy", strategy, "vanilla|downsample|inverse|smoter|augmented");
        app->add_option("--predictor", predictor, "average|ridge|ols|icl-checkpoint|external");
        app->add_option("--seeds", seeds, "Comma-separated seed list (run.seeds)");
        app->add_option("-o,--out", out, "Output directory (run.output_dir)");
    }

    ExperimentConfig resolve() const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : ExperimentConfig::load(config);
        if (!data.empty()) c.set("data.path", fs::absolute(data).string());
        if (!strategy.empty()) c.set("retrieval.strategy", strategy);
        if (!predictor.empty()) c.set("predictor.kind", predictor);
        if (!seeds.empty()) c.set("run.seeds", seeds);
        if (!out.empty()) c.set("run.output_dir", out);
        for (const auto& kv : sets) c.set_assignment(kv);
        c.validate();
        return c;
    }
};

std::string one_line(std::string s) {
    for (auto& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

int cmd_split(const ExperimentConfig& cfg) {
    if (!cfg.test_path.empty()) throw UsageError("split does not apply when data.test_path is set");
    auto data = load_csv(cfg.resolve(cfg.dataset), cfg.label_column, cfg.has_header);
    for (auto seed : cfg.seeds) {
        auto split = balanced_split(data, cfg.test_fraction, cfg.bins, seed);
        const auto dir = cfg.output_dir / ("seed" + std::to_string(seed));
        const auto manifest = manifest_line("split", cfg.hash(), {seed});
        write_csv(dir / "train.csv", split.train, manifest);
        write_csv(dir / "test.csv", split.test, manifest);
        auto j = split_manifest(split, cfg.test_fraction, cfg.bins, seed);
        nlohmann::ordered_json m;
        m["manifest"] = manifest;
        m["config_hash"] = cfg.hash();
        m["dataset"] = cfg.dataset.generic_string();
        m["split"] = j;
        write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
        std::printf("seed %llu: %zu train, %zu test, per-bin cap %zu -> %s\n", static_cast<unsigned long long>(seed),
                    split.train.size(), split.test.size(), split.cap, dir.string().c_str());
    }
    return 0;
}

int cmd_run(const ExperimentConfig& cfg) {
    auto data = load_experiment_data(cfg);
    auto run = run_experiment(cfg, data, worker_count());
    write_run_outputs(cfg.output_dir, cfg, data, run, "run");
    std::fputs(summary_table(run.report, std::string("strategy ") + to_string(cfg.strategy) + ", predictor " +
                                             to_string(cfg.predictor))
                   .c_str(),
               stdout);
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
    auto data = load_experiment_data(cfg);
    std::vector<std::pair<Strategy, EvalReport>> reports;
    for (auto st : kAllStrategies) {
        ExperimentConfig c = cfg;
        c.strategy = st;
        auto run = run_experiment(c, data, worker_count());
        write_run_outputs(cfg.output_dir / to_string(st), c, data, run, "ablate");
        reports.emplace_back(st, run.report);
    }
    auto rows = rank_strategies(reports);
    write_file_atomic(cfg.output_dir / "comparison.csv",
                      comparison_csv(rows, manifest_line("ablate", cfg.hash(), cfg.seeds)));
    std::printf("%-8s %-11s %10s %10s %4s\n", "region", "strategy", "MAE", "RMSE", "rank");
    for (const auto& r : rows)
        std::printf("%-8s %-11s %10.4f %10.4f %4zu\n", to_string(r.region), to_string(r.strategy),
                    r.summary.mean.mae, r.summary.mean.rmse, r.rank);
    return 0;
}

ContextPredictor curve_predictor(const ExperimentConfig& cfg, const PredictorResources& res) {
    switch (cfg.predictor) {
        case PredictorKind::Average: return predict_average;
        case PredictorKind::Ridge: {
            double lam = cfg.ridge_lambda;
            return [lam](const Prompt& p) { return predict_ridge_icl(p, lam); };
        }
        case PredictorKind::IclCheckpoint: {
            IclCheckpointPredictor icl(res.icl_model);
            std::size_t m = cfg.chunk_dim ? cfg.chunk_dim : icl.input_dim();
            return [icl, m](const Prompt& p) {
                return chunk_ensemble([&icl](const Prompt& q) { return icl(q); }, p, m);
            };
        }
        default: throw UsageError(std::string("empirical curves do not support predictor ") + to_string(cfg.predictor));
    }
}

int cmd_bound(const ExperimentConfig& cfg) {
    auto data = load_experiment_data(cfg);
    const auto seed = cfg.seeds.front();
    auto sd = prepare_seed_data(cfg, data.data, data.fixed_test, seed);
    const double sigma = estimate_sigma(sd.train, cfg.sigma);
    std::vector<Region> skipped;
    auto bounds = region_bounds(sd, sigma, cfg.k_max, &skipped);
    for (auto r : skipped) std::fprintf(stderr, "notice: region %s has no test points; skipped\n", to_string(r));
    const auto manifest = manifest_line("bound", cfg.hash(), {seed}, "sigma=" + format_double(sigma));
    write_file_atomic(cfg.output_dir / "bound.csv", bound_csv(bounds, manifest));
    for (const auto& b : bounds) {
        auto am = argmin_total(b.curve);
        std::printf("%-7s query label %-10.4g argmin k %-4zu total(min) %-10.4g total(k_max) %.4g\n",
                    to_string(b.region), b.curve.query_label, b.curve.k[am], b.curve.total[am], b.curve.total.back());
    }
    if (!cfg.curve_ks.empty()) {
        auto res = PredictorResources::load(cfg);
        std::vector<Vector> xs;
        for (const auto& s : sd.train.samples) xs.push_back(s.features);
        auto transform = fit_transform(xs);
        auto pools = build_pools(sd.train, cfg.strategy, sd.bins, seed);
        RetrievalIndex primary(pools.primary, transform, cfg.metric, PoolTag::Train);
        std::optional<RetrievalIndex> inverse;
        if (pools.inverse) inverse.emplace(*pools.inverse, transform, cfg.metric, PoolTag::Inverse);
        auto pts = empirical_error_curve(sd.test, primary, inverse ? &*inverse : nullptr, transform,
                                         curve_predictor(cfg, res), cfg.curve_ks, sd.bins);
        write_file_atomic(cfg.output_dir / "curve.csv",
                          curve_csv(pts, manifest_line("bound", cfg.hash(), {seed},
                                                       std::string("strategy=") + to_string(cfg.strategy) +
                                                           " predictor=" + to_string(cfg.predictor) + " metric=mse")));
    }
    std::printf("sigma %s -> %s\n", format_double(sigma).c_str(), (cfg.output_dir / "bound.csv").string().c_str());
    return 0;
}

struct TrainFlags {
    std::string out;
    std::string function = "linear";
    double noise = 0.0;
    icl::IclConfig cfg;
};

int cmd_train_icl(const TrainFlags& f) {
    f.cfg.validate();
    icl::TaskSampler sampler(icl::parse_function_class(f.function), f.cfg.input_dim, f.noise, f.cfg.seed);
    nlohmann::ordered_json cj = f.cfg.to_json();
    cj["function"] = f.function;
    cj["noise"] = f.noise;
    const std::string hash = hex64(fnv1a64(cj.dump()));
    const auto manifest = manifest_line("train-icl", hash, {f.cfg.seed});
    const fs::path dir = f.out;
    const std::size_t every = std::max<std::size_t>(1, f.cfg.steps / 10);
    auto result = icl::train<float>(f.cfg, sampler, [&](std::size_t step, double loss) {
        if (step % every == 0) std::fprintf(stderr, "step %zu/%zu loss %.5f\n", step, f.cfg.steps, loss);
    });
    std::string csv = "# " + manifest + "\nstep,loss\n";
    for (std::size_t i = 0; i < result.losses.size(); ++i)
        csv += std::to_string(i + 1) + "," + format_double(result.losses[i]) + "\n";
    write_file_atomic(dir / "loss.csv", csv);
    for (const auto& [step, params] : result.checkpoints) {
        icl::IclModel<float> snap(f.cfg);
        snap.parameters() = params;
        auto j = snap.to_json(false);
        j["step"] = step;
        j["manifest"] = manifest;
        char name[64];
        std::snprintf(name, sizeof(name), "step_%06zu.json", step);
        write_file_atomic(dir / "checkpoints" / name, j.dump() + "\n");
    }
    auto j = result.model.to_json(true);
    j["manifest"] = manifest;
    j["sampler"] = {{"function", f.function}, {"noise", f.noise}};
    write_file_atomic(dir / "checkpoint.json", j.dump() + "\n");
    std::printf("trained %zu steps; final loss %s -> %s\n", f.cfg.steps,
                result.losses.empty() ? "n/a" : format_double(result.losses.back()).c_str(),
                (dir / "checkpoint.json").string().c_str());
    return 0;
}

struct EvalFlags {
    std::string checkpoint, out, ks = "0,1,2,5,10,20,40", function = "linear";
    double noise = 0.0;
    std::size_t tasks = 1000;
    std::uint64_t seed = 1000;
};

int cmd_eval_icl(const EvalFlags& f) {
    auto model = icl::IclModel<float>::load(f.checkpoint);
    auto ks = detail::to_list<std::size_t>("--ks", f.ks, &detail::to_size);
    if (ks.empty()) throw UsageError("--ks is empty");
    if (f.tasks == 0) throw UsageError("--tasks must be positive");
    icl::TaskSampler sampler(icl::parse_function_class(f.function), model.config().input_dim, f.noise, f.seed);
    auto pts = icl::evaluate_incontext(model, sampler, ks, f.tasks);
    nlohmann::ordered_json cj = {{"checkpoint", f.checkpoint}, {"ks", ks},         {"tasks", f.tasks},
                                 {"function", f.function},     {"noise", f.noise}};
    const auto manifest = manifest_line("eval-icl", hex64(fnv1a64(cj.dump())), {f.seed});
    std::string csv = "# " + manifest + "\nk,model_mse,average_mse\n";
    for (const auto& p : pts) {
        csv += std::to_string(p.k) + "," + format_double(p.model_mse) + "," + format_double(p.average_mse) + "\n";
        std::printf("k=%-4zu model %.5f average %.5f\n", p.k, p.model_mse, p.average_mse);
    }
    write_file_atomic(f.out, csv);
    return 0;
}

struct PlotFlags {
    std::string input, output, x, y, group, title;
};

int cmd_plot(const PlotFlags& f) {
    Table t;
    try {
        t = parse_table(read_file(f.input));
    } catch (const DataError& e) {
        throw DataError(f.input + ": " + e.what());
    }
    std::vector<Series> series;
    try {
        series = table_series(t, f.x, f.y, f.group);
    } catch (const DataError& e) {
        throw DataError(f.input + ": " + e.what());
    }
    const std::string xl = f.x.empty() ? t.header.front() : f.x;
    const std::string yl = f.y.empty() ? (f.group.empty() ? std::string("value") : t.header.back()) : f.y;
    const std::string title = f.title.empty() ? fs::path(f.input).filename().string() : f.title;
    write_file_atomic(f.output, render_svg(series, title, xl, yl));
    std::printf("%zu series -> %s\n", series.size(), f.output.c_str());
    return 0;
}

struct BenchFlags {
    std::string out;
    BenchConfig cfg;
};

int cmd_gen_bench(const BenchFlags& f) {
    auto b = generate_bench(f.cfg);
    const fs::path dir = f.out;
    const auto hash = hex64(fnv1a64(f.cfg.to_json().dump()));
    const auto manifest = manifest_line("gen-bench", hash, {f.cfg.seed});
    write_csv(dir / "train.csv", b.train, manifest);
    write_csv(dir / "test.csv", b.test, manifest);
    std::string ini = "; " + manifest + "\n[data]\npath = train.csv\ntest_path = test.csv\nlabel_column = y\n\n";
    ini += "[bins]\ncount = " + std::to_string(f.cfg.bins) + "\nmin = 0\nmax = " + std::to_string(f.cfg.bins) + "\n\n";
    ini += "[run]\nseeds = 0,1,2\noutput_dir = results\n";
    write_file_atomic(dir / "bench.ini", ini);
    std::string counts;
    for (auto c : f.cfg.train_counts()) counts += (counts.empty() ? "" : ",") + std::to_string(c);
    std::printf("train %zu (bin counts %s), test %zu -> %s\n", b.train.size(), counts.c_str(), b.test.size(),
                dir.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    imctx::keep_heap_resident();
    CLI::App app{"Localized in-context inference for imbalanced regression"};
    app.require_subcommand(1);

    ExperimentFlags split_f, run_f, bound_f, ablate_f;
    auto* split = app.add_subcommand("split", "Balanced train/test split per seed");
    split_f.add_to(split);
    auto* run = app.add_subcommand("run", "Evaluate one strategy/predictor over the seeds");
    run_f.add_to(run);
    auto* bound = app.add_subcommand("bound", "Error-bound curves per region (and empirical curves)");
    bound_f.add_to(bound);
    auto* ablate = app.add_subcommand("ablate", "Run every sampling strategy and rank them per region");
    ablate_f.add_to(ablate);

    TrainFlags train_f;
    auto* train = app.add_subcommand("train-icl", "Train the toy in-context transformer");
    train->add_option("-o,--out", train_f.out, "Output directory")->required();
    train->add_option("--function", train_f.function, "linear|quadratic|constant");
    train->add_option("--noise", train_f.noise, "Label noise std");
    train->add_option("--dim", train_f.cfg.input_dim, "Input dimension (<= 10)");
    train->add_option("--embed", train_f.cfg.embed_dim, "Embedding width");
    train->add_option("--layers", train_f.cfg.layers, "Transformer blocks");
    train->add_option("--heads", train_f.cfg.heads, "Attention heads");
    train->add_option("--context", train_f.cfg.max_context, "Maximum context pairs");
    train->add_option("--lr", train_f.cfg.learning_rate, "Adam learning rate");
    train->add_option("--batch", train_f.cfg.batch_size, "Batch size");
    train->add_option("--steps", train_f.cfg.steps, "Training steps");
    train->add_option("--seed", train_f.cfg.seed, "Seed");

    EvalFlags eval_f;
    auto* eval = app.add_subcommand("eval-icl", "Error vs context length for a checkpoint");
    eval->add_option("--checkpoint", eval_f.checkpoint, "Checkpoint JSON")->required();
    eval->add_option("-o,--out", eval_f.out, "Output CSV")->required();
    eval->add_option("--ks", eval_f.ks, "Comma-separated context lengths");
    eval->add_option("--tasks", eval_f.tasks, "Tasks per context length");
    eval->add_option("--function", eval_f.function, "linear|quadratic|constant");
    eval->add_option("--noise", eval_f.noise, "Context label noise std");
    eval->add_option("--seed", eval_f.seed, "Task seed");

    PlotFlags plot_f;
    auto* plot = app.add_subcommand("plot", "Render a curve CSV as an SVG line chart");
    plot->add_option("-i,--input", plot_f.input, "Curve CSV")->required();
    plot->add_option("-o,--output", plot_f.output, "Output SVG")->required();
    plot->add_option("--x", plot_f.x, "X column (default: first)");
    plot->add_option("--y", plot_f.y, "Y column (default: all others, or last with --group)");
    plot->add_option("--group", plot_f.group, "Column whose values name the series");
    plot->add_option("--title", plot_f.title, "Chart title");

    BenchFlags bench_f;
    auto* bench = app.add_subcommand("gen-bench", "Write the synthetic skewed benchmark");
    bench->add_option("-o,--out", bench_f.out, "Output directory")->required();
    bench->add_option("--seed", bench_f.cfg.seed, "Seed");
    bench->add_option("--bins", bench_f.cfg.bins, "Number of label bins");
    bench->add_option("--ratio", bench_f.cfg.ratio, "Per-bin count decay ratio");
    bench->add_option("--base", bench_f.cfg.base_count, "Count of the first bin");
    bench->add_option("--noise", bench_f.cfg.noise, "Feature noise std");
    bench->add_option("--test-per-bin", bench_f.cfg.test_per_bin, "Balanced test samples per bin");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*split) return cmd_split(split_f.resolve());
        if (*run) return cmd_run(run_f.resolve());
        if (*bound) return cmd_bound(bound_f.resolve());
        if (*ablate) return cmd_ablate(ablate_f.resolve());
        if (*train) return cmd_train_icl(train_f);
        if (*eval) return cmd_eval_icl(eval_f);
        if (*plot) return cmd_plot(plot_f);
        if (*bench) return cmd_gen_bench(bench_f);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "imctx: usage error: %s\n", one_line(e.what()).c_str());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "imctx: data error: %s\n", one_line(e.what()).c_str());
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "imctx: data error: %s\n", one_line(e.what()).c_str());
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "imctx: runtime error: %s\n", one_line(e.what()).c_str());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "imctx: runtime error: %s\n", one_line(e.what()).c_str());
        return 3;
    }
    return 1;
}
