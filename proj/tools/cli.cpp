// attnlab command line: bench, train, eval, search, plot, synth.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnlab/checkpoint.hpp"
#include "attnlab/config.hpp"
#include "attnlab/nas.hpp"
#include "attnlab/reference.hpp"
#include "attnlab/reporting.hpp"

namespace attnlab {

namespace {

namespace fs = std::filesystem;

// ---- shared helpers ------------------------------------------------------------

Dataset load_dataset(const AppConfig& cfg) {
    if (!cfg.data_root.empty())
        return load_folder_dataset(cfg.data_root, cfg.data_root + "/" + cfg.manifest,
                                   cfg.input_h, cfg.input_w);
    return generate_synthetic(cfg.synth_train_ids, cfg.synth_test_ids,
                              cfg.synth_imgs_per_id, cfg.synth_cams, cfg.input_h,
                              cfg.input_w, cfg.seed);
}

void split_id_cam(const Dataset& ds, Split split, std::vector<int>& ids,
                  std::vector<int>& cams) {
    for (int i : ds.indices_of(split)) {
        ids.push_back(ds.entries[static_cast<size_t>(i)].id);
        cams.push_back(ds.entries[static_cast<size_t>(i)].cam);
    }
}

RetrievalResult eval_on(Model& model, const Dataset& ds, int batch) {
    const auto q_idx = ds.indices_of(Split::Query);
    const auto g_idx = ds.indices_of(Split::Gallery);
    check_data(!q_idx.empty() && !g_idx.empty(), "dataset lacks query or gallery images");
    std::vector<int> q_ids, q_cams, g_ids, g_cams;
    split_id_cam(ds, Split::Query, q_ids, q_cams);
    split_id_cam(ds, Split::Gallery, g_ids, g_cams);
    const auto qf = extract_features(model, ds, q_idx, batch);
    const auto gf = extract_features(model, ds, g_idx, batch);
    return evaluate(distance_matrix(qf, gf), q_ids, q_cams, g_ids, g_cams);
}

void protocol_guards(const AppConfig& cfg, const Dataset& ds) {
    std::vector<int> q_ids, g_ids, cams_unused;
    split_id_cam(ds, Split::Query, q_ids, cams_unused);
    split_id_cam(ds, Split::Gallery, g_ids, cams_unused);
    bool overlap = false;
    for (int q : q_ids) {
        for (int g : g_ids)
            if (q >= 0 && q == g) {
                overlap = true;
                break;
            }
        if (overlap) break;
    }
    check_data(overlap, "no query identity appears in the gallery; evaluation is undefined");

    if (cfg.protocol == "roreas-shape") {
        const auto train_ids = ds.ids_of(Split::Train);
        for (int q : q_ids)
            for (int t : train_ids)
                check_data(q != t, "protocol roreas-shape: train and test identities "
                                   "must be disjoint (id " + std::to_string(q) + ")");
        for (int g : g_ids)
            for (int t : train_ids)
                check_data(g != t, "protocol roreas-shape: train and test identities "
                                   "must be disjoint (id " + std::to_string(g) + ")");
    }
}

std::string out_path(const AppConfig& cfg, const std::string& name) {
    fs::create_directories(cfg.out_dir);
    return cfg.out_dir + "/" + name;
}

// One full training run: fresh model on this seed, trained, checkpointed,
// evaluated. Returns the mAP.
double train_once(const AppConfig& cfg, const Dataset& ds, uint64_t seed,
                  const std::string& ckpt_path, const std::string& log_stem) {
    BackboneConfig backbone = backbone_of(cfg);
    backbone.num_classes = static_cast<int>(ds.ids_of(Split::Train).size());
    Model model(backbone, plan_of(cfg), Rng::mix(seed, "model.init"));
    TrainConfig tc = train_config_of(cfg);
    tc.seed = seed;
    const TrainLog log = train(model, ds, tc);
    if (!ckpt_path.empty()) save_checkpoint(ckpt_path, model);
    if (!log_stem.empty()) {
        write_text_file(log_stem + ".csv", csv_encode(trainlog_csv(log)));
        write_text_file(log_stem + ".json", trainlog_json(plan_of(cfg).str(), log));
    }
    return eval_on(model, ds, cfg.eval_batch).map;
}

// ---- commands -----------------------------------------------------------------

int cmd_synth(const AppConfig& cfg) {
    const Dataset ds = load_dataset(cfg);
    const std::string root = out_path(cfg, "dataset");
    write_dataset(ds, root);
    std::printf("wrote %zu images to %s (train ids %zu, query %zu, gallery %zu)\n",
                ds.entries.size(), root.c_str(), ds.ids_of(Split::Train).size(),
                ds.indices_of(Split::Query).size(), ds.indices_of(Split::Gallery).size());
    return 0;
}

int cmd_bench(const AppConfig& cfg) {
    const BackboneConfig backbone = backbone_of(cfg);
    const InsertionPlan plan = plan_of(cfg);

    std::vector<CostReport> reports;
    auto bench_one = [&](const BackboneConfig& b, const InsertionPlan& p,
                         const std::string& id) {
        CostReport r;
        if (cfg.bench_measure) {
            Model model(b, p, Rng::mix(cfg.seed, "bench.model"));
            r = benchmark_latency(model, cfg.bench_batch, cfg.bench_warmup,
                                  cfg.bench_iters, cfg.seed);
        } else {
            r = count_macs(b, p);
        }
        r.config_id = id;
        reports.push_back(r);
    };

    bench_one(backbone, plan, plan.str());
    if (cfg.bench_deep)
        bench_one(resnet101_config(backbone), InsertionPlan{}, "resnet101");

    write_text_file(out_path(cfg, "cost.csv"), csv_encode(cost_csv(reports)));
    std::string all_json = "[\n";
    for (size_t i = 0; i < reports.size(); ++i) {
        std::string one = cost_json(reports[i]);
        if (i + 1 < reports.size()) one.insert(one.size() - 1, ",");
        all_json += one;
    }
    all_json += "]\n";
    write_text_file(out_path(cfg, "bench.json"), all_json);

    for (const auto& r : reports) {
        std::printf("%s: %lld MACs, %lld params", r.config_id.c_str(),
                    static_cast<long long>(r.total_macs),
                    static_cast<long long>(r.total_params));
        if (r.measured)
            std::printf(", %.3f ms/batch (%.2f batches/s)", r.ms_per_batch,
                        r.batches_per_second);
        std::printf("\n");
    }
    return 0;
}

int cmd_train(const AppConfig& cfg) {
    const Dataset ds = load_dataset(cfg);
    check_shape(cfg.train_seeds >= 1, "train: need at least one seed");

    std::vector<double> maps;
    for (int i = 0; i < cfg.train_seeds; ++i) {
        const uint64_t seed = cfg.seed + static_cast<uint64_t>(i);
        const std::string tag = "seed" + std::to_string(seed);
        const double map =
            train_once(cfg, ds, seed, out_path(cfg, "model_" + tag + ".ckpt"),
                       out_path(cfg, "trainlog_" + tag));
        std::printf("seed %llu: mAP %.4f\n", static_cast<unsigned long long>(seed), map);
        maps.push_back(map);
    }

    double mean = 0;
    for (double m : maps) mean += m;
    mean /= static_cast<double>(maps.size());
    double var = 0;
    for (double m : maps) var += (m - mean) * (m - mean);
    const double stdev = std::sqrt(var / static_cast<double>(maps.size()));
    std::printf("%s %s: mAP %.4f +/- %.4f over %d run(s)\n", plan_of(cfg).str().c_str(),
                cfg.loss.c_str(), mean, stdev, cfg.train_seeds);
    return 0;
}

int cmd_eval(const AppConfig& cfg, const std::string& ckpt_path) {
    Model model = load_checkpoint(ckpt_path);
    AppConfig data_cfg = cfg;
    // image geometry must match the checkpointed model, not the CLI default
    data_cfg.input_h = model.config().input_h;
    data_cfg.input_w = model.config().input_w;
    const Dataset ds = load_dataset(data_cfg);
    protocol_guards(cfg, ds);

    const RetrievalResult res = eval_on(model, ds, cfg.eval_batch);
    const std::string id = model.plan().str();
    write_text_file(out_path(cfg, "retrieval.json"), retrieval_json(id, res));
    write_text_file(out_path(cfg, "retrieval.csv"), csv_encode(retrieval_csv(id, res)));
    std::printf("%s: mAP %.4f rank-1 %.4f rank-5 %.4f (%d valid queries)\n", id.c_str(),
                res.map, res.rank(1), res.rank(5), res.valid_queries);
    return 0;
}

int cmd_search(const AppConfig& cfg) {
    const BackboneConfig backbone = backbone_of(cfg);
    const Dataset ds = load_dataset(cfg);
    const int train_classes = static_cast<int>(ds.ids_of(Split::Train).size());

    SearchSpace space;
    space.kinds = parse_kinds_csv(cfg.kinds);
    if (!cfg.positions.empty()) space.positions = parse_int_csv(cfg.positions);
    space.max_blocks = cfg.max_blocks;
    space.seeds_per_trial = cfg.seeds_per_trial;
    space.base_spec = attention_spec_of(cfg);

    TrialContext ctx;
    ctx.config = backbone;
    ctx.loss = cfg.loss == "circle" ? LossKind::Circle : LossKind::CE_LS;
    ctx.seed_base = cfg.seed;
    ctx.run_trial = [&](const InsertionPlan& plan, uint64_t seed) {
        BackboneConfig b = backbone;
        b.num_classes = train_classes;
        Model model(b, plan, Rng::mix(seed, "model.init"));
        TrainConfig tc = train_config_of(cfg);
        tc.seed = seed;
        train(model, ds, tc);
        return eval_on(model, ds, cfg.eval_batch).map;
    };
    ctx.cost_of = [&](const InsertionPlan& plan) { return count_macs(backbone, plan); };
    ctx.run_deep = [&](uint64_t seed) {
        BackboneConfig b = resnet101_config(backbone);
        b.num_classes = train_classes;
        Model model(b, InsertionPlan{}, Rng::mix(seed, "model.init"));
        TrainConfig tc = train_config_of(cfg);
        tc.seed = seed;
        train(model, ds, tc);
        return eval_on(model, ds, cfg.eval_batch).map;
    };
    ctx.deep_cost = [&]() {
        return count_macs(resnet101_config(backbone), InsertionPlan{});
    };

    const SearchOutcome outcome =
        run_search(space, ctx, cfg.budget, out_path(cfg, "trials.csv"));
    write_text_file(out_path(cfg, "rules.txt"), outcome.report.text());

    std::printf("%zu single-position trials, %zu survivors, %zu combinations\n",
                outcome.singles.size() - 2, outcome.pruned.survivors.size(),
                outcome.combos.size());
    const size_t top = std::min<size_t>(outcome.combos.size(), 5);
    for (size_t i = 0; i < top; ++i) {
        const auto& t = outcome.combos[i];
        std::printf("  #%zu %s: mAP %.4f +/- %.4f\n", i + 1, t.plan_str.c_str(), t.map_mean,
                    t.map_std);
    }
    std::printf("%s", outcome.report.text().c_str());
    return 0;
}

int cmd_plot(const AppConfig& cfg, const std::string& trials_path,
             const std::string& title) {
    const std::string path =
        trials_path.empty() ? cfg.out_dir + "/trials.csv" : trials_path;
    const auto trials = trials_from_csv(csv_parse(read_text_file(path)),
                                        attention_spec_of(cfg));
    if (trials.empty()) std::fprintf(stderr, "warning: %s holds no trials\n", path.c_str());

    std::vector<PlotPoint> points;
    for (const auto& t : trials)
        points.push_back({t.cost.speed(), t.map_mean, t.key(), t.is_anchor});
    const std::string svg =
        render_scatter_svg(points, title.empty() ? "accuracy vs speed" : title);
    const std::string out = out_path(cfg, "scatter.svg");
    write_text_file(out, svg);
    std::printf("wrote %s (%zu points)\n", out.c_str(), points.size());
    return 0;
}

// ---- argument wiring -------------------------------------------------------------

struct CliArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::vector<ConfigEntry> extra;  // from per-command convenience flags
    std::string ckpt_path, trials_path, plot_title;
};

void push_entry(CliArgs& args, const std::string& key, const std::string& value) {
    args.extra.push_back({key, value});
}

AppConfig resolve(const CliArgs& args) {
    std::vector<ConfigEntry> file_entries;
    if (!args.config_path.empty()) file_entries = load_config_file(args.config_path);
    std::vector<ConfigEntry> cli_entries;
    for (const auto& s : args.sets) {
        const size_t eq = s.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("--set expects key=value, got '" + s + "'");
        cli_entries.push_back({s.substr(0, eq), s.substr(eq + 1)});
    }
    cli_entries.insert(cli_entries.end(), args.extra.begin(), args.extra.end());
    return resolve_config(file_entries, cli_entries);
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"attention placement laboratory for re-identification backbones"};
    app.require_subcommand(1);
    app.fallthrough();  // lets --config / --set appear after the subcommand name

    CliArgs args;
    app.add_option("--config", args.config_path, "JSON config file")
        ->expected(1);
    app.add_option("--set", args.sets, "override a config key (key=value, repeatable)");
    // global conveniences shared by every command
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option_function<std::string>(
            "--out", [&](const std::string& v) { push_entry(args, "out_dir", v); },
            "output directory");
        cmd->add_option_function<std::string>(
            "--seed", [&](const std::string& v) { push_entry(args, "seed", v); },
            "master random seed");
        cmd->add_option_function<std::string>(
            "--threads", [&](const std::string& v) { push_entry(args, "threads", v); },
            "intra-op worker threads");
        cmd->add_option_function<std::string>(
            "--preset", [&](const std::string& v) { push_entry(args, "preset", v); },
            "named default set (full | desk)");
    };

    CLI::App* synth = app.add_subcommand("synth", "render a synthetic dataset to disk");
    add_common(synth);
    for (auto [flag, key] : {std::pair{"--train-ids", "synth_train_ids"},
                             {"--test-ids", "synth_test_ids"},
                             {"--imgs-per-id", "synth_imgs_per_id"},
                             {"--cams", "synth_cams"}})
        synth->add_option_function<std::string>(
            flag, [&args, key = std::string(key)](const std::string& v) {
                push_entry(args, key, v);
            });

    CLI::App* bench = app.add_subcommand("bench", "analytic and measured cost of a plan");
    add_common(bench);
    bench->add_option_function<std::string>(
        "--plan", [&](const std::string& v) { push_entry(args, "plan", v); },
        "insertion plan, e.g. cnl@6,8,14");
    bench->add_flag_callback(
        "--deep", [&]() { push_entry(args, "bench_deep", "true"); },
        "also bench the deep reference backbone");
    bench->add_flag_callback(
        "--no-measure", [&]() { push_entry(args, "bench_measure", "false"); },
        "analytic counts only (byte-deterministic output)");
    for (auto [flag, key] : {std::pair{"--batch", "bench_batch"},
                             {"--warmup", "bench_warmup"},
                             {"--iters", "bench_iters"}})
        bench->add_option_function<std::string>(
            flag, [&args, key = std::string(key)](const std::string& v) {
                push_entry(args, key, v);
            });

    CLI::App* train_cmd = app.add_subcommand("train", "train a model, checkpoint, evaluate");
    add_common(train_cmd);
    for (auto [flag, key] : {std::pair{"--plan", "plan"},
                             {"--loss", "loss"},
                             {"--epochs", "epochs"},
                             {"--seeds", "train_seeds"},
                             {"--data", "data_root"},
                             {"--manifest", "manifest"}})
        train_cmd->add_option_function<std::string>(
            flag, [&args, key = std::string(key)](const std::string& v) {
                push_entry(args, key, v);
            });

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", args.ckpt_path, "model checkpoint to evaluate")
        ->required();
    for (auto [flag, key] : {std::pair{"--data", "data_root"},
                             {"--manifest", "manifest"},
                             {"--protocol", "protocol"}})
        eval_cmd->add_option_function<std::string>(
            flag, [&args, key = std::string(key)](const std::string& v) {
                push_entry(args, key, v);
            });

    CLI::App* search = app.add_subcommand("search", "sweep, prune, combine, derive rules");
    add_common(search);
    for (auto [flag, key] : {std::pair{"--budget", "budget"},
                             {"--kinds", "kinds"},
                             {"--positions", "positions"},
                             {"--max-blocks", "max_blocks"},
                             {"--seeds-per-trial", "seeds_per_trial"},
                             {"--epochs", "epochs"},
                             {"--loss", "loss"}})
        search->add_option_function<std::string>(
            flag, [&args, key = std::string(key)](const std::string& v) {
                push_entry(args, key, v);
            });

    CLI::App* plot = app.add_subcommand("plot", "render trials.csv as an SVG scatter");
    add_common(plot);
    plot->add_option("--trials", args.trials_path, "trials csv (default <out>/trials.csv)");
    plot->add_option("--title", args.plot_title, "plot title");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const AppConfig cfg = resolve(args);
        intra_op_threads() = std::max(1, cfg.threads);
        if (synth->parsed()) return cmd_synth(cfg);
        if (bench->parsed()) return cmd_bench(cfg);
        if (train_cmd->parsed()) return cmd_train(cfg);
        if (eval_cmd->parsed()) return cmd_eval(cfg, args.ckpt_path);
        if (search->parsed()) return cmd_search(cfg);
        if (plot->parsed()) return cmd_plot(cfg, args.trials_path, args.plot_title);
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace attnlab

int main(int argc, char** argv) { return attnlab::run_cli(argc, argv); }
