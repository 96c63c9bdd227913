#include "weightzoo/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "weightzoo/estimators.hpp"
#include "weightzoo/metrics.hpp"
#include "weightzoo/zoo.hpp"

namespace weightzoo::cli {

namespace fs = std::filesystem;

namespace {

int exit_code_for(const std::string& category) {
    if (category == "usage") return 2;
    if (category == "parse") return 3;
    if (category == "validation") return 4;
    if (category == "io") return 5;
    if (category == "version") return 6;
    if (category == "training") return 7;
    return 10;  // internal
}

int resolve_threads(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("WEIGHTZOO_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 1;
}

json make_run_config(const std::vector<std::string>& args) {
    return json{{"tool", "weightzoo"}, {"args", args}};
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
}

struct DatasetFlags {
    std::string dataset;
    int classes = 10;
    int samples_per_class = 200;
    int image_size = 16;
    uint64_t pattern_seed = 0;
    int train_limit = 0;
    uint64_t limit_seed = 0;
};

void add_dataset_flags(CLI::App* cmd, DatasetFlags& f) {
    cmd->add_option("--dataset", f.dataset,
                    "'synthetic' or a directory with IDX files "
                    "(train-images-idx3-ubyte etc.)")
        ->required();
    cmd->add_option("--classes", f.classes, "number of classes (default 10)");
    cmd->add_option("--samples-per-class", f.samples_per_class,
                    "synthetic: training samples per class (default 200)");
    cmd->add_option("--image-size", f.image_size, "synthetic: image side length (default 16)");
    cmd->add_option("--pattern-seed", f.pattern_seed, "synthetic: dataset seed (default 0)");
    cmd->add_option("--train-limit", f.train_limit,
                    "cap the training set to N examples (seeded sample)");
    cmd->add_option("--limit-seed", f.limit_seed, "seed for --train-limit (default 0)");
}

std::pair<Dataset, Dataset> load_dataset(const DatasetFlags& f) {
    Dataset train, test;
    if (f.dataset == "synthetic") {
        SyntheticSpec spec;
        spec.num_classes = f.classes;
        spec.samples_per_class = f.samples_per_class;
        spec.image_size = f.image_size;
        spec.pattern_seed = f.pattern_seed;
        std::tie(train, test) = gen_synthetic(spec);
    } else {
        const fs::path dir(f.dataset);
        train = load_idx((dir / "train-images-idx3-ubyte").string(),
                         (dir / "train-labels-idx1-ubyte").string(), f.classes,
                         dir.filename().string(), "train");
        test = load_idx((dir / "t10k-images-idx3-ubyte").string(),
                        (dir / "t10k-labels-idx1-ubyte").string(), f.classes,
                        dir.filename().string(), "test");
    }
    if (f.train_limit > 0) train = take_n(train, f.train_limit, f.limit_seed);
    return {std::move(train), std::move(test)};
}

void emit(const json& doc, const std::string& out_path, const json& run_config) {
    json full = doc;
    full["run_config"] = run_config;
    if (out_path.empty()) {
        std::cout << full.dump(2) << "\n";
        return;
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot write " + out_path);
    out << full.dump(2) << "\n";
    if (!out) throw IoError("failed writing " + out_path);
}

/// Resolves a zoo split for featurize/probe/transfer: "all" keeps every ok
/// record, otherwise split_zoo(train_count, split_seed) picks the half.
ZooCollection select_split(const ZooCollection& zoo, const std::string& which, int train_count,
                           uint64_t split_seed) {
    if (which == "all") {
        ZooCollection all = zoo;
        all.records = zoo.ok_records();
        if (all.records.empty()) throw ValidationError("zoo has no ok records");
        return all;
    }
    if (train_count < 1)
        throw ValidationError("--train-count is required for --split " + which);
    auto [tr, te] = split_zoo(zoo, train_count, split_seed);
    if (which == "train") return tr;
    if (which == "test") return te;
    throw UsageError("--split must be all, train or test");
}

int run_impl(const std::vector<std::string>& args) {
    CLI::App app{"model-zoo generation and weight-based accuracy prediction"};
    app.require_subcommand(1);
    const json run_config = make_run_config(args);

    // ---- zoo gen ----
    auto* zoo_cmd = app.add_subcommand("zoo", "model zoo operations");
    zoo_cmd->require_subcommand(1);
    auto* gen = zoo_cmd->add_subcommand("gen", "train a population of networks");
    DatasetFlags data_flags;
    add_dataset_flags(gen, data_flags);
    int gen_count = 0, gen_epochs = 0, gen_batch = 128, gen_threads = 0;
    uint64_t sweep_seed = 0;
    std::string gen_out, preset, arch = "cnn";
    int mlp_units = 16, mlp_layers = 3;
    gen->add_option("--count", gen_count, "number of configurations to train");
    gen->add_option("--epochs", gen_epochs, "training epochs per model");
    gen->add_option("--batch-size", gen_batch, "mini-batch size (default 128)");
    gen->add_option("--sweep-seed", sweep_seed, "seed of the configuration stream")->required();
    gen->add_option("--out", gen_out, "output zoo directory")->required();
    gen->add_option("--threads", gen_threads, "worker threads (default WEIGHTZOO_THREADS or 1)");
    gen->add_option("--preset", preset, "desk (300 models, 10 epochs) or paper (30k, 86)");
    gen->add_option("--arch", arch, "cnn (default) or mlp");
    gen->add_option("--mlp-units", mlp_units, "mlp: hidden units per layer (default 16)");
    gen->add_option("--mlp-layers", mlp_layers, "mlp: hidden layer count (default 3)");

    // ---- featurize ----
    auto* feat = app.add_subcommand("featurize", "extract features from a zoo split");
    std::string feat_zoo, feat_kind, feat_out, feat_split = "all";
    int feat_train_count = 0, feat_threads = 0;
    uint64_t feat_split_seed = 0;
    feat->add_option("--zoo", feat_zoo, "zoo directory")->required();
    feat->add_option("--kind", feat_kind,
                     "feature kind (flat_all, flat_layer:N, stats_global, stats_per_layer, "
                     "stats_layer_subset:1,4|final, norms_l1, norms_l2, hyperparams, "
                     "hyperparams_lr, hyperparams_plus_flat, bias_range)")
        ->required();
    feat->add_option("--out", feat_out, "output CSV path")->required();
    feat->add_option("--split", feat_split, "all (default), train or test");
    feat->add_option("--train-count", feat_train_count, "train split size for --split train/test");
    feat->add_option("--split-seed", feat_split_seed, "seed of the split (default 0)");
    feat->add_option("--threads", feat_threads, "worker threads");

    // ---- fit ----
    auto* fit = app.add_subcommand("fit", "fit one estimator with a default configuration");
    std::string fit_features, fit_estimator, fit_out;
    uint64_t fit_seed = 0;
    int fit_num_trees = 0, fit_hidden_layers = 3, fit_hidden_units = 256, fit_epochs = 150;
    fit->add_option("--features", fit_features, "feature table CSV")->required();
    fit->add_option("--estimator", fit_estimator, "gbm, logit_linear, random_forest or dnn")
        ->required();
    fit->add_option("--out", fit_out, "output model JSON")->required();
    fit->add_option("--seed", fit_seed, "fit seed (default 0)");
    fit->add_option("--num-trees", fit_num_trees, "tree count override (gbm/random_forest)");
    fit->add_option("--hidden-layers", fit_hidden_layers, "dnn hidden layers (default 3)");
    fit->add_option("--hidden-units", fit_hidden_units, "dnn hidden units (default 256)");
    fit->add_option("--epochs", fit_epochs, "logit_linear/dnn epochs (default 150)");

    // ---- search ----
    auto* search = app.add_subcommand("search", "random hyperparameter search with k-fold CV");
    std::string search_features, search_estimator, search_out, search_report, search_preset;
    int search_budget = 0, search_folds = 3, search_threads = 0;
    uint64_t search_seed = 0;
    search->add_option("--features", search_features, "feature table CSV")->required();
    search->add_option("--estimator", search_estimator, "gbm, logit_linear, random_forest or dnn")
        ->required();
    search->add_option("--budget", search_budget, "number of sampled configurations");
    search->add_option("--folds", search_folds, "cross-validation folds (default 3)");
    search->add_option("--seed", search_seed, "search seed")->required();
    search->add_option("--out", search_out, "output model JSON")->required();
    search->add_option("--report", search_report, "optional CV report JSON");
    search->add_option("--threads", search_threads, "worker threads");
    search->add_option("--preset", search_preset, "desk (budget 50) or paper (budget 1000)");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a model on a feature table");
    std::string eval_model, eval_features, eval_out, eval_scatter;
    eval_cmd->add_option("--model", eval_model, "model JSON")->required();
    eval_cmd->add_option("--features", eval_features, "feature table CSV")->required();
    eval_cmd->add_option("--out", eval_out, "report JSON (stdout when omitted)");
    eval_cmd->add_option("--scatter", eval_scatter, "optional true,predicted CSV");

    // ---- transfer ----
    auto* transfer_cmd = app.add_subcommand("transfer", "cross-zoo rank-correlation matrix");
    std::string tr_models, tr_zoos, tr_out, tr_counts;
    uint64_t tr_split_seed = 0;
    int tr_threads = 0;
    transfer_cmd->add_option("--models", tr_models, "comma-separated model JSON paths")->required();
    transfer_cmd->add_option("--zoos", tr_zoos, "comma-separated zoo directories")->required();
    transfer_cmd->add_option("--train-counts", tr_counts,
                             "per-zoo train split sizes (one value or comma list); "
                             "omit to evaluate on all ok records");
    transfer_cmd->add_option("--split-seed", tr_split_seed, "split seed (default 0)");
    transfer_cmd->add_option("--out", tr_out, "matrix JSON (stdout when omitted)");
    transfer_cmd->add_option("--threads", tr_threads, "worker threads");

    // ---- probe ----
    auto* probe_cmd = app.add_subcommand("probe", "input-modification sensitivity probe");
    std::string pr_model, pr_zoo, pr_out, pr_mods, pr_split = "all";
    int pr_samples = 50, pr_train_count = 0;
    uint64_t pr_seed = 0, pr_split_seed = 0;
    probe_cmd->add_option("--model", pr_model, "flat_all model JSON")->required();
    probe_cmd->add_option("--zoo", pr_zoo, "zoo directory")->required();
    probe_cmd->add_option("--samples", pr_samples, "checkpoints to sample (default 50)");
    probe_cmd->add_option("--seed", pr_seed, "sampling seed (default 0)");
    probe_cmd->add_option("--mods", pr_mods,
                          "comma list, e.g. scale:1,permute_conv_layers,global_permute "
                          "(default battery when omitted)");
    probe_cmd->add_option("--split", pr_split, "all (default), train or test");
    probe_cmd->add_option("--train-count", pr_train_count, "train split size for --split");
    probe_cmd->add_option("--split-seed", pr_split_seed, "split seed (default 0)");
    probe_cmd->add_option("--out", pr_out, "probe JSON (stdout when omitted)");

    // ---- importance ----
    auto* imp_cmd = app.add_subcommand("importance", "per-feature split counts of a tree model");
    std::string imp_model, imp_out;
    int imp_top = 50;
    imp_cmd->add_option("--model", imp_model, "model JSON")->required();
    imp_cmd->add_option("--top", imp_top, "ranked entries to keep (default 50)");
    imp_cmd->add_option("--out", imp_out, "importance JSON (stdout when omitted)");

    // ---- report ----
    auto* rep_cmd = app.add_subcommand("report", "summarize artifacts into one JSON");
    std::string rep_inputs, rep_out;
    rep_cmd->add_option("--inputs", rep_inputs,
                        "comma list of report JSONs and/or zoo directories")
        ->required();
    rep_cmd->add_option("--out", rep_out, "summary JSON (stdout when omitted)");

    // parse
    std::vector<const char*> argv;
    argv.push_back("weightzoo");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help() << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        throw UsageError(e.what());
    }

    if (gen->parsed()) {
        int count = gen_count, epochs = gen_epochs;
        if (preset == "desk") {
            if (count == 0) count = 300;
            if (epochs == 0) epochs = 10;
        } else if (preset == "paper") {
            if (count == 0) count = 30000;
            if (epochs == 0) epochs = 86;
        } else if (!preset.empty()) {
            throw UsageError("--preset must be desk or paper");
        }
        if (count < 1) throw UsageError("--count (or --preset) is required");
        if (epochs < 1) throw UsageError("--epochs (or --preset) is required");
        auto [train, test] = load_dataset(data_flags);
        NetworkSpec base;
        if (arch == "cnn") {
            base = make_paper_cnn({train.height, train.width, 1}, train.num_classes);
        } else if (arch == "mlp") {
            base = make_mlp({train.height, train.width, 1},
                            std::vector<int>(static_cast<size_t>(mlp_layers), mlp_units),
                            train.num_classes);
        } else {
            throw UsageError("--arch must be cnn or mlp");
        }
        build_zoo(base, train, test, count, sweep_seed, epochs, gen_batch, gen_out,
                  resolve_threads(gen_threads), run_config);
        return 0;
    }

    if (feat->parsed()) {
        const ZooCollection zoo = load_zoo(feat_zoo);
        const ZooCollection split = select_split(zoo, feat_split, feat_train_count, feat_split_seed);
        const FeatureKind kind = FeatureKind::parse(feat_kind);
        FeatureTable table = featurize_zoo(feat_zoo, split, kind, resolve_threads(feat_threads));
        write_feature_csv(feat_out, table, run_config);
        return 0;
    }

    if (fit->parsed()) {
        const FeatureTable table = read_feature_csv(fit_features);
        const EstimatorKind kind = parse_estimator_kind(fit_estimator);
        EstimatorModel model;
        switch (kind) {
            case EstimatorKind::gbm: {
                GbmConfig cfg = default_gbm_config(table.feature_kind, fit_seed);
                if (fit_num_trees > 0) cfg.num_trees = fit_num_trees;
                model = fit_gbm(table, cfg);
                break;
            }
            case EstimatorKind::random_forest:
                model = fit_random_forest(table, fit_num_trees > 0 ? fit_num_trees : 32, fit_seed);
                break;
            case EstimatorKind::logit_linear: {
                NnRegConfig cfg;
                cfg.epochs = fit_epochs;
                cfg.seed = fit_seed;
                model = fit_logit_linear(table, cfg);
                break;
            }
            case EstimatorKind::dnn: {
                NnRegConfig cfg;
                cfg.hidden_layers = fit_hidden_layers;
                cfg.hidden_units = fit_hidden_units;
                cfg.epochs = fit_epochs;
                cfg.seed = fit_seed;
                model = fit_dnn(table, cfg);
                break;
            }
        }
        save_model(fit_out, model, run_config);
        return 0;
    }

    if (search->parsed()) {
        int budget = search_budget;
        if (search_preset == "desk") {
            if (budget == 0) budget = 50;
        } else if (search_preset == "paper") {
            if (budget == 0) budget = 1000;
        } else if (!search_preset.empty()) {
            throw UsageError("--preset must be desk or paper");
        }
        if (budget < 1) throw UsageError("--budget (or --preset) is required");
        const FeatureTable table = read_feature_csv(search_features);
        SearchResult res = random_search(table, parse_estimator_kind(search_estimator), budget,
                                         search_folds, search_seed, resolve_threads(search_threads));
        save_model(search_out, res.model, run_config);
        if (!search_report.empty()) emit(res.report.to_json(), search_report, run_config);
        return 0;
    }

    if (eval_cmd->parsed()) {
        const EstimatorModel model = load_model(eval_model);
        const FeatureTable table = read_feature_csv(eval_features);
        const EvalReport report = evaluate(
            model, table, json{{"model", eval_model}, {"features", eval_features}});
        if (eval_out.empty())
            emit(report.to_json(), "", run_config);
        else
            write_eval_report(eval_out, report, run_config);
        if (!eval_scatter.empty()) write_scatter_csv(eval_scatter, report);
        return 0;
    }

    if (transfer_cmd->parsed()) {
        const auto model_paths = split_csv(tr_models);
        const auto zoo_paths = split_csv(tr_zoos);
        std::vector<EstimatorModel> models;
        for (const auto& p : model_paths) models.push_back(load_model(p));
        if (models.empty()) throw UsageError("transfer: no models given");
        const FeatureKind kind = FeatureKind::parse(models[0].feature_kind);
        std::vector<int> counts;
        for (const auto& c : split_csv(tr_counts)) counts.push_back(std::atoi(c.c_str()));
        if (counts.size() == 1) counts.assign(zoo_paths.size(), counts[0]);
        if (!counts.empty() && counts.size() != zoo_paths.size())
            throw UsageError("transfer: --train-counts must match --zoos");
        std::vector<FeatureTable> tables;
        for (size_t i = 0; i < zoo_paths.size(); ++i) {
            const ZooCollection zoo = load_zoo(zoo_paths[i]);
            const ZooCollection split =
                counts.empty() ? select_split(zoo, "all", 0, 0)
                               : select_split(zoo, "test", counts[i], tr_split_seed);
            tables.push_back(featurize_zoo(zoo_paths[i], split, kind, resolve_threads(tr_threads)));
        }
        const auto tau = transfer_matrix(models, tables);
        json jt = json::array();
        for (const auto& row : tau) jt.push_back(row);
        emit(json{{"kind", "transfer_matrix"},
                  {"format_version", kReportVersion},
                  {"models", model_paths},
                  {"zoos", zoo_paths},
                  {"feature_kind", models[0].feature_kind},
                  {"tau", jt}},
             tr_out, run_config);
        return 0;
    }

    if (probe_cmd->parsed()) {
        const EstimatorModel model = load_model(pr_model);
        const ZooCollection zoo = load_zoo(pr_zoo);
        const ZooCollection split = select_split(zoo, pr_split, pr_train_count, pr_split_seed);
        std::vector<ProbeModification> mods;
        if (pr_mods.empty()) {
            for (const char* s :
                 {"scale:1", "scale:0.001", "scale:0.1", "scale:2", "scale:10", "scale:100",
                  "global_permute:mix", "permute_all_layers", "permute_all_layers:mix",
                  "permute_conv_layers", "permute_conv_layers:mix", "permute_final_layer",
                  "permute_final_layer:mix"})
                mods.push_back(ProbeModification::parse(s));
        } else {
            for (const auto& s : split_csv(pr_mods)) mods.push_back(ProbeModification::parse(s));
        }
        const auto results = invariance_probe(model, pr_zoo, split, mods, pr_samples, pr_seed);
        json jm = json::array();
        for (const auto& r : results) jm.push_back(json{{"modification", r.label}, {"mad", r.mad}});
        emit(json{{"kind", "invariance_probe"},
                  {"format_version", kReportVersion},
                  {"model", pr_model},
                  {"zoo", pr_zoo},
                  {"samples", pr_samples},
                  {"seed", pr_seed},
                  {"results", jm}},
             pr_out, run_config);
        return 0;
    }

    if (imp_cmd->parsed()) {
        const EstimatorModel model = load_model(imp_model);
        const ImportanceReport rep = feature_importance(model);
        json ranked = json::array();
        for (size_t i = 0; i < rep.counts.size() && static_cast<int>(i) < imp_top; ++i)
            ranked.push_back(json::array({rep.counts[i].first, rep.counts[i].second}));
        emit(json{{"kind", "feature_importance"},
                  {"format_version", kReportVersion},
                  {"model", imp_model},
                  {"total_internal_nodes", rep.total_internal_nodes},
                  {"ranked", ranked}},
             imp_out, run_config);
        return 0;
    }

    if (rep_cmd->parsed()) {
        json items = json::array();
        for (const auto& p : split_csv(rep_inputs)) {
            if (fs::is_directory(p)) {
                const ZooCollection zoo = load_zoo(p);
                int ok = 0;
                double lo = 1.0, hi = 0.0, sum = 0.0;
                for (const auto& r : zoo.records)
                    if (r.status == RecordStatus::ok) {
                        ++ok;
                        lo = std::min(lo, r.test_accuracy);
                        hi = std::max(hi, r.test_accuracy);
                        sum += r.test_accuracy;
                    }
                items.push_back(json{{"path", p},
                                     {"kind", "zoo"},
                                     {"dataset", zoo.dataset_name},
                                     {"records", zoo.records.size()},
                                     {"ok", ok},
                                     {"test_accuracy_min", lo},
                                     {"test_accuracy_max", hi},
                                     {"test_accuracy_mean", ok ? sum / ok : 0.0}});
                continue;
            }
            std::ifstream in(p, std::ios::binary);
            if (!in) throw IoError("cannot open " + p);
            json doc;
            try {
                in >> doc;
            } catch (const json::exception& e) {
                throw ParseError("bad JSON in " + p + ": " + e.what());
            }
            doc.erase("scatter");  // keep summaries small
            items.push_back(json{{"path", p}, {"content", doc}});
        }
        emit(json{{"kind", "summary"}, {"format_version", kReportVersion}, {"items", items}},
             rep_out, run_config);
        return 0;
    }

    throw UsageError("no subcommand given");
}

}  // namespace

int run(const std::vector<std::string>& args) {
    try {
        return run_impl(args);
    } catch (const Error& e) {
        std::cerr << "error:" << e.category() << ": " << e.what() << "\n";
        return exit_code_for(e.category());
    } catch (const std::exception& e) {
        std::cerr << "error:internal: " << e.what() << "\n";
        return exit_code_for("internal");
    }
}

}  // namespace weightzoo::cli
