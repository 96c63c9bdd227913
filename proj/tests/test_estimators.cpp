#include <cmath>
#include <filesystem>
#include <unistd.h>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "weightzoo/estimators.hpp"

using namespace weightzoo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("wz_est_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

FeatureTable make_table(const std::vector<std::vector<double>>& rows,
                        const std::vector<double>& targets, const std::string& kind = "stats_global") {
    FeatureTable t;
    t.feature_kind = kind;
    const size_t d = rows.empty() ? 0 : rows[0].size();
    for (size_t f = 0; f < d; ++f) t.feature_names.push_back("f" + std::to_string(f));
    for (size_t i = 0; i < rows.size(); ++i) {
        t.model_ids.push_back("m" + std::to_string(i));
        t.rows.push_back(rows[i]);
        t.targets.push_back(targets[i]);
    }
    return t;
}

FeatureTable random_table(Rng& rng, int n, int d, bool noisy_targets = true) {
    std::vector<std::vector<double>> rows;
    std::vector<double> targets;
    for (int i = 0; i < n; ++i) {
        std::vector<double> row(static_cast<size_t>(d));
        for (auto& v : row) v = rng.uniform(-2.0, 2.0);
        double t = 0.5 + 0.2 * std::tanh(row[0]) + (noisy_targets ? 0.05 * rng.normal() : 0.0);
        targets.push_back(std::clamp(t, 0.0, 1.0));
        rows.push_back(std::move(row));
    }
    return make_table(rows, targets);
}

/// step-function table: one feature, target 0.2 below zero and 0.8 above
FeatureTable step_table(int n = 32) {
    std::vector<std::vector<double>> rows;
    std::vector<double> targets;
    Rng rng(17);
    for (int i = 0; i < n; ++i) {
        const double x = (i < n / 2) ? rng.uniform(-2.0, -0.1) : rng.uniform(0.1, 2.0);
        rows.push_back({x});
        targets.push_back(x < 0 ? 0.2 : 0.8);
    }
    return make_table(rows, targets);
}

void check_tree_invariants(const Tree& tree, const GbmConfig& cfg) {
    CHECK(tree.leaf_count() <= cfg.num_leaves);
    if (cfg.max_depth > 0) CHECK(tree.depth() <= cfg.max_depth);
    // every internal node has two children and in-range features
    for (const auto& nd : tree.nodes) {
        if (nd.feature >= 0) {
            CHECK(nd.left >= 0);
            CHECK(nd.right >= 0);
            CHECK(std::isfinite(nd.threshold));
        }
    }
}

}  // namespace

TEST_CASE("gbm: constant targets collapse to the base score") {
    Rng rng(1);
    auto table = random_table(rng, 20, 3);
    for (auto& t : table.targets) t = 0.35;
    GbmConfig cfg;
    cfg.num_trees = 5;
    cfg.learning_rate = 1.0;
    EstimatorModel m = fit_gbm(table, cfg);
    for (int i = 0; i < table.n(); ++i)
        CHECK(m.predict(table.rows[static_cast<size_t>(i)]) == doctest::Approx(0.35).epsilon(1e-12));
}

TEST_CASE("gbm: one tree nails the one-feature step function") {
    auto table = step_table();
    GbmConfig cfg;
    cfg.num_trees = 1;
    cfg.num_leaves = 2;
    cfg.learning_rate = 1.0;
    cfg.reg_lambda = 0.0;
    cfg.reg_alpha = 0.0;
    EstimatorModel m = fit_gbm(table, cfg);
    double mse = 0.0;
    for (int i = 0; i < table.n(); ++i) {
        const double e = m.predict(table.rows[static_cast<size_t>(i)]) - table.targets[static_cast<size_t>(i)];
        mse += e * e;
    }
    mse /= table.n();
    CHECK(mse < 1e-6);
    CHECK(m.train_curve.back() < 1e-6);
}

TEST_CASE("gbm: train MSE is non-increasing per boosting iteration") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        auto table = random_table(rng, 30 + static_cast<int>(rng.below(40)), 1 + static_cast<int>(rng.below(5)));
        GbmConfig cfg;
        cfg.num_trees = 40;
        cfg.num_leaves = 8;
        cfg.learning_rate = 0.3;
        cfg.subsample = 1.0;        // deterministic full-sample boosting
        cfg.colsample_bytree = 1.0;
        cfg.reg_lambda = rng.uniform(0.0, 2.0);
        cfg.seed = trial;
        EstimatorModel m = fit_gbm(table, cfg);
        for (size_t i = 1; i < m.train_curve.size(); ++i)
            CHECK(m.train_curve[i] <= m.train_curve[i - 1] + 1e-12);
    }
}

TEST_CASE("gbm: histogram split equals the exhaustive oracle on small distinct tables") {
    Rng rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        const int n = 8 + static_cast<int>(rng.below(57));   // <= 64 rows
        const int d = 1 + static_cast<int>(rng.below(4));    // <= 4 features
        auto table = random_table(rng, n, d);                // continuous draws: all distinct
        const double lambda = trial % 2 ? 0.5 : 0.0;

        GbmConfig cfg;
        cfg.num_trees = 1;
        cfg.num_leaves = 2;  // root split only
        cfg.learning_rate = 1.0;
        cfg.max_bin = 255;
        cfg.reg_lambda = lambda;
        cfg.reg_alpha = 0.0;
        EstimatorModel m = fit_gbm(table, cfg);
        const auto& tree = std::get<GbmModel>(m.impl).trees[0];

        // residuals at the root are targets minus their mean
        double mean = std::accumulate(table.targets.begin(), table.targets.end(), 0.0) / n;
        std::vector<double> residuals;
        for (double t : table.targets) residuals.push_back(t - mean);
        std::vector<int> rows(static_cast<size_t>(n));
        std::iota(rows.begin(), rows.end(), 0);
        auto oracle = oracles::exhaustive_best_split(table, rows, residuals, lambda, 0.0, 1);

        REQUIRE(oracle.found);
        REQUIRE(tree.nodes[0].feature >= 0);
        CHECK(tree.nodes[0].feature == oracle.feature);
        CHECK(tree.nodes[0].threshold == doctest::Approx(oracle.threshold).epsilon(1e-12));
    }
}

TEST_CASE("gbm: every split of a deep tree matches the oracle on its row subset") {
    Rng rng(4);
    auto table = random_table(rng, 48, 3);
    GbmConfig cfg;
    cfg.num_trees = 1;
    cfg.num_leaves = 10;
    cfg.learning_rate = 1.0;
    cfg.max_bin = 255;
    cfg.reg_lambda = 0.25;
    cfg.min_child_weight = 2;
    EstimatorModel m = fit_gbm(table, cfg);
    const auto& tree = std::get<GbmModel>(m.impl).trees[0];

    double mean = std::accumulate(table.targets.begin(), table.targets.end(), 0.0) / table.n();
    std::vector<double> residuals;
    for (double t : table.targets) residuals.push_back(t - mean);
    std::vector<int> rows(static_cast<size_t>(table.n()));
    std::iota(rows.begin(), rows.end(), 0);
    auto at = oracles::route_rows(tree, table, rows);
    for (size_t i = 0; i < tree.nodes.size(); ++i) {
        const auto& nd = tree.nodes[i];
        if (nd.feature < 0) continue;
        auto oracle = oracles::exhaustive_best_split(table, at[i], residuals, 0.25, 0.0, 2);
        REQUIRE(oracle.found);
        // thresholds come from full-table bin edges and sub-ulp gain ties can
        // surface as a different feature isolating the same rows, so deeper
        // nodes compare achieved gain and, on feature disagreement, the
        // induced partition
        const double got = oracles::partition_gain(residuals, at[static_cast<size_t>(nd.left)],
                                                   at[static_cast<size_t>(nd.right)], 0.25, 0.0);
        CHECK(got == doctest::Approx(oracle.gain).epsilon(1e-9));
        if (nd.feature != oracle.feature) {
            auto tree_left = at[static_cast<size_t>(nd.left)];
            auto tree_right = at[static_cast<size_t>(nd.right)];
            std::sort(tree_left.begin(), tree_left.end());
            std::sort(tree_right.begin(), tree_right.end());
            const auto oracle_left = oracles::split_left_rows(table, at[i], oracle.feature,
                                                              oracle.threshold);
            CHECK((tree_left == oracle_left || tree_right == oracle_left));
        } else if (i == 0) {
            CHECK(nd.threshold == doctest::Approx(oracle.threshold).epsilon(1e-12));
        }
    }
    check_tree_invariants(tree, cfg);
}

TEST_CASE("gbm: tree invariants hold across configurations") {
    Rng rng(5);
    auto table = random_table(rng, 60, 4);
    for (int trial = 0; trial < 6; ++trial) {
        GbmConfig cfg;
        cfg.num_trees = 10;
        cfg.num_leaves = 3 + static_cast<int>(rng.below(10));
        cfg.max_depth = 2 + static_cast<int>(rng.below(4));
        cfg.min_child_weight = 1 + static_cast<int>(rng.below(4));
        cfg.subsample = 0.7;
        cfg.colsample_bytree = 0.75;
        cfg.seed = 100 + static_cast<uint64_t>(trial);
        EstimatorModel m = fit_gbm(table, cfg);
        for (const auto& tree : std::get<GbmModel>(m.impl).trees) {
            check_tree_invariants(tree, cfg);
            // min_child_weight: route rows and check leaf occupancy
            std::vector<int> rows(static_cast<size_t>(table.n()));
            std::iota(rows.begin(), rows.end(), 0);
            auto at = oracles::route_rows(tree, table, rows);
            (void)at;  // leaves trained on subsampled rows may hold fewer full-table rows
        }
    }
}

TEST_CASE("gbm: predictions on training rows of a fully grown single tree hit leaf means") {
    Rng rng(6);
    auto table = random_table(rng, 24, 2);
    GbmConfig cfg;
    cfg.num_trees = 1;
    cfg.num_leaves = 1000;  // fully grown
    cfg.max_depth = 0;
    cfg.learning_rate = 1.0;
    cfg.reg_lambda = 0.0;
    cfg.reg_alpha = 0.0;
    cfg.min_child_weight = 1;
    EstimatorModel m = fit_gbm(table, cfg);
    const auto& gbm = std::get<GbmModel>(m.impl);
    const auto& tree = gbm.trees[0];

    std::vector<int> rows(static_cast<size_t>(table.n()));
    std::iota(rows.begin(), rows.end(), 0);
    auto at = oracles::route_rows(tree, table, rows);
    for (size_t i = 0; i < tree.nodes.size(); ++i) {
        if (tree.nodes[i].feature >= 0) continue;
        REQUIRE(!at[i].empty());
        double mean = 0.0;
        for (int r : at[i]) mean += table.targets[static_cast<size_t>(r)] - gbm.base_score;
        mean /= static_cast<double>(at[i].size());
        CHECK(tree.nodes[i].value == doctest::Approx(mean).epsilon(1e-9));
        // prediction on those rows = base + leaf value = leaf mean of targets
        for (int r : at[i])
            CHECK(m.predict(table.rows[static_cast<size_t>(r)]) ==
                  doctest::Approx(gbm.base_score + mean).epsilon(1e-9));
    }
}

TEST_CASE("gbm: degenerate tables yield a constant model without error") {
    auto one_row = make_table({{1.0, 2.0}}, {0.6});
    EstimatorModel m = fit_gbm(one_row, GbmConfig{});
    const std::vector<double> probe_row = {5.0, -1.0};
    CHECK(m.predict(probe_row) == doctest::Approx(0.6));

    auto constant_features = make_table({{1.0}, {1.0}, {1.0}}, {0.2, 0.4, 0.9});
    EstimatorModel m2 = fit_gbm(constant_features, GbmConfig{});
    const std::vector<double> one = {1.0};
    CHECK(m2.predict(one) == doctest::Approx(0.5));
}

TEST_CASE("predictions stay inside [0, 1]") {
    Rng rng(7);
    auto table = random_table(rng, 40, 2);
    for (auto& t : table.targets) t = t < 0.5 ? 0.0 : 1.0;
    GbmConfig cfg;
    cfg.num_trees = 60;
    cfg.learning_rate = 0.9;  // overshoot-prone
    cfg.reg_lambda = 0.0;
    EstimatorModel gbm = fit_gbm(table, cfg);
    EstimatorModel forest = fit_random_forest(table, 8, 1);
    for (int i = 0; i < table.n(); ++i) {
        const auto& row = table.rows[static_cast<size_t>(i)];
        CHECK(gbm.predict(row) >= 0.0);
        CHECK(gbm.predict(row) <= 1.0);
        CHECK(forest.predict(row) >= 0.0);
        CHECK(forest.predict(row) <= 1.0);
    }
}

TEST_CASE("random forest: constant targets, bounds, default size") {
    Rng rng(8);
    auto table = random_table(rng, 25, 3);
    for (auto& t : table.targets) t = 0.45;
    EstimatorModel m = fit_random_forest(table, 1, 0);
    CHECK(m.predict(table.rows[0]) == doctest::Approx(0.45).epsilon(1e-12));

    auto table2 = random_table(rng, 30, 3);
    EstimatorModel m2 = fit_random_forest(table2, 32, 2);
    CHECK(std::get<ForestModel>(m2.impl).trees.size() == 32);
    const double lo = *std::min_element(table2.targets.begin(), table2.targets.end());
    const double hi = *std::max_element(table2.targets.begin(), table2.targets.end());
    for (int i = 0; i < table2.n(); ++i) {
        const double p = m2.predict(table2.rows[static_cast<size_t>(i)]);
        CHECK(p >= lo - 1e-12);
        CHECK(p <= hi + 1e-12);
    }
}

TEST_CASE("logit-linear: initial state and regularization limits") {
    auto table = step_table();

    SUBCASE("zero epochs equivalent: theta=0 predicts 0.5") {
        // one sgd step with lr ~ 0 keeps parameters at zero
        NnRegConfig cfg;
        cfg.learning_rate = 1e-30;
        cfg.optimizer = OptimizerKind::sgd;
        cfg.epochs = 1;
        cfg.init_type = InitKind::normal;
        cfg.init_variance = 1e-12;
        EstimatorModel m = fit_logit_linear(table, cfg);
        for (int i = 0; i < table.n(); ++i)
            CHECK(m.predict(table.rows[static_cast<size_t>(i)]) == doctest::Approx(0.5).epsilon(1e-4));
        // initial MSE = mean (t - 0.5)^2 = 0.09 for the step targets
        double mse = 0.0;
        for (double t : table.targets) mse += (t - 0.5) * (t - 0.5);
        CHECK(mse / table.n() == doctest::Approx(0.09));
    }

    SUBCASE("separable targets are fit to low MSE") {
        NnRegConfig cfg;
        cfg.learning_rate = 0.2;
        cfg.optimizer = OptimizerKind::adam;
        cfg.epochs = 300;
        cfg.batch_size = 16;
        cfg.seed = 3;
        EstimatorModel m = fit_logit_linear(table, cfg);
        double mse = 0.0;
        for (int i = 0; i < table.n(); ++i) {
            const double e = m.predict(table.rows[static_cast<size_t>(i)]) - table.targets[static_cast<size_t>(i)];
            mse += e * e;
        }
        CHECK(mse / table.n() < 0.01);
    }

    SUBCASE("huge l2 drives theta to zero and predictions to sigmoid(offset)") {
        NnRegConfig cfg;
        cfg.learning_rate = 0.05;
        cfg.optimizer = OptimizerKind::adam;
        cfg.epochs = 400;
        cfg.l2_coeff = 1e5;
        cfg.seed = 4;
        EstimatorModel m = fit_logit_linear(table, cfg);
        const auto& nn = std::get<NnRegModel>(m.impl);
        for (float w : nn.params.layers[0].kernel) CHECK(std::abs(w) < 1e-3);
        const double pb = 1.0 / (1.0 + std::exp(-static_cast<double>(nn.params.layers[0].bias[0])));
        for (int i = 0; i < table.n(); ++i)
            CHECK(m.predict(table.rows[static_cast<size_t>(i)]) == doctest::Approx(pb).epsilon(1e-3));
    }
}

TEST_CASE("dnn regressor: determinism, sigmoid range, step fit") {
    auto table = step_table();
    NnRegConfig cfg;
    cfg.hidden_layers = 3;
    cfg.hidden_units = 256;
    cfg.learning_rate = 5e-3;
    cfg.optimizer = OptimizerKind::adam;
    cfg.epochs = 60;
    cfg.batch_size = 16;
    cfg.init_type = InitKind::he_normal;
    cfg.init_variance = 0.05;
    cfg.seed = 5;

    EstimatorModel a = fit_dnn(table, cfg);
    EstimatorModel b = fit_dnn(table, cfg);
    for (int i = 0; i < table.n(); ++i) {
        const double pa = a.predict(table.rows[static_cast<size_t>(i)]);
        CHECK(pa == b.predict(table.rows[static_cast<size_t>(i)]));
        CHECK(pa > 0.0);
        CHECK(pa < 1.0);
    }
    double mse = 0.0;
    for (int i = 0; i < table.n(); ++i) {
        const double e = a.predict(table.rows[static_cast<size_t>(i)]) - table.targets[static_cast<size_t>(i)];
        mse += e * e;
    }
    CHECK(mse / table.n() < 0.01);
}

TEST_CASE("random search selects the argmin and is deterministic") {
    Rng rng(9);
    auto table = random_table(rng, 36, 2);

    SearchResult r1 = random_search(table, EstimatorKind::gbm, 6, 3, 77, 2);
    SearchResult r2 = random_search(table, EstimatorKind::gbm, 6, 3, 77, 1);
    CHECK(r1.report.best_index == r2.report.best_index);
    CHECK(r1.report.best_config == r2.report.best_config);
    CHECK(r1.report.fold_mse == r2.report.fold_mse);

    // argmin property over the logged mean CV MSE
    double best_mse = std::numeric_limits<double>::infinity();
    for (const auto& entry : r1.report.config_log)
        if (entry.contains("mean_cv_mse"))
            best_mse = std::min(best_mse, entry.at("mean_cv_mse").get<double>());
    double chosen = r1.report.config_log.at(static_cast<size_t>(r1.report.best_index))
                        .at("mean_cv_mse").get<double>();
    CHECK(chosen == best_mse);
    CHECK(r1.report.fold_mse.size() == 3);

    SUBCASE("budget 1 returns that single config refit") {
        SearchResult r = random_search(table, EstimatorKind::gbm, 1, 3, 5, 1);
        CHECK(r.report.best_index == 0);
        CHECK(r.model.kind == EstimatorKind::gbm);
    }
}

TEST_CASE("feature importance counts splits and sums to internal nodes") {
    auto table = step_table();
    GbmConfig cfg;
    cfg.num_trees = 1;
    cfg.num_leaves = 2;
    EstimatorModel m = fit_gbm(table, cfg);
    ImportanceReport rep = feature_importance(m);
    CHECK(rep.total_internal_nodes == 1);
    CHECK(rep.counts[0].first == "f0");
    CHECK(rep.counts[0].second == 1);

    Rng rng(10);
    auto table2 = random_table(rng, 40, 3);
    GbmConfig cfg2;
    cfg2.num_trees = 12;
    cfg2.num_leaves = 6;
    EstimatorModel m2 = fit_gbm(table2, cfg2);
    ImportanceReport rep2 = feature_importance(m2);
    long total = 0;
    int internal = 0;
    for (const auto& [name, c] : rep2.counts) total += c;
    for (const auto& t : std::get<GbmModel>(m2.impl).trees) internal += t.internal_count();
    CHECK(total == rep2.total_internal_nodes);
    CHECK(total == internal);

    NnRegConfig lcfg;
    lcfg.epochs = 1;
    EstimatorModel lin = fit_logit_linear(table, lcfg);
    CHECK_THROWS_AS(feature_importance(lin), ValidationError);
}

TEST_CASE("model serialization round-trips bit-identical predictions") {
    TempDir tmp;
    Rng rng(11);
    auto table = random_table(rng, 30, 3);

    std::vector<EstimatorModel> models;
    GbmConfig gcfg;
    gcfg.num_trees = 15;
    gcfg.subsample = 0.8;
    gcfg.colsample_bytree = 0.7;
    models.push_back(fit_gbm(table, gcfg));
    models.push_back(fit_random_forest(table, 5, 3));
    NnRegConfig lcfg;
    lcfg.epochs = 20;
    models.push_back(fit_logit_linear(table, lcfg));
    NnRegConfig dcfg;
    dcfg.hidden_layers = 3;
    dcfg.hidden_units = 260;
    dcfg.epochs = 5;
    models.push_back(fit_dnn(table, dcfg));

    int idx = 0;
    for (const auto& m : models) {
        const auto path = (tmp.path / ("m" + std::to_string(idx++) + ".json")).string();
        save_model(path, m, json::object());
        EstimatorModel back = load_model(path);
        CHECK(back.kind == m.kind);
        CHECK(back.feature_names == m.feature_names);
        for (int i = 0; i < table.n(); ++i)
            CHECK(back.predict(table.rows[static_cast<size_t>(i)]) ==
                  m.predict(table.rows[static_cast<size_t>(i)]));
    }

    // dimension mismatch rejected
    const std::vector<double> short_row = {1.0};
    CHECK_THROWS_AS(models[0].predict(short_row), ValidationError);

    // name mismatch rejected in predict_table
    FeatureTable other = table;
    other.feature_names[0] = "different";
    CHECK_THROWS_AS(models[0].predict_table(other), ValidationError);
}

TEST_CASE("targets outside [0,1] are rejected") {
    auto bad = make_table({{0.0}, {1.0}}, {0.5, 1.5});
    CHECK_THROWS_AS(fit_gbm(bad, GbmConfig{}), ValidationError);
}
