#pragma once

#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "weightzoo/features.hpp"
#include "weightzoo/net.hpp"

namespace weightzoo {

// ---------------------------------------------------------------------------
// Regression trees (shared by the boosting machine and the random forest)
// ---------------------------------------------------------------------------

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1, right = -1;
    bool default_left = true;  // kept in the format; table loads reject NaN features
    double value = 0.0;
};

struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    double predict(std::span<const double> x) const {
        int i = 0;
        while (nodes[static_cast<size_t>(i)].feature >= 0) {
            const auto& nd = nodes[static_cast<size_t>(i)];
            i = x[static_cast<size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
        }
        return nodes[static_cast<size_t>(i)].value;
    }

    int leaf_count() const {
        int c = 0;
        for (const auto& nd : nodes) c += nd.feature < 0;
        return c;
    }
    int internal_count() const { return static_cast<int>(nodes.size()) - leaf_count(); }
    int depth() const;
};

/// Boosting configuration; the value ranges follow the tuning space used by
/// random_search. Leaf values use the soft-thresholded sum of residuals over
/// (count + reg_lambda), scaled by learning_rate.
struct GbmConfig {
    int num_trees = 500;
    int num_leaves = 31;
    int max_depth = 8;  // 0 = unlimited
    double learning_rate = 0.05;
    int max_bin = 255;
    int min_child_weight = 1;
    double reg_lambda = 1.0;
    double reg_alpha = 1e-6;
    double subsample = 1.0;
    int subsample_freq = 1;
    double colsample_bytree = 1.0;
    uint64_t seed = 0;

    json to_json() const;
    static GbmConfig from_json(const json& j);
};

/// High-dimensional inputs (full flat vectors and middle conv layers) get the
/// aggressive per-tree feature subsampling range during search.
bool is_high_dim_feature_kind(const std::string& feature_kind);

GbmConfig default_gbm_config(const std::string& feature_kind, uint64_t seed);

struct GbmModel {
    double base_score = 0.0;
    std::vector<Tree> trees;
};

struct ForestModel {
    std::vector<Tree> trees;
};

/// Sigmoid-output network head used for both the logit-linear model
/// (hidden_layers == 0) and the fully-connected DNN regressor.
struct NnRegModel {
    NetworkSpec spec;
    ParameterSet params;
};

struct NnRegConfig {
    int hidden_layers = 0;
    int hidden_units = 256;
    double dropout_rate = 0.0;
    double l2_coeff = 0.0;
    double learning_rate = 1e-2;
    InitKind init_type = InitKind::xavier_normal;
    double init_variance = 0.05;
    OptimizerKind optimizer = OptimizerKind::adam;
    int batch_size = 128;
    int epochs = 150;
    uint64_t seed = 0;

    json to_json() const;
    static NnRegConfig from_json(const json& j);
};

enum class EstimatorKind { logit_linear, gbm, random_forest, dnn };
std::string to_string(EstimatorKind k);
EstimatorKind parse_estimator_kind(const std::string& s);

struct EstimatorModel {
    EstimatorKind kind = EstimatorKind::gbm;
    std::string feature_kind;
    std::vector<std::string> feature_names;
    json config;
    std::variant<GbmModel, ForestModel, NnRegModel> impl;
    std::vector<double> train_curve;  // per-iteration train MSE (boosting only; not serialized)

    /// Tree ensembles are clamped to [0, 1]; network heads are sigmoid-bounded.
    double predict(std::span<const double> features) const;
    /// Rejects tables whose feature names do not match training exactly.
    std::vector<double> predict_table(const FeatureTable& table) const;
};

EstimatorModel fit_gbm(const FeatureTable& table, const GbmConfig& cfg);
EstimatorModel fit_random_forest(const FeatureTable& table, int num_trees = 32, uint64_t seed = 0);
/// Throws TrainingError when training goes non-finite.
EstimatorModel fit_logit_linear(const FeatureTable& table, const NnRegConfig& cfg);
EstimatorModel fit_dnn(const FeatureTable& table, const NnRegConfig& cfg);

// --- random hyperparameter search with k-fold cross-validation ---

struct CvReport {
    std::string estimator;
    int budget = 0, folds = 0;
    uint64_t seed = 0;
    int best_index = -1;
    json best_config;
    std::vector<double> fold_mse, fold_r2;  // of the chosen config
    double mean_mse = 0.0, std_mse = 0.0, mean_r2 = 0.0, std_r2 = 0.0;
    int failed_configs = 0;
    json config_log = json::array();

    json to_json() const;
};

struct SearchResult {
    EstimatorModel model;  // best config refit on the full table
    CvReport report;
};

/// Samples `budget` configurations, scores each by mean k-fold CV MSE,
/// refits the argmin on the full table. Configurations whose training fails
/// are skipped; if all fail the search raises with a per-config log.
SearchResult random_search(const FeatureTable& table, EstimatorKind kind, int budget, int folds,
                           uint64_t seed, int threads = 1);

struct ImportanceReport {
    std::vector<std::pair<std::string, long>> counts;  // descending, then by name
    long total_internal_nodes = 0;
};

/// Split counts per feature over all trees; tree-based models only.
ImportanceReport feature_importance(const EstimatorModel& model);

inline constexpr int kModelVersion = 1;
void save_model(const std::string& path, const EstimatorModel& model, const json& run_config);
EstimatorModel load_model(const std::string& path);

}  // namespace weightzoo
