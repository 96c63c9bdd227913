#include "weightzoo/estimators.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <queue>
#include <thread>

#include "weightzoo/metrics.hpp"

namespace weightzoo {

int Tree::depth() const {
    // iterative: depth of node 0
    std::vector<std::pair<int, int>> stack{{0, 0}};
    int best = 0;
    while (!stack.empty()) {
        auto [i, d] = stack.back();
        stack.pop_back();
        best = std::max(best, d);
        const auto& nd = nodes[static_cast<size_t>(i)];
        if (nd.feature >= 0) {
            stack.push_back({nd.left, d + 1});
            stack.push_back({nd.right, d + 1});
        }
    }
    return best;
}

json GbmConfig::to_json() const {
    return json{{"num_trees", num_trees},
                {"num_leaves", num_leaves},
                {"max_depth", max_depth},
                {"learning_rate", learning_rate},
                {"max_bin", max_bin},
                {"min_child_weight", min_child_weight},
                {"reg_lambda", reg_lambda},
                {"reg_alpha", reg_alpha},
                {"subsample", subsample},
                {"subsample_freq", subsample_freq},
                {"colsample_bytree", colsample_bytree},
                {"seed", seed}};
}

GbmConfig GbmConfig::from_json(const json& j) {
    GbmConfig c;
    c.num_trees = j.at("num_trees").get<int>();
    c.num_leaves = j.at("num_leaves").get<int>();
    c.max_depth = j.at("max_depth").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.max_bin = j.at("max_bin").get<int>();
    c.min_child_weight = j.at("min_child_weight").get<int>();
    c.reg_lambda = j.at("reg_lambda").get<double>();
    c.reg_alpha = j.at("reg_alpha").get<double>();
    c.subsample = j.at("subsample").get<double>();
    c.subsample_freq = j.at("subsample_freq").get<int>();
    c.colsample_bytree = j.at("colsample_bytree").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

bool is_high_dim_feature_kind(const std::string& feature_kind) {
    return feature_kind == "flat_all" || feature_kind == "flat_layer:2" ||
           feature_kind == "flat_layer:3" || feature_kind == "hyperparams_plus_flat";
}

GbmConfig default_gbm_config(const std::string& feature_kind, uint64_t seed) {
    GbmConfig c;
    c.seed = seed;
    if (is_high_dim_feature_kind(feature_kind)) c.colsample_bytree = 0.1;
    return c;
}

json NnRegConfig::to_json() const {
    return json{{"hidden_layers", hidden_layers},
                {"hidden_units", hidden_units},
                {"dropout_rate", dropout_rate},
                {"l2_coeff", l2_coeff},
                {"learning_rate", learning_rate},
                {"init_type", to_string(init_type)},
                {"init_variance", init_variance},
                {"optimizer", to_string(optimizer)},
                {"batch_size", batch_size},
                {"epochs", epochs},
                {"seed", seed}};
}

NnRegConfig NnRegConfig::from_json(const json& j) {
    NnRegConfig c;
    c.hidden_layers = j.at("hidden_layers").get<int>();
    c.hidden_units = j.at("hidden_units").get<int>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.l2_coeff = j.at("l2_coeff").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.init_type = parse_init_kind(j.at("init_type").get<std::string>());
    c.init_variance = j.at("init_variance").get<double>();
    c.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

std::string to_string(EstimatorKind k) {
    switch (k) {
        case EstimatorKind::logit_linear: return "logit_linear";
        case EstimatorKind::gbm: return "gbm";
        case EstimatorKind::random_forest: return "random_forest";
        case EstimatorKind::dnn: return "dnn";
    }
    return "?";
}

EstimatorKind parse_estimator_kind(const std::string& s) {
    if (s == "logit_linear") return EstimatorKind::logit_linear;
    if (s == "gbm") return EstimatorKind::gbm;
    if (s == "random_forest") return EstimatorKind::random_forest;
    if (s == "dnn") return EstimatorKind::dnn;
    throw ParseError("unknown estimator kind: " + s);
}

// ---------------------------------------------------------------------------
// Histogram binning
// ---------------------------------------------------------------------------

namespace {

struct BinnedFeature {
    std::vector<double> thresholds;  // ascending; value <= thresholds[j] -> bin j
    std::vector<uint16_t> code;      // per row
    int bins = 1;
};

struct BinnedTable {
    std::vector<BinnedFeature> feats;
    int n = 0;
    int max_bins = 1;
};

BinnedTable build_bins(const FeatureTable& table, int max_bin) {
    if (max_bin < 2) throw ValidationError("max_bin must be >= 2");
    BinnedTable bt;
    bt.n = table.n();
    const int d = table.dim();
    bt.feats.resize(static_cast<size_t>(d));
    std::vector<double> vals(static_cast<size_t>(bt.n));
    for (int f = 0; f < d; ++f) {
        for (int i = 0; i < bt.n; ++i) vals[static_cast<size_t>(i)] = table.rows[static_cast<size_t>(i)][static_cast<size_t>(f)];
        std::vector<double> sorted = vals;
        std::sort(sorted.begin(), sorted.end());
        std::vector<std::pair<double, int>> distinct;
        for (double v : sorted) {
            if (distinct.empty() || v != distinct.back().first)
                distinct.push_back({v, 1});
            else
                ++distinct.back().second;
        }
        auto& bf = bt.feats[static_cast<size_t>(f)];
        const int nd = static_cast<int>(distinct.size());
        if (nd <= max_bin) {
            // one bin per distinct training value
            bf.bins = nd;
            for (int j = 0; j + 1 < nd; ++j)
                bf.thresholds.push_back(0.5 * (distinct[static_cast<size_t>(j)].first +
                                               distinct[static_cast<size_t>(j + 1)].first));
        } else {
            // equal-frequency bin edges from the training distribution
            const double step = static_cast<double>(bt.n) / max_bin;
            int b = 0;
            long cum = 0;
            std::vector<int> bin_of(static_cast<size_t>(nd));
            for (int j = 0; j < nd; ++j) {
                bin_of[static_cast<size_t>(j)] = b;
                cum += distinct[static_cast<size_t>(j)].second;
                if (static_cast<double>(cum) >= step * (b + 1) && b + 1 < max_bin) ++b;
            }
            for (int j = 0; j + 1 < nd; ++j)
                if (bin_of[static_cast<size_t>(j + 1)] != bin_of[static_cast<size_t>(j)])
                    bf.thresholds.push_back(0.5 * (distinct[static_cast<size_t>(j)].first +
                                                   distinct[static_cast<size_t>(j + 1)].first));
            bf.bins = static_cast<int>(bf.thresholds.size()) + 1;
        }
        bf.code.resize(static_cast<size_t>(bt.n));
        for (int i = 0; i < bt.n; ++i) {
            const auto it = std::lower_bound(bf.thresholds.begin(), bf.thresholds.end(),
                                             vals[static_cast<size_t>(i)]);
            bf.code[static_cast<size_t>(i)] = static_cast<uint16_t>(it - bf.thresholds.begin());
        }
        bt.max_bins = std::max(bt.max_bins, bf.bins);
    }
    return bt;
}

// ---------------------------------------------------------------------------
// Leaf-wise tree growing
// ---------------------------------------------------------------------------

constexpr double kMinSplitGain = 1e-12;

inline double soft_threshold(double g, double alpha) {
    if (g > alpha) return g - alpha;
    if (g < -alpha) return g + alpha;
    return 0.0;
}

inline double leaf_score(double g, long cnt, double lambda, double alpha) {
    const double t = soft_threshold(g, alpha);
    return t * t / (static_cast<double>(cnt) + lambda);
}

struct GrowCfg {
    int max_leaves = 31;
    int max_depth = 0;  // 0 = unlimited
    double reg_lambda = 0.0;
    double reg_alpha = 0.0;
    int min_child = 1;
    double shrinkage = 1.0;
};

struct SplitCand {
    double gain = -1.0;
    int feature = -1;
    int bin = -1;
    double threshold = 0.0;
    double left_sum = 0.0;
    long left_cnt = 0;
    bool valid() const { return gain >= kMinSplitGain; }
};

class TreeGrower {
public:
    TreeGrower(const BinnedTable& bt, const GrowCfg& cfg) : bt_(bt), cfg_(cfg) {
        hist_sum_.resize(static_cast<size_t>(bt.max_bins));
        hist_cnt_.resize(static_cast<size_t>(bt.max_bins));
    }

    /// rows may contain duplicates (bootstrap); residuals indexed by row id.
    Tree grow(std::vector<int> rows, const std::vector<int>& features,
              const std::vector<double>& residuals) {
        res_ = &residuals;
        Tree tree;
        tree.nodes.push_back(TreeNode{});
        states_.clear();
        while (!heap_.empty()) heap_.pop();

        double total = 0.0;
        for (int r : rows) total += residuals[static_cast<size_t>(r)];
        consider(tree, 0, std::move(rows), 0, total, features);

        int leaves = 1;
        while (leaves < cfg_.max_leaves && !heap_.empty()) {
            const HeapItem top = heap_.top();
            heap_.pop();
            NodeState st = std::move(states_.at(top.node));
            states_.erase(top.node);

            const int li = static_cast<int>(tree.nodes.size());
            tree.nodes.push_back(TreeNode{});
            const int ri = static_cast<int>(tree.nodes.size());
            tree.nodes.push_back(TreeNode{});
            auto& nd = tree.nodes[static_cast<size_t>(top.node)];
            nd.feature = st.cand.feature;
            nd.threshold = st.cand.threshold;
            nd.left = li;
            nd.right = ri;
            nd.value = 0.0;
            ++leaves;

            const auto& code = bt_.feats[static_cast<size_t>(st.cand.feature)].code;
            std::vector<int> lrows, rrows;
            lrows.reserve(static_cast<size_t>(st.cand.left_cnt));
            rrows.reserve(st.rows.size() - static_cast<size_t>(st.cand.left_cnt));
            for (int r : st.rows) {
                if (code[static_cast<size_t>(r)] <= st.cand.bin)
                    lrows.push_back(r);
                else
                    rrows.push_back(r);
            }
            consider(tree, li, std::move(lrows), st.depth + 1, st.cand.left_sum, features);
            consider(tree, ri, std::move(rrows), st.depth + 1, st.sum - st.cand.left_sum, features);
        }
        res_ = nullptr;
        return tree;
    }

private:
    struct NodeState {
        std::vector<int> rows;
        int depth = 0;
        double sum = 0.0;
        SplitCand cand;
    };
    struct HeapItem {
        double gain;
        int node;
        bool operator<(const HeapItem& o) const {
            if (gain != o.gain) return gain < o.gain;
            return node > o.node;  // equal gains: lower node id first
        }
    };

    void consider(Tree& tree, int node, std::vector<int>&& rows, int depth, double sum,
                  const std::vector<int>& features) {
        const long n = static_cast<long>(rows.size());
        auto& nd = tree.nodes[static_cast<size_t>(node)];
        nd.value = cfg_.shrinkage * soft_threshold(sum, cfg_.reg_alpha) /
                   (static_cast<double>(n) + cfg_.reg_lambda);
        if (cfg_.max_depth > 0 && depth >= cfg_.max_depth) return;
        if (n < 2L * cfg_.min_child) return;
        SplitCand cand = best_split(rows, sum, features);
        if (!cand.valid()) return;
        NodeState st;
        st.rows = std::move(rows);
        st.depth = depth;
        st.sum = sum;
        st.cand = cand;
        states_.emplace(node, std::move(st));
        heap_.push(HeapItem{cand.gain, node});
    }

    SplitCand best_split(const std::vector<int>& rows, double sum, const std::vector<int>& features) {
        SplitCand best;
        const long n = static_cast<long>(rows.size());
        const double parent = leaf_score(sum, n, cfg_.reg_lambda, cfg_.reg_alpha);
        for (int f : features) {
            const auto& bf = bt_.feats[static_cast<size_t>(f)];
            if (bf.bins < 2) continue;
            std::fill(hist_sum_.begin(), hist_sum_.begin() + bf.bins, 0.0);
            std::fill(hist_cnt_.begin(), hist_cnt_.begin() + bf.bins, 0L);
            for (int r : rows) {
                const int c = bf.code[static_cast<size_t>(r)];
                hist_sum_[static_cast<size_t>(c)] += (*res_)[static_cast<size_t>(r)];
                ++hist_cnt_[static_cast<size_t>(c)];
            }
            double lsum = 0.0;
            long lcnt = 0;
            for (int b = 0; b + 1 < bf.bins; ++b) {
                lsum += hist_sum_[static_cast<size_t>(b)];
                lcnt += hist_cnt_[static_cast<size_t>(b)];
                if (lcnt < cfg_.min_child) continue;
                const long rcnt = n - lcnt;
                if (rcnt < cfg_.min_child) break;
                const double gain = leaf_score(lsum, lcnt, cfg_.reg_lambda, cfg_.reg_alpha) +
                                    leaf_score(sum - lsum, rcnt, cfg_.reg_lambda, cfg_.reg_alpha) -
                                    parent;
                if (gain > best.gain) {
                    best.gain = gain;
                    best.feature = f;
                    best.bin = b;
                    best.threshold = bf.thresholds[static_cast<size_t>(b)];
                    best.left_sum = lsum;
                    best.left_cnt = lcnt;
                }
            }
        }
        return best;
    }

    const BinnedTable& bt_;
    GrowCfg cfg_;
    const std::vector<double>* res_ = nullptr;
    std::vector<double> hist_sum_;
    std::vector<long> hist_cnt_;
    std::map<int, NodeState> states_;
    std::priority_queue<HeapItem> heap_;
};

void check_targets(const FeatureTable& table) {
    if (table.n() < 1) throw ValidationError("estimator: empty table");
    for (double t : table.targets)
        if (!(t >= 0.0 && t <= 1.0))
            throw ValidationError("estimator: target outside [0, 1]: " + format_g9(t));
}

std::vector<int> all_indices(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Fitters
// ---------------------------------------------------------------------------

EstimatorModel fit_gbm(const FeatureTable& table, const GbmConfig& cfg) {
    check_targets(table);
    if (cfg.num_trees < 1 || cfg.num_leaves < 1 || cfg.max_bin < 2 || cfg.min_child_weight < 1 ||
        !(cfg.learning_rate > 0.0) || cfg.reg_lambda < 0.0 || cfg.reg_alpha < 0.0 ||
        !(cfg.subsample > 0.0 && cfg.subsample <= 1.0) ||
        !(cfg.colsample_bytree > 0.0 && cfg.colsample_bytree <= 1.0))
        throw ValidationError("bad GBM configuration");

    const int n = table.n();
    const int d = table.dim();
    const BinnedTable bins = build_bins(table, cfg.max_bin);

    double base = 0.0;
    for (double t : table.targets) base += t;
    base /= n;

    std::vector<double> pred(static_cast<size_t>(n), base);
    std::vector<double> residual(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) residual[static_cast<size_t>(i)] = table.targets[static_cast<size_t>(i)] - base;

    GrowCfg gc{cfg.num_leaves, cfg.max_depth, cfg.reg_lambda, cfg.reg_alpha, cfg.min_child_weight,
               cfg.learning_rate};
    TreeGrower grower(bins, gc);

    GbmModel model;
    model.base_score = base;
    std::vector<double> curve;
    curve.reserve(static_cast<size_t>(cfg.num_trees));
    const int row_take = std::max(1, static_cast<int>(std::floor(cfg.subsample * n)));
    const int col_take = std::max(1, static_cast<int>(std::lround(cfg.colsample_bytree * d)));
    for (int t = 0; t < cfg.num_trees; ++t) {
        std::vector<int> rows;
        if (cfg.subsample < 1.0 && cfg.subsample_freq > 0 && (t % cfg.subsample_freq) == 0) {
            Rng rng(derive_seed(cfg.seed, "rows", static_cast<uint64_t>(t)));
            rows = rng.sample_without_replacement(n, row_take);
        } else {
            rows = all_indices(n);
        }
        std::vector<int> feats;
        if (cfg.colsample_bytree < 1.0) {
            Rng rng(derive_seed(cfg.seed, "cols", static_cast<uint64_t>(t)));
            feats = rng.sample_without_replacement(d, col_take);
        } else {
            feats = all_indices(d);
        }
        Tree tree = grower.grow(std::move(rows), feats, residual);
        double mse = 0.0;
        for (int i = 0; i < n; ++i) {
            pred[static_cast<size_t>(i)] += tree.predict(table.rows[static_cast<size_t>(i)]);
            const double e = table.targets[static_cast<size_t>(i)] - pred[static_cast<size_t>(i)];
            residual[static_cast<size_t>(i)] = e;
            mse += e * e;
        }
        curve.push_back(mse / n);
        model.trees.push_back(std::move(tree));
    }

    EstimatorModel out;
    out.kind = EstimatorKind::gbm;
    out.feature_kind = table.feature_kind;
    out.feature_names = table.feature_names;
    out.config = cfg.to_json();
    out.impl = std::move(model);
    out.train_curve = std::move(curve);
    return out;
}

EstimatorModel fit_random_forest(const FeatureTable& table, int num_trees, uint64_t seed) {
    check_targets(table);
    if (num_trees < 1) throw ValidationError("random forest needs at least one tree");
    const int n = table.n();
    const BinnedTable bins = build_bins(table, 255);
    GrowCfg gc{std::max(n, 2), 0, 0.0, 0.0, 1, 1.0};
    TreeGrower grower(bins, gc);
    const auto feats = all_indices(table.dim());

    ForestModel model;
    for (int t = 0; t < num_trees; ++t) {
        Rng rng(derive_seed(seed, "bootstrap", static_cast<uint64_t>(t)));
        std::vector<int> rows(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) rows[static_cast<size_t>(i)] = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
        std::sort(rows.begin(), rows.end());
        model.trees.push_back(grower.grow(std::move(rows), feats, table.targets));
    }

    EstimatorModel out;
    out.kind = EstimatorKind::random_forest;
    out.feature_kind = table.feature_kind;
    out.feature_names = table.feature_names;
    out.config = json{{"num_trees", num_trees}, {"seed", seed}};
    out.impl = std::move(model);
    return out;
}

namespace {

EstimatorModel fit_nn_regressor(const FeatureTable& table, const NnRegConfig& cfg,
                                EstimatorKind kind) {
    check_targets(table);
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ValidationError("bad regressor configuration");
    const int n = table.n();
    const int d = table.dim();
    std::vector<int> hidden(static_cast<size_t>(cfg.hidden_layers), cfg.hidden_units);
    NetworkSpec spec = make_mlp({1, 1, d}, hidden, 1, Activation::relu, cfg.dropout_rate);

    std::vector<float> x(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        for (int f = 0; f < d; ++f)
            x[static_cast<size_t>(i) * d + f] = static_cast<float>(table.rows[static_cast<size_t>(i)][static_cast<size_t>(f)]);

    auto params = init_params<float>(spec, cfg.init_type, cfg.init_variance,
                                     derive_seed(cfg.seed, "init"));
    Optimizer<float> opt(spec, cfg.optimizer, cfg.learning_rate);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<int> order = all_indices(n);
    std::vector<float> batch(static_cast<size_t>(cfg.batch_size) * d);
    std::vector<double> targets(static_cast<size_t>(cfg.batch_size));
    uint64_t step = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        shuffle_rng.shuffle(order);
        for (int off = 0; off < n; off += cfg.batch_size) {
            const int bs = std::min(cfg.batch_size, n - off);
            for (int b = 0; b < bs; ++b) {
                const int r = order[static_cast<size_t>(off + b)];
                std::copy_n(x.begin() + static_cast<long>(r) * d, d,
                            batch.begin() + static_cast<long>(b) * d);
                targets[static_cast<size_t>(b)] = table.targets[static_cast<size_t>(r)];
            }
            auto lg = sigmoid_mse_loss_and_grads<float>(
                spec, params, std::span<const float>(batch.data(), static_cast<size_t>(bs) * d), bs,
                std::span<const double>(targets.data(), static_cast<size_t>(bs)), cfg.l2_coeff,
                derive_seed(cfg.seed, "step", step));
            if (!std::isfinite(lg.loss) || !lg.grads.all_finite())
                throw TrainingError("non-finite loss while fitting " + to_string(kind));
            opt.step(params, lg.grads);
            if (!params.all_finite())
                throw TrainingError("non-finite parameters while fitting " + to_string(kind));
            ++step;
        }
    }

    EstimatorModel out;
    out.kind = kind;
    out.feature_kind = table.feature_kind;
    out.feature_names = table.feature_names;
    out.config = cfg.to_json();
    out.impl = NnRegModel{std::move(spec), std::move(params)};
    return out;
}

}  // namespace

EstimatorModel fit_logit_linear(const FeatureTable& table, const NnRegConfig& cfg) {
    NnRegConfig c = cfg;
    c.hidden_layers = 0;
    c.dropout_rate = 0.0;
    return fit_nn_regressor(table, c, EstimatorKind::logit_linear);
}

EstimatorModel fit_dnn(const FeatureTable& table, const NnRegConfig& cfg) {
    if (cfg.hidden_layers < 1) throw ValidationError("dnn needs at least one hidden layer");
    return fit_nn_regressor(table, cfg, EstimatorKind::dnn);
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

double EstimatorModel::predict(std::span<const double> features) const {
    if (features.size() != feature_names.size())
        throw ValidationError("predict: got " + std::to_string(features.size()) +
                              " features, model expects " + std::to_string(feature_names.size()));
    if (const auto* g = std::get_if<GbmModel>(&impl)) {
        double s = g->base_score;
        for (const auto& t : g->trees) s += t.predict(features);
        return std::clamp(s, 0.0, 1.0);
    }
    if (const auto* f = std::get_if<ForestModel>(&impl)) {
        double s = 0.0;
        for (const auto& t : f->trees) s += t.predict(features);
        return std::clamp(s / static_cast<double>(f->trees.size()), 0.0, 1.0);
    }
    const auto& nn = std::get<NnRegModel>(impl);
    std::vector<float> x(features.size());
    for (size_t i = 0; i < features.size(); ++i) x[i] = static_cast<float>(features[i]);
    auto logits = forward<float>(nn.spec, nn.params, x, 1);
    return 1.0 / (1.0 + std::exp(-static_cast<double>(logits[0])));
}

std::vector<double> EstimatorModel::predict_table(const FeatureTable& table) const {
    if (table.feature_names != feature_names)
        throw ValidationError(
            "predict: table feature names do not match the model (model kind " +
            feature_kind + " over " + std::to_string(feature_names.size()) +
            " features vs table kind " + table.feature_kind + " over " +
            std::to_string(table.feature_names.size()) + ")");
    std::vector<double> out(static_cast<size_t>(table.n()));
    for (int i = 0; i < table.n(); ++i) out[static_cast<size_t>(i)] = predict(table.rows[static_cast<size_t>(i)]);
    return out;
}

// ---------------------------------------------------------------------------
// Random search with k-fold cross-validation
// ---------------------------------------------------------------------------

namespace {

struct ConfigCandidate {
    json descriptor;
    std::function<EstimatorModel(const FeatureTable&)> fit;
};

ConfigCandidate sample_search_config(EstimatorKind kind, const FeatureTable& table, uint64_t seed,
                                     int index) {
    Rng rng(derive_seed(seed, "config", static_cast<uint64_t>(index)));
    const uint64_t fit_seed = derive_seed(seed, "fit", static_cast<uint64_t>(index));
    switch (kind) {
        case EstimatorKind::gbm: {
            GbmConfig c;
            c.num_leaves = 20 + static_cast<int>(rng.below(10000 - 20 + 1));
            c.max_depth = 5 + static_cast<int>(rng.below(11));
            c.learning_rate = rng.log_uniform(1e-2, 1e-1);
            const int bins[] = {63, 127, 255};
            c.max_bin = bins[rng.below(3)];
            c.min_child_weight = 1 + static_cast<int>(rng.below(5));
            c.reg_lambda = rng.uniform(1e-3, 100.0);
            c.reg_alpha = rng.uniform(1e-6, 5.0);
            c.subsample = static_cast<double>(rng.below(10) + 1) / 10.0;
            c.subsample_freq = 1;
            c.colsample_bytree = is_high_dim_feature_kind(table.feature_kind)
                                     ? rng.log_uniform(1e-2, 1e-1)
                                     : rng.uniform(0.7, 1.0);
            const int ntrees[] = {50, 100, 200, 500};
            c.num_trees = ntrees[rng.below(4)];
            c.seed = fit_seed;
            return {c.to_json(), [c](const FeatureTable& t) { return fit_gbm(t, c); }};
        }
        case EstimatorKind::random_forest: {
            const uint64_t s = fit_seed;
            json desc{{"num_trees", 32}, {"seed", s}};
            return {desc, [s](const FeatureTable& t) { return fit_random_forest(t, 32, s); }};
        }
        case EstimatorKind::dnn:
        case EstimatorKind::logit_linear: {
            NnRegConfig c;
            if (kind == EstimatorKind::dnn) {
                c.hidden_layers = 3 + static_cast<int>(rng.below(7));
                c.hidden_units = 256 + static_cast<int>(rng.below(256));
                c.dropout_rate = rng.uniform(0.0, 0.2);
            } else {
                c.hidden_layers = 0;
                c.hidden_units = 0;
                c.dropout_rate = 0.0;
            }
            c.l2_coeff = rng.log_uniform(1e-8, 1e-3);
            c.learning_rate = rng.log_uniform(1e-3, 0.5);
            c.optimizer = rng.below(2) == 0 ? OptimizerKind::adam : OptimizerKind::sgd;
            const int batches[] = {64, 128, 256, 512};
            c.batch_size = batches[rng.below(4)];
            const InitKind inits[] = {InitKind::xavier_normal, InitKind::he_normal,
                                      InitKind::orthogonal, InitKind::normal,
                                      InitKind::truncated_normal};
            c.init_type = inits[rng.below(5)];
            c.init_variance = rng.log_uniform(1e-3, 0.1);
            c.epochs = 150;
            c.seed = fit_seed;
            if (kind == EstimatorKind::dnn)
                return {c.to_json(), [c](const FeatureTable& t) { return fit_dnn(t, c); }};
            return {c.to_json(), [c](const FeatureTable& t) { return fit_logit_linear(t, c); }};
        }
    }
    throw Error("internal", "unreachable estimator kind");
}

double mse_of(std::span<const double> truth, std::span<const double> pred) {
    double s = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) s += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    return s / static_cast<double>(truth.size());
}

}  // namespace

json CvReport::to_json() const {
    auto stats = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair<double, double>(m, std::sqrt(s / static_cast<double>(v.size())));
    };
    json j{{"estimator", estimator},
           {"budget", budget},
           {"folds", folds},
           {"seed", seed},
           {"best_index", best_index},
           {"best_config", best_config},
           {"fold_mse", fold_mse},
           {"fold_r2", fold_r2},
           {"failed_configs", failed_configs},
           {"config_log", config_log}};
    if (!fold_mse.empty()) {
        auto [mm, sm] = stats(fold_mse);
        j["mean_mse"] = mm;
        j["std_mse"] = sm;
    }
    if (!fold_r2.empty()) {
        auto [mr, sr] = stats(fold_r2);
        j["mean_r2"] = mr;
        j["std_r2"] = sr;
    }
    return j;
}

SearchResult random_search(const FeatureTable& table, EstimatorKind kind, int budget, int folds,
                           uint64_t seed, int threads) {
    if (budget < 1) throw ValidationError("search budget must be >= 1");
    if (folds < 2) throw ValidationError("search needs at least 2 folds");
    const int n = table.n();
    if (n < folds) throw ValidationError("fewer rows than folds");

    // round-robin fold assignment over a shuffled order
    std::vector<int> order = [&] {
        std::vector<int> v(static_cast<size_t>(n));
        std::iota(v.begin(), v.end(), 0);
        Rng rng(derive_seed(seed, "folds"));
        rng.shuffle(v);
        return v;
    }();
    std::vector<int> fold_of(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) fold_of[static_cast<size_t>(order[static_cast<size_t>(i)])] = i % folds;

    std::vector<FeatureTable> fold_train(static_cast<size_t>(folds));
    std::vector<std::vector<int>> fold_val(static_cast<size_t>(folds));
    for (int j = 0; j < folds; ++j) {
        std::vector<int> tr;
        for (int i = 0; i < n; ++i)
            (fold_of[static_cast<size_t>(i)] == j ? fold_val[static_cast<size_t>(j)] : tr).push_back(i);
        fold_train[static_cast<size_t>(j)] = table.select_rows(tr);
    }

    struct ConfigResult {
        bool failed = false;
        std::string failure;
        std::vector<double> fold_mse, fold_r2;
        double mean_mse = 0.0;
        json descriptor;
    };
    std::vector<ConfigResult> results(static_cast<size_t>(budget));

    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&]() {
        try {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= budget) return;
                ConfigCandidate cand = sample_search_config(kind, table, seed, i);
                ConfigResult& res = results[static_cast<size_t>(i)];
                res.descriptor = cand.descriptor;
                try {
                    double total = 0.0;
                    for (int j = 0; j < folds; ++j) {
                        EstimatorModel m = cand.fit(fold_train[static_cast<size_t>(j)]);
                        std::vector<double> truth, pred;
                        for (int r : fold_val[static_cast<size_t>(j)]) {
                            truth.push_back(table.targets[static_cast<size_t>(r)]);
                            pred.push_back(m.predict(table.rows[static_cast<size_t>(r)]));
                        }
                        const double mse = mse_of(truth, pred);
                        res.fold_mse.push_back(mse);
                        double r2 = std::numeric_limits<double>::quiet_NaN();
                        try {
                            r2 = r2_score(truth, pred);
                        } catch (const Error&) {
                        }
                        res.fold_r2.push_back(r2);
                        total += mse;
                    }
                    res.mean_mse = total / folds;
                } catch (const TrainingError& e) {
                    res.failed = true;
                    res.failure = e.what();
                }
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            next.store(budget);
        }
    };
    const int nthreads = std::max(1, threads);
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    CvReport report;
    report.estimator = to_string(kind);
    report.budget = budget;
    report.folds = folds;
    report.seed = seed;
    int best = -1;
    for (int i = 0; i < budget; ++i) {
        const auto& r = results[static_cast<size_t>(i)];
        json entry{{"index", i}, {"config", r.descriptor}};
        if (r.failed) {
            entry["failed"] = r.failure;
            ++report.failed_configs;
        } else {
            entry["mean_cv_mse"] = r.mean_mse;
            if (best < 0 || r.mean_mse < results[static_cast<size_t>(best)].mean_mse) best = i;
        }
        report.config_log.push_back(entry);
    }
    if (best < 0) {
        throw TrainingError("random search: all " + std::to_string(budget) +
                            " configurations failed; log: " + report.config_log.dump());
    }
    report.best_index = best;
    report.best_config = results[static_cast<size_t>(best)].descriptor;
    report.fold_mse = results[static_cast<size_t>(best)].fold_mse;
    report.fold_r2 = results[static_cast<size_t>(best)].fold_r2;

    ConfigCandidate chosen = sample_search_config(kind, table, seed, best);
    SearchResult out{chosen.fit(table), std::move(report)};
    return out;
}

// ---------------------------------------------------------------------------
// Importance and serialization
// ---------------------------------------------------------------------------

ImportanceReport feature_importance(const EstimatorModel& model) {
    const std::vector<Tree>* trees = nullptr;
    if (const auto* g = std::get_if<GbmModel>(&model.impl)) trees = &g->trees;
    if (const auto* f = std::get_if<ForestModel>(&model.impl)) trees = &f->trees;
    if (!trees)
        throw ValidationError("feature importance is defined for tree-based models only");
    std::vector<long> counts(model.feature_names.size(), 0);
    long total = 0;
    for (const auto& t : *trees)
        for (const auto& nd : t.nodes)
            if (nd.feature >= 0) {
                ++counts[static_cast<size_t>(nd.feature)];
                ++total;
            }
    ImportanceReport rep;
    rep.total_internal_nodes = total;
    for (size_t i = 0; i < counts.size(); ++i)
        rep.counts.push_back({model.feature_names[i], counts[i]});
    std::sort(rep.counts.begin(), rep.counts.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return rep;
}

namespace {

json tree_to_json(const Tree& t) {
    json nodes = json::array();
    for (const auto& nd : t.nodes) {
        if (nd.feature < 0)
            nodes.push_back(json{{"value", nd.value}});
        else
            nodes.push_back(json{{"feature", nd.feature},
                                 {"threshold", nd.threshold},
                                 {"left", nd.left},
                                 {"right", nd.right},
                                 {"default_left", nd.default_left}});
    }
    return json{{"nodes", nodes}};
}

Tree tree_from_json(const json& j) {
    Tree t;
    for (const auto& nj : j.at("nodes")) {
        TreeNode nd;
        if (nj.contains("feature")) {
            nd.feature = nj.at("feature").get<int>();
            nd.threshold = nj.at("threshold").get<double>();
            nd.left = nj.at("left").get<int>();
            nd.right = nj.at("right").get<int>();
            nd.default_left = nj.at("default_left").get<bool>();
        } else {
            nd.value = nj.at("value").get<double>();
        }
        t.nodes.push_back(nd);
    }
    if (t.nodes.empty()) throw ParseError("tree with no nodes");
    return t;
}

json params_to_json(const ParameterSet& p) {
    json layers = json::array();
    for (const auto& l : p.layers) {
        json kernel = json::array();
        for (float v : l.kernel) kernel.push_back(static_cast<double>(v));
        json bias = json::array();
        for (float v : l.bias) bias.push_back(static_cast<double>(v));
        layers.push_back(json{{"kernel", kernel}, {"bias", bias}});
    }
    return layers;
}

ParameterSet params_from_json(const NetworkSpec& spec, const json& j) {
    auto p = zeros_like<float>(spec);
    if (j.size() != p.layers.size()) throw ParseError("model weights: layer count mismatch");
    for (size_t i = 0; i < p.layers.size(); ++i) {
        const auto& lj = j.at(i);
        const auto& kj = lj.at("kernel");
        const auto& bj = lj.at("bias");
        if (kj.size() != p.layers[i].kernel.size() || bj.size() != p.layers[i].bias.size())
            throw ParseError("model weights: array size mismatch at layer " + std::to_string(i));
        for (size_t k = 0; k < p.layers[i].kernel.size(); ++k)
            p.layers[i].kernel[k] = static_cast<float>(kj.at(k).get<double>());
        for (size_t k = 0; k < p.layers[i].bias.size(); ++k)
            p.layers[i].bias[k] = static_cast<float>(bj.at(k).get<double>());
    }
    return p;
}

}  // namespace

void save_model(const std::string& path, const EstimatorModel& model, const json& run_config) {
    json m;
    if (const auto* g = std::get_if<GbmModel>(&model.impl)) {
        json trees = json::array();
        for (const auto& t : g->trees) trees.push_back(tree_to_json(t));
        m = json{{"base_score", g->base_score}, {"trees", trees}};
    } else if (const auto* f = std::get_if<ForestModel>(&model.impl)) {
        json trees = json::array();
        for (const auto& t : f->trees) trees.push_back(tree_to_json(t));
        m = json{{"trees", trees}};
    } else {
        const auto& nn = std::get<NnRegModel>(model.impl);
        if (model.kind == EstimatorKind::logit_linear) {
            json theta = json::array();
            for (float v : nn.params.layers[0].kernel) theta.push_back(static_cast<double>(v));
            m = json{{"theta", theta},
                     {"offset", static_cast<double>(nn.params.layers[0].bias[0])}};
        } else {
            m = json{{"architecture", network_spec_to_json(nn.spec)},
                     {"weights", params_to_json(nn.params)}};
        }
    }
    json doc{{"format_version", kModelVersion},
             {"kind", to_string(model.kind)},
             {"feature_kind", model.feature_kind},
             {"feature_names", model.feature_names},
             {"config", model.config},
             {"run_config", run_config},
             {"model", m}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write model " + path);
    out << doc.dump(2) << "\n";
    if (!out) throw IoError("failed writing model " + path);
}

EstimatorModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ParseError("bad model file " + path + ": " + e.what());
    }
    const int ver = doc.at("format_version").get<int>();
    if (ver != kModelVersion)
        throw VersionError("model " + path + " has format version " + std::to_string(ver) +
                           ", expected " + std::to_string(kModelVersion));
    EstimatorModel model;
    model.kind = parse_estimator_kind(doc.at("kind").get<std::string>());
    model.feature_kind = doc.at("feature_kind").get<std::string>();
    model.feature_names = doc.at("feature_names").get<std::vector<std::string>>();
    model.config = doc.at("config");
    const json& m = doc.at("model");
    switch (model.kind) {
        case EstimatorKind::gbm: {
            GbmModel g;
            g.base_score = m.at("base_score").get<double>();
            for (const auto& tj : m.at("trees")) g.trees.push_back(tree_from_json(tj));
            model.impl = std::move(g);
            break;
        }
        case EstimatorKind::random_forest: {
            ForestModel f;
            for (const auto& tj : m.at("trees")) f.trees.push_back(tree_from_json(tj));
            model.impl = std::move(f);
            break;
        }
        case EstimatorKind::logit_linear: {
            const auto theta = m.at("theta").get<std::vector<double>>();
            NetworkSpec spec = make_mlp({1, 1, static_cast<int>(theta.size())}, {}, 1);
            auto params = zeros_like<float>(spec);
            for (size_t i = 0; i < theta.size(); ++i)
                params.layers[0].kernel[i] = static_cast<float>(theta[i]);
            params.layers[0].bias[0] = static_cast<float>(m.at("offset").get<double>());
            model.impl = NnRegModel{std::move(spec), std::move(params)};
            break;
        }
        case EstimatorKind::dnn: {
            NetworkSpec spec = network_spec_from_json(m.at("architecture"));
            auto params = params_from_json(spec, m.at("weights"));
            model.impl = NnRegModel{std::move(spec), std::move(params)};
            break;
        }
    }
    return model;
}

}  // namespace weightzoo
