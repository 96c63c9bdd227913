#pragma once

// Independent reference implementations used to pin expected values in the
// tests. These deliberately avoid the library's code paths: finite
// differences instead of backprop, exhaustive threshold scans instead of
// histogram splits, O(n^2) pair counting instead of merge sorting.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "weightzoo/estimators.hpp"
#include "weightzoo/features.hpp"
#include "weightzoo/net.hpp"

namespace oracles {

/// Central finite differences of the cross-entropy loss wrt every parameter,
/// on a 64-bit copy of the network. h defaults to the gradient-check step.
inline weightzoo::Params<double> fd_gradient(const weightzoo::NetworkSpec& spec,
                                             const weightzoo::Params<double>& params,
                                             std::span<const double> input, int n,
                                             std::span<const int> labels, double l2,
                                             double h = 1e-5) {
    auto grads = weightzoo::zeros_like<double>(spec);
    auto loss_at = [&](const weightzoo::Params<double>& p) {
        // forward-only loss; dropout-free spec is required by the caller
        auto lg = weightzoo::ce_loss_and_grads<double>(spec, p, input, n, labels, l2, 0);
        return lg.loss;
    };
    weightzoo::Params<double> probe = params;
    for (size_t li = 0; li < params.layers.size(); ++li) {
        auto bump = [&](std::vector<double>& arr, std::vector<double>& garr) {
            for (size_t j = 0; j < arr.size(); ++j) {
                const double orig = arr[j];
                arr[j] = orig + h;
                const double up = loss_at(probe);
                arr[j] = orig - h;
                const double down = loss_at(probe);
                arr[j] = orig;
                garr[j] = (up - down) / (2.0 * h);
            }
        };
        bump(probe.layers[li].kernel, grads.layers[li].kernel);
        bump(probe.layers[li].bias, grads.layers[li].bias);
    }
    return grads;
}

/// Relative error with a floor so near-zero gradients are compared
/// absolutely against the finite-difference noise level.
inline double max_relative_error(const weightzoo::Params<double>& a,
                                 const weightzoo::Params<double>& b) {
    double worst = 0.0;
    for (size_t li = 0; li < a.layers.size(); ++li) {
        auto cmp = [&](const std::vector<double>& x, const std::vector<double>& y) {
            for (size_t j = 0; j < x.size(); ++j) {
                const double denom = std::max({std::abs(x[j]), std::abs(y[j]), 1e-3});
                worst = std::max(worst, std::abs(x[j] - y[j]) / denom);
            }
        };
        cmp(a.layers[li].kernel, b.layers[li].kernel);
        cmp(a.layers[li].bias, b.layers[li].bias);
    }
    return worst;
}

/// Smallest nonzero |pre-activation| across relu layers. Finite differences
/// straddle the relu kink when this is within the step size, so gradient
/// checks redraw inputs until a margin holds. Exact zeros only arise from
/// fully dead windows, which a sub-margin bump cannot wake, so they are
/// ignored.
inline double min_abs_relu_preact(const weightzoo::NetworkSpec& spec,
                                  const weightzoo::Params<double>& params,
                                  std::span<const double> input, int n) {
    weightzoo::ForwardCache<double> cache;
    weightzoo::forward<double>(spec, params, input, n, false, 0, &cache);
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < spec.layers.size(); ++i)
        if (spec.layers[i].activation == weightzoo::Activation::relu)
            for (double z : cache.preact[i])
                if (z != 0.0) best = std::min(best, std::abs(z));
    return best;
}

/// Gradient-check parameter draw: every kernel and bias entry is normal, so
/// the net has no structurally zero pre-activations.
inline weightzoo::Params<double> random_dense_params(const weightzoo::NetworkSpec& spec,
                                                     double stddev, uint64_t seed) {
    auto p = weightzoo::zeros_like<double>(spec);
    weightzoo::Rng rng(seed);
    for (auto& l : p.layers) {
        for (auto& v : l.kernel) v = rng.normal(0.0, stddev);
        for (auto& v : l.bias) v = rng.normal(0.0, stddev);
    }
    return p;
}

/// O(n^2) pair-counting Kendall tau-b.
inline double kendall_tau_pairs(std::span<const double> a, std::span<const double> b) {
    const size_t n = a.size();
    long long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double da = a[i] - a[j];
            const double db = b[i] - b[j];
            if (da == 0.0 && db == 0.0) {
                ++ties_a;
                ++ties_b;
            } else if (da == 0.0) {
                ++ties_a;
            } else if (db == 0.0) {
                ++ties_b;
            } else if ((da > 0.0) == (db > 0.0)) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    const long long n0 = static_cast<long long>(n) * (static_cast<long long>(n) - 1) / 2;
    const double denom = std::sqrt(static_cast<double>(n0 - ties_a) * static_cast<double>(n0 - ties_b));
    return static_cast<double>(concordant - discordant) / denom;
}

struct OracleSplit {
    bool found = false;
    double gain = -1.0;
    int feature = -1;
    double threshold = 0.0;
};

/// Exhaustive best split over every (feature, midpoint-between-distinct-
/// values) candidate, same leaf-score formula as the booster.
inline OracleSplit exhaustive_best_split(const weightzoo::FeatureTable& table,
                                         const std::vector<int>& rows,
                                         std::span<const double> residuals, double reg_lambda,
                                         double reg_alpha, int min_child) {
    auto soft = [&](double g) {
        if (g > reg_alpha) return g - reg_alpha;
        if (g < -reg_alpha) return g + reg_alpha;
        return 0.0;
    };
    auto score = [&](double g, long cnt) {
        const double t = soft(g);
        return t * t / (static_cast<double>(cnt) + reg_lambda);
    };
    double total = 0.0;
    for (int r : rows) total += residuals[static_cast<size_t>(r)];
    const long n = static_cast<long>(rows.size());
    const double parent = score(total, n);

    OracleSplit best;
    for (int f = 0; f < table.dim(); ++f) {
        std::vector<std::pair<double, double>> vals;  // (feature value, residual)
        for (int r : rows)
            vals.push_back({table.rows[static_cast<size_t>(r)][static_cast<size_t>(f)],
                            residuals[static_cast<size_t>(r)]});
        std::sort(vals.begin(), vals.end(),
                  [](const auto& x, const auto& y) { return x.first < y.first; });
        double lsum = 0.0;
        long lcnt = 0;
        for (size_t i = 0; i + 1 < vals.size(); ++i) {
            lsum += vals[i].second;
            ++lcnt;
            if (vals[i].first == vals[i + 1].first) continue;  // not a boundary
            if (lcnt < min_child || n - lcnt < min_child) continue;
            const double gain = score(lsum, lcnt) + score(total - lsum, n - lcnt) - parent;
            const double threshold = 0.5 * (vals[i].first + vals[i + 1].first);
            if (gain > best.gain) {
                best.found = true;
                best.gain = gain;
                best.feature = f;
                best.threshold = threshold;
            }
        }
    }
    return best;
}

/// Left-row set a split induces on a node's rows, sorted.
inline std::vector<int> split_left_rows(const weightzoo::FeatureTable& table,
                                        const std::vector<int>& rows, int feature,
                                        double threshold) {
    std::vector<int> left;
    for (int r : rows)
        if (table.rows[static_cast<size_t>(r)][static_cast<size_t>(feature)] <= threshold)
            left.push_back(r);
    std::sort(left.begin(), left.end());
    return left;
}

/// Gain of a concrete partition under the booster's leaf-score formula.
inline double partition_gain(std::span<const double> residuals, const std::vector<int>& left,
                             const std::vector<int>& right, double reg_lambda, double reg_alpha) {
    auto soft = [&](double g) {
        if (g > reg_alpha) return g - reg_alpha;
        if (g < -reg_alpha) return g + reg_alpha;
        return 0.0;
    };
    auto score = [&](double g, size_t cnt) {
        const double t = soft(g);
        return t * t / (static_cast<double>(cnt) + reg_lambda);
    };
    double gl = 0.0, gr = 0.0;
    for (int r : left) gl += residuals[static_cast<size_t>(r)];
    for (int r : right) gr += residuals[static_cast<size_t>(r)];
    return score(gl, left.size()) + score(gr, right.size()) -
           score(gl + gr, left.size() + right.size());
}

/// Routes training rows through a fitted tree, returning per-node row lists
/// (indexed like tree.nodes).
inline std::vector<std::vector<int>> route_rows(const weightzoo::Tree& tree,
                                                const weightzoo::FeatureTable& table,
                                                const std::vector<int>& rows) {
    std::vector<std::vector<int>> at(tree.nodes.size());
    for (int r : rows) {
        int i = 0;
        at[0].push_back(r);
        while (tree.nodes[static_cast<size_t>(i)].feature >= 0) {
            const auto& nd = tree.nodes[static_cast<size_t>(i)];
            i = table.rows[static_cast<size_t>(r)][static_cast<size_t>(nd.feature)] <= nd.threshold
                    ? nd.left
                    : nd.right;
            at[static_cast<size_t>(i)].push_back(r);
        }
    }
    return at;
}

}  // namespace oracles
