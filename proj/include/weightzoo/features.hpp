#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "weightzoo/zoo.hpp"

namespace weightzoo {

/// Population variance (n divisor); percentiles by linear interpolation
/// between order statistics at index q/100*(n-1). q0/q100 are exactly
/// min/max.
struct StatBlock {
    double mean = 0.0, variance = 0.0;
    double q0 = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0, q100 = 0.0;
};

StatBlock stat_block(std::span<const double> values);
StatBlock stat_block(std::span<const float> values);

struct FeatureKind {
    enum class Base {
        flat_all,
        flat_layer,
        stats_global,
        stats_per_layer,
        stats_layer_subset,
        norms_l1,
        norms_l2,
        hyperparams,
        hyperparams_lr,
        hyperparams_plus_flat,
        bias_range,
    };

    Base base = Base::stats_per_layer;
    int layer = 0;                  // flat_layer: 1-based parameterized-layer index
    std::vector<int> layer_subset;  // stats_layer_subset: 1-based, sorted
    bool final_layer = false;       // stats_layer_subset:final (architecture-agnostic)

    /// Accepts e.g. "flat_all", "flat_layer:4", "stats_layer_subset:1,4",
    /// "stats_layer_subset:final", "norms_l1", "hyperparams".
    static FeatureKind parse(const std::string& s);
    std::string str() const;
    bool needs_hyperparams() const {
        return base == Base::hyperparams || base == Base::hyperparams_lr ||
               base == Base::hyperparams_plus_flat;
    }
};

struct FeatureVector {
    std::vector<std::string> names;
    std::vector<double> values;
};

/// Feature extraction from one checkpoint. Layer indices count parameterized
/// layers only (L1..L4 for the base CNN). Categorical hyperparameters map to
/// integer codes; real-valued ones stay raw.
FeatureVector extract(const NetworkSpec& spec, const ParameterSet& params, const FeatureKind& kind,
                      const HyperParams* hp = nullptr);

/// Per-layer norms, kernel then bias per layer: l1 (p=1) or Euclidean (p=2).
FeatureVector layer_norms(const NetworkSpec& spec, const ParameterSet& params, int p);

struct FeatureTable {
    std::string feature_kind;
    std::vector<std::string> feature_names;
    std::vector<std::string> model_ids;
    std::vector<std::vector<double>> rows;
    std::vector<double> targets;  // test accuracies
    json meta;

    int n() const { return static_cast<int>(rows.size()); }
    int dim() const { return static_cast<int>(feature_names.size()); }
    FeatureTable select_rows(const std::vector<int>& idx) const;
};

/// Builds the feature table for a zoo split (ok records only); row order
/// follows the split's manifest order, targets are the recorded test
/// accuracies.
FeatureTable featurize_zoo(const std::string& zoo_dir, const ZooCollection& split,
                           const FeatureKind& kind, int threads = 1);

inline constexpr int kFeatureTableVersion = 1;

/// CSV with `# key: value` header lines followed by
/// `model_id,<feature names...>,target`; reals carry 9 significant digits.
void write_feature_csv(const std::string& path, const FeatureTable& table, const json& run_config);
FeatureTable read_feature_csv(const std::string& path);

}  // namespace weightzoo
