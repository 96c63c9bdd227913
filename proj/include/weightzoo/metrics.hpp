#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "weightzoo/estimators.hpp"
#include "weightzoo/features.hpp"
#include "weightzoo/zoo.hpp"

namespace weightzoo {

/// 1 - MSE(pred) / MSE(best constant = mean of truth). Undefined (throws)
/// when the truth is constant.
double r2_score(std::span<const double> truth, std::span<const double> pred);

/// Kendall's tau-b (tie-corrected), computed by merge-sort inversion
/// counting in O(n log n). Throws when either side is entirely tied.
double kendall_tau(std::span<const double> a, std::span<const double> b);

inline constexpr int kReportVersion = 1;

struct EvalReport {
    double mse = 0.0, mad = 0.0, r2 = 0.0, kendall = 0.0;
    int n = 0;
    std::vector<std::array<double, 2>> scatter;  // (true, predicted)
    json provenance;

    json to_json() const;
};

EvalReport evaluate(const EstimatorModel& model, const FeatureTable& table,
                    const json& provenance = json::object());

void write_eval_report(const std::string& path, const EvalReport& report, const json& run_config);
/// Two-column CSV `true,predicted` for external plotting.
void write_scatter_csv(const std::string& path, const EvalReport& report);

/// tau[i][j] = rank correlation of model i's predictions on table j against
/// table j's targets. All models must share one feature kind; tables whose
/// feature names diverge from a model reject in predict.
std::vector<std::vector<double>> transfer_matrix(const std::vector<EstimatorModel>& models,
                                                 const std::vector<FeatureTable>& tables);

enum class ProbeKind { global_permute, permute_all_layers, permute_conv_layers, permute_final_layer, scale };

struct ProbeModification {
    ProbeKind kind = ProbeKind::scale;
    bool mix_bias_weights = false;  // permutations: pool kernels and biases
    double factor = 1.0;            // scale only
    uint64_t seed = 0;

    std::string label() const;
    /// e.g. "scale:0.001", "permute_conv_layers", "permute_all_layers:mix",
    /// "global_permute".
    static ProbeModification parse(const std::string& s);
};

/// Scale multiplies every parameter; permutation kinds shuffle values within
/// their scope, pooling kernels with biases only when mix_bias_weights is
/// set. The result has the same shape, and permutations preserve the value
/// multiset exactly.
ParameterSet apply_modification(const NetworkSpec& spec, const ParameterSet& params,
                                const ProbeModification& mod);

struct ProbeResult {
    std::string label;
    double mad = 0.0;
};

/// For each modification, mean |F(phi(W)) - F(W)| over a seeded sample of
/// checkpoints from the split. The model must be trained on flat_all
/// features.
std::vector<ProbeResult> invariance_probe(const EstimatorModel& model, const std::string& zoo_dir,
                                          const ZooCollection& split,
                                          const std::vector<ProbeModification>& mods,
                                          int sample_count, uint64_t seed);

}  // namespace weightzoo
