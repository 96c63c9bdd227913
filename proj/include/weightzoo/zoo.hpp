#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "weightzoo/data.hpp"
#include "weightzoo/net.hpp"

namespace weightzoo {

using nlohmann::json;

// Sweep ranges for base-network training configurations.
inline constexpr double kLearningRateLo = 5e-4, kLearningRateHi = 5e-2;
inline constexpr double kL2Lo = 1e-8, kL2Hi = 1e-2;
inline constexpr double kDropoutHi = 0.7;
inline constexpr double kInitVarianceLo = 1e-3, kInitVarianceHi = 0.5;
inline constexpr double kTrainFractions[] = {0.1, 0.25, 0.5, 1.0};

struct HyperParams {
    OptimizerKind optimizer = OptimizerKind::sgd;
    double learning_rate = 1e-3;
    double l2_coeff = 0.0;
    double dropout_rate = 0.0;
    double init_variance = 0.05;
    InitKind init_type = InitKind::normal;
    Activation activation = Activation::relu;
    double train_fraction = 1.0;
    uint64_t seed = 0;

    json to_json() const;
    static HyperParams from_json(const json& j);
    /// All fields except the seed, as a comparable string (leakage guard key).
    std::string sweep_key() const;
};

/// The k-th configuration of the stream seeded by sweep_seed: uniform
/// optimizer/initializer/activation/train-fraction choices, log-uniform
/// learning rate, l2 and init variance, uniform dropout. The per-model seed
/// is derived from (sweep_seed, k). Sampled values are hard-asserted to lie
/// inside the sweep ranges.
HyperParams sample_hyperparams(uint64_t sweep_seed, uint64_t k);

void assert_in_sweep(const HyperParams& hp);

enum class RecordStatus { ok, discarded_instability };
std::string to_string(RecordStatus s);
RecordStatus parse_record_status(const std::string& s);

struct ZooRecord {
    std::string model_id;
    std::string checkpoint_path;  // relative to the zoo directory; empty when discarded
    HyperParams hyperparams;
    double train_accuracy = 0.0, test_accuracy = 0.0;
    double train_loss = 0.0, test_loss = 0.0;
    int epochs_run = 0;
    RecordStatus status = RecordStatus::ok;

    json to_json() const;
    static ZooRecord from_json(const json& j);
};

struct GenConfig {
    int epochs = 10;
    int batch_size = 128;
    uint64_t sweep_seed = 0;
    int count = 0;
};

struct ZooCollection {
    std::string dataset_name;
    NetworkSpec architecture;  // base spec before per-model hyperparameters
    GenConfig gen;
    std::vector<ZooRecord> records;

    std::vector<ZooRecord> ok_records() const;
};

json network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const json& j);

/// Applies a configuration to a base architecture: hidden activations are
/// set from hp, dropout goes on conv layers when the net has any, otherwise
/// on hidden dense layers; the output layer stays activation-free.
NetworkSpec apply_hyperparams(const NetworkSpec& base, const HyperParams& hp);

struct TrainResult {
    ZooRecord record;
    ParameterSet params;  // empty when discarded
};

/// Trains one network for exactly gen.epochs epochs, no early stopping.
/// Any non-finite loss, gradient or parameter aborts the run and flags the
/// record as discarded_instability (data, not an error).
TrainResult train_one(const NetworkSpec& base, const HyperParams& hp, const Dataset& train,
                      const Dataset& test, const GenConfig& gen);

// --- checkpoint file ---
// magic "WZOO", version byte, 4-byte little-endian JSON header length, JSON
// header, then per-layer little-endian float32 arrays, kernel then bias, in
// declared layer order.
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const NetworkSpec& applied_spec,
                     const ZooRecord& record, const ParameterSet& params);

struct Checkpoint {
    NetworkSpec spec;  // hyperparameter-applied architecture
    HyperParams hyperparams;
    ParameterSet params;
    json header;
};

Checkpoint load_checkpoint(const std::string& path);

// --- zoo directory: zoo.json + manifest.jsonl + checkpoints/ ---
inline constexpr int kManifestVersion = 1;

/// Trains `count` sampled configurations and writes checkpoints plus a
/// manifest sorted by model_id. Existing manifest records are kept and their
/// models skipped, so interrupted runs resume. Workers are independent and
/// internally single-threaded; the manifest is identical for any thread
/// count.
ZooCollection build_zoo(const NetworkSpec& base, const Dataset& train, const Dataset& test,
                        int count, uint64_t sweep_seed, int epochs, int batch_size,
                        const std::string& out_dir, int threads, const json& run_config);

ZooCollection load_zoo(const std::string& dir);

/// Leakage guard plus metric sanity: rejects zoos where two records share
/// every hyperparameter except the seed, and ok records with non-finite
/// metrics or accuracies outside [0, 1].
void validate_zoo(const ZooCollection& zoo);

/// Deterministic disjoint partition of the ok records; both halves keep
/// manifest order. train_count must be smaller than the ok count.
std::pair<ZooCollection, ZooCollection> split_zoo(const ZooCollection& zoo, int train_count,
                                                  uint64_t split_seed);

std::string model_id_for(int k);

}  // namespace weightzoo
