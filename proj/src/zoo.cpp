#include "weightzoo/zoo.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace weightzoo {

namespace fs = std::filesystem;

json HyperParams::to_json() const {
    return json{{"optimizer", to_string(optimizer)},
                {"learning_rate", learning_rate},
                {"l2_coeff", l2_coeff},
                {"dropout_rate", dropout_rate},
                {"init_variance", init_variance},
                {"init_type", to_string(init_type)},
                {"activation", to_string(activation)},
                {"train_fraction", train_fraction},
                {"seed", seed}};
}

HyperParams HyperParams::from_json(const json& j) {
    HyperParams hp;
    hp.optimizer = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    hp.learning_rate = j.at("learning_rate").get<double>();
    hp.l2_coeff = j.at("l2_coeff").get<double>();
    hp.dropout_rate = j.at("dropout_rate").get<double>();
    hp.init_variance = j.at("init_variance").get<double>();
    hp.init_type = parse_init_kind(j.at("init_type").get<std::string>());
    hp.activation = parse_activation(j.at("activation").get<std::string>());
    hp.train_fraction = j.at("train_fraction").get<double>();
    hp.seed = j.at("seed").get<uint64_t>();
    return hp;
}

std::string HyperParams::sweep_key() const {
    json j = to_json();
    j.erase("seed");
    return j.dump();
}

HyperParams sample_hyperparams(uint64_t sweep_seed, uint64_t k) {
    Rng rng(derive_seed(sweep_seed, "hp", k));
    HyperParams hp;
    const OptimizerKind opts[] = {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::rmsprop};
    hp.optimizer = opts[rng.below(3)];
    hp.learning_rate = std::clamp(rng.log_uniform(kLearningRateLo, kLearningRateHi),
                                  kLearningRateLo, kLearningRateHi);
    hp.l2_coeff = std::clamp(rng.log_uniform(kL2Lo, kL2Hi), kL2Lo, kL2Hi);
    hp.dropout_rate = rng.uniform(0.0, kDropoutHi);
    hp.init_variance = std::clamp(rng.log_uniform(kInitVarianceLo, kInitVarianceHi),
                                  kInitVarianceLo, kInitVarianceHi);
    const InitKind inits[] = {InitKind::xavier_normal, InitKind::he_normal, InitKind::orthogonal,
                              InitKind::normal, InitKind::truncated_normal};
    hp.init_type = inits[rng.below(5)];
    hp.activation = rng.below(2) == 0 ? Activation::relu : Activation::tanh;
    hp.train_fraction = kTrainFractions[rng.below(4)];
    hp.seed = derive_seed(sweep_seed, "model_seed", k);
    assert_in_sweep(hp);
    return hp;
}

void assert_in_sweep(const HyperParams& hp) {
    auto fail = [](const std::string& what) {
        throw Error("internal", "sampled hyperparameter outside sweep range: " + what);
    };
    if (hp.learning_rate < kLearningRateLo || hp.learning_rate > kLearningRateHi)
        fail("learning_rate=" + format_g9(hp.learning_rate));
    if (hp.l2_coeff < kL2Lo || hp.l2_coeff > kL2Hi) fail("l2_coeff=" + format_g9(hp.l2_coeff));
    if (hp.dropout_rate < 0.0 || hp.dropout_rate > kDropoutHi)
        fail("dropout_rate=" + format_g9(hp.dropout_rate));
    if (hp.init_variance < kInitVarianceLo || hp.init_variance > kInitVarianceHi)
        fail("init_variance=" + format_g9(hp.init_variance));
    bool frac_ok = false;
    for (double f : kTrainFractions) frac_ok = frac_ok || f == hp.train_fraction;
    if (!frac_ok) fail("train_fraction=" + format_g9(hp.train_fraction));
}

std::string to_string(RecordStatus s) {
    return s == RecordStatus::ok ? "ok" : "discarded_instability";
}

RecordStatus parse_record_status(const std::string& s) {
    if (s == "ok") return RecordStatus::ok;
    if (s == "discarded_instability") return RecordStatus::discarded_instability;
    throw ParseError("unknown record status: " + s);
}

namespace {

json metric_or_null(double v) {
    if (std::isfinite(v)) return json(v);
    return json(nullptr);
}

double metric_from(const json& j) {
    if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
    return j.get<double>();
}

}  // namespace

json ZooRecord::to_json() const {
    return json{{"model_id", model_id},
                {"checkpoint_path", checkpoint_path},
                {"hyperparams", hyperparams.to_json()},
                {"train_accuracy", metric_or_null(train_accuracy)},
                {"test_accuracy", metric_or_null(test_accuracy)},
                {"train_loss", metric_or_null(train_loss)},
                {"test_loss", metric_or_null(test_loss)},
                {"epochs_run", epochs_run},
                {"status", to_string(status)}};
}

ZooRecord ZooRecord::from_json(const json& j) {
    ZooRecord r;
    r.model_id = j.at("model_id").get<std::string>();
    r.checkpoint_path = j.at("checkpoint_path").get<std::string>();
    r.hyperparams = HyperParams::from_json(j.at("hyperparams"));
    r.train_accuracy = metric_from(j.at("train_accuracy"));
    r.test_accuracy = metric_from(j.at("test_accuracy"));
    r.train_loss = metric_from(j.at("train_loss"));
    r.test_loss = metric_from(j.at("test_loss"));
    r.epochs_run = j.at("epochs_run").get<int>();
    r.status = parse_record_status(j.at("status").get<std::string>());
    return r;
}

std::vector<ZooRecord> ZooCollection::ok_records() const {
    std::vector<ZooRecord> out;
    for (const auto& r : records)
        if (r.status == RecordStatus::ok) out.push_back(r);
    return out;
}

json network_spec_to_json(const NetworkSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers) {
        layers.push_back(json{{"kind", to_string(l.kind)},
                              {"units", l.units},
                              {"kernel_size", l.kernel_size},
                              {"stride", l.stride},
                              {"activation", to_string(l.activation)},
                              {"dropout_rate", l.dropout_rate}});
    }
    return json{{"layers", layers},
                {"input_shape", json{{"height", spec.input_shape.height},
                                     {"width", spec.input_shape.width},
                                     {"channels", spec.input_shape.channels}}},
                {"num_classes", spec.num_classes}};
}

NetworkSpec network_spec_from_json(const json& j) {
    NetworkSpec spec;
    for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
        l.units = lj.at("units").get<int>();
        l.kernel_size = lj.at("kernel_size").get<int>();
        l.stride = lj.at("stride").get<int>();
        l.activation = parse_activation(lj.at("activation").get<std::string>());
        l.dropout_rate = lj.at("dropout_rate").get<double>();
        spec.layers.push_back(l);
    }
    const auto& is = j.at("input_shape");
    spec.input_shape = {is.at("height").get<int>(), is.at("width").get<int>(),
                        is.at("channels").get<int>()};
    spec.num_classes = j.at("num_classes").get<int>();
    return spec;
}

NetworkSpec apply_hyperparams(const NetworkSpec& base, const HyperParams& hp) {
    NetworkSpec spec = base;
    bool has_conv = false;
    for (const auto& l : spec.layers) has_conv = has_conv || l.kind == LayerKind::conv;
    const size_t last = spec.layers.size() - 1;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        auto& l = spec.layers[i];
        if (l.kind == LayerKind::global_avg_pool) continue;
        if (i == last) {
            l.activation = Activation::none;
            l.dropout_rate = 0.0;
            continue;
        }
        l.activation = hp.activation;
        if (l.kind == LayerKind::conv)
            l.dropout_rate = hp.dropout_rate;
        else
            l.dropout_rate = has_conv ? 0.0 : hp.dropout_rate;
    }
    return spec;
}

TrainResult train_one(const NetworkSpec& base, const HyperParams& hp, const Dataset& train,
                      const Dataset& test, const GenConfig& gen) {
    if (gen.epochs < 1) throw ValidationError("epochs must be >= 1");
    if (gen.batch_size < 1) throw ValidationError("batch size must be >= 1");

    const NetworkSpec spec = apply_hyperparams(base, hp);
    const Dataset sub = subsample(train, hp.train_fraction, derive_seed(hp.seed, "subsample"));
    auto params = init_params<float>(spec, hp.init_type, hp.init_variance, derive_seed(hp.seed, "init"));
    Optimizer<float> opt(spec, hp.optimizer, hp.learning_rate);

    const int elems = spec.input_shape.elems();
    std::vector<int> order(static_cast<size_t>(sub.n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(hp.seed, "shuffle"));
    std::vector<float> batch(static_cast<size_t>(gen.batch_size) * elems);
    std::vector<int> labels(static_cast<size_t>(gen.batch_size));

    bool unstable = false;
    int epochs_done = 0;
    uint64_t step = 0;
    for (int e = 0; e < gen.epochs && !unstable; ++e) {
        shuffle_rng.shuffle(order);
        for (int off = 0; off < sub.n && !unstable; off += gen.batch_size) {
            const int bs = std::min(gen.batch_size, sub.n - off);
            for (int b = 0; b < bs; ++b) {
                auto src = sub.image(order[static_cast<size_t>(off + b)]);
                std::copy(src.begin(), src.end(), batch.begin() + static_cast<long>(b) * elems);
                labels[static_cast<size_t>(b)] = sub.labels[static_cast<size_t>(order[static_cast<size_t>(off + b)])];
            }
            auto lg = ce_loss_and_grads<float>(
                spec, params, std::span<const float>(batch.data(), static_cast<size_t>(bs) * elems),
                bs, std::span<const int>(labels.data(), static_cast<size_t>(bs)), hp.l2_coeff,
                derive_seed(hp.seed, "step", step));
            if (!std::isfinite(lg.loss) || !lg.grads.all_finite()) {
                unstable = true;
                break;
            }
            opt.step(params, lg.grads);
            if (!params.all_finite()) {
                unstable = true;
                break;
            }
            ++step;
        }
        if (!unstable) ++epochs_done;
    }

    TrainResult out;
    out.record.hyperparams = hp;
    out.record.epochs_run = epochs_done;
    if (unstable) {
        out.record.status = RecordStatus::discarded_instability;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        out.record.train_accuracy = out.record.test_accuracy = nan;
        out.record.train_loss = out.record.test_loss = nan;
        return out;
    }
    out.record.status = RecordStatus::ok;
    const EvalStats tr = evaluate_on(spec, params, sub.images, sub.labels);
    const EvalStats te = evaluate_on(spec, params, test.images, test.labels);
    out.record.train_accuracy = tr.accuracy;
    out.record.train_loss = tr.mean_cross_entropy;
    out.record.test_accuracy = te.accuracy;
    out.record.test_loss = te.mean_cross_entropy;
    out.params = std::move(params);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const NetworkSpec& applied_spec,
                     const ZooRecord& record, const ParameterSet& params) {
    json layer_order = json::array();
    for (size_t i = 0; i < applied_spec.layers.size(); ++i) {
        layer_order.push_back(json{{"index", i},
                                   {"kind", to_string(applied_spec.layers[i].kind)},
                                   {"kernel_elems", params.layers[i].kernel.size()},
                                   {"bias_elems", params.layers[i].bias.size()}});
    }
    json header{{"format_version", kCheckpointVersion},
                {"architecture", network_spec_to_json(applied_spec)},
                {"hyperparams", record.hyperparams.to_json()},
                {"metrics", json{{"train_accuracy", record.train_accuracy},
                                 {"test_accuracy", record.test_accuracy},
                                 {"train_loss", record.train_loss},
                                 {"test_loss", record.test_loss},
                                 {"epochs_run", record.epochs_run}}},
                {"seed", record.hyperparams.seed},
                {"layer_order", layer_order}};
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write("WZOO", 4);
    const unsigned char ver = static_cast<unsigned char>(kCheckpointVersion);
    out.write(reinterpret_cast<const char*>(&ver), 1);
    const uint32_t len = static_cast<uint32_t>(hs.size());
    unsigned char lb[4] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8),
                           static_cast<unsigned char>(len >> 16), static_cast<unsigned char>(len >> 24)};
    out.write(reinterpret_cast<const char*>(lb), 4);
    out.write(hs.data(), static_cast<long>(hs.size()));
    for (const auto& l : params.layers) {
        out.write(reinterpret_cast<const char*>(l.kernel.data()),
                  static_cast<long>(l.kernel.size() * sizeof(float)));
        out.write(reinterpret_cast<const char*>(l.bias.data()),
                  static_cast<long>(l.bias.size() * sizeof(float)));
    }
    if (!out) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "WZOO")
        throw ParseError("bad checkpoint magic in " + path);
    unsigned char ver = 0;
    if (!in.read(reinterpret_cast<char*>(&ver), 1)) throw ParseError("truncated checkpoint " + path);
    if (ver != kCheckpointVersion)
        throw VersionError("checkpoint " + path + " has format version " + std::to_string(ver) +
                           ", expected " + std::to_string(kCheckpointVersion));
    unsigned char lb[4];
    if (!in.read(reinterpret_cast<char*>(lb), 4)) throw ParseError("truncated checkpoint " + path);
    const uint32_t len = static_cast<uint32_t>(lb[0]) | (static_cast<uint32_t>(lb[1]) << 8) |
                         (static_cast<uint32_t>(lb[2]) << 16) | (static_cast<uint32_t>(lb[3]) << 24);
    std::string hs(len, '\0');
    if (!in.read(hs.data(), static_cast<long>(len))) throw ParseError("truncated checkpoint " + path);

    Checkpoint ck;
    try {
        ck.header = json::parse(hs);
    } catch (const json::exception& e) {
        throw ParseError("bad checkpoint header in " + path + ": " + e.what());
    }
    ck.spec = network_spec_from_json(ck.header.at("architecture"));
    ck.hyperparams = HyperParams::from_json(ck.header.at("hyperparams"));
    ck.params = zeros_like<float>(ck.spec);
    for (auto& l : ck.params.layers) {
        if (!in.read(reinterpret_cast<char*>(l.kernel.data()),
                     static_cast<long>(l.kernel.size() * sizeof(float))))
            throw ParseError("truncated checkpoint payload in " + path);
        if (!in.read(reinterpret_cast<char*>(l.bias.data()),
                     static_cast<long>(l.bias.size() * sizeof(float))))
            throw ParseError("truncated checkpoint payload in " + path);
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Zoo directory
// ---------------------------------------------------------------------------

std::string model_id_for(int k) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "m%06d", k);
    return std::string(buf);
}

namespace {

void write_manifest(const std::string& dir, const std::vector<ZooRecord>& records) {
    std::ofstream out(dir + "/manifest.jsonl", std::ios::binary);
    if (!out) throw IoError("cannot write manifest in " + dir);
    for (const auto& r : records) out << r.to_json().dump() << "\n";
    if (!out) throw IoError("failed writing manifest in " + dir);
}

std::vector<ZooRecord> read_manifest(const std::string& dir) {
    std::ifstream in(dir + "/manifest.jsonl", std::ios::binary);
    if (!in) throw IoError("cannot open manifest in " + dir);
    std::vector<ZooRecord> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(ZooRecord::from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

}  // namespace

ZooCollection build_zoo(const NetworkSpec& base, const Dataset& train, const Dataset& test,
                        int count, uint64_t sweep_seed, int epochs, int batch_size,
                        const std::string& out_dir, int threads, const json& run_config) {
    if (count < 1) throw ValidationError("zoo count must be >= 1");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "checkpoints", ec);
    if (ec) throw IoError("cannot create zoo directory " + out_dir + ": " + ec.message());

    std::map<std::string, ZooRecord> existing;
    if (fs::exists(fs::path(out_dir) / "manifest.jsonl")) {
        // resuming: the directory must have been generated with the same
        // settings, otherwise reused records would be stale
        if (fs::exists(fs::path(out_dir) / "zoo.json")) {
            std::ifstream mf(out_dir + "/zoo.json", std::ios::binary);
            json meta;
            try {
                mf >> meta;
            } catch (const json::exception& e) {
                throw ParseError("bad zoo.json in " + out_dir + ": " + e.what());
            }
            const auto& g = meta.at("generation");
            if (meta.at("dataset").get<std::string>() != train.name ||
                g.at("sweep_seed").get<uint64_t>() != sweep_seed ||
                g.at("epochs").get<int>() != epochs || g.at("batch_size").get<int>() != batch_size)
                throw ValidationError("zoo directory " + out_dir +
                                      " was generated with different settings; refusing to resume");
        }
        for (auto& r : read_manifest(out_dir)) existing.emplace(r.model_id, std::move(r));
    }

    ZooCollection zoo;
    zoo.dataset_name = train.name;
    zoo.architecture = base;
    zoo.gen = GenConfig{epochs, batch_size, sweep_seed, count};
    zoo.records.resize(static_cast<size_t>(count));

    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&]() {
        try {
            for (;;) {
                const int k = next.fetch_add(1);
                if (k >= count) return;
                const std::string id = model_id_for(k);
                if (auto it = existing.find(id); it != existing.end()) {
                    zoo.records[static_cast<size_t>(k)] = it->second;
                    continue;
                }
                const HyperParams hp = sample_hyperparams(sweep_seed, static_cast<uint64_t>(k));
                TrainResult res = train_one(base, hp, train, test, zoo.gen);
                res.record.model_id = id;
                if (res.record.status == RecordStatus::ok) {
                    res.record.checkpoint_path = "checkpoints/" + id + ".ckpt";
                    save_checkpoint(out_dir + "/" + res.record.checkpoint_path,
                                    apply_hyperparams(base, hp), res.record, res.params);
                }
                zoo.records[static_cast<size_t>(k)] = std::move(res.record);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            next.store(count);
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

    // records are already in model_id order (ids are zero-padded indices)
    validate_zoo(zoo);
    write_manifest(out_dir, zoo.records);
    json meta{{"format_version", kManifestVersion},
              {"dataset", zoo.dataset_name},
              {"architecture", network_spec_to_json(base)},
              {"generation", json{{"epochs", epochs},
                                  {"batch_size", batch_size},
                                  {"sweep_seed", sweep_seed},
                                  {"count", count}}},
              {"run_config", run_config}};
    std::ofstream mf(out_dir + "/zoo.json", std::ios::binary);
    if (!mf) throw IoError("cannot write zoo.json in " + out_dir);
    mf << meta.dump(2) << "\n";
    return zoo;
}

ZooCollection load_zoo(const std::string& dir) {
    std::ifstream mf(dir + "/zoo.json", std::ios::binary);
    if (!mf) throw IoError("cannot open zoo.json in " + dir);
    json meta;
    try {
        mf >> meta;
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad zoo.json: ") + e.what());
    }
    const int ver = meta.at("format_version").get<int>();
    if (ver != kManifestVersion)
        throw VersionError("zoo " + dir + " has format version " + std::to_string(ver) +
                           ", expected " + std::to_string(kManifestVersion));
    ZooCollection zoo;
    zoo.dataset_name = meta.at("dataset").get<std::string>();
    zoo.architecture = network_spec_from_json(meta.at("architecture"));
    const auto& g = meta.at("generation");
    zoo.gen = GenConfig{g.at("epochs").get<int>(), g.at("batch_size").get<int>(),
                        g.at("sweep_seed").get<uint64_t>(), g.at("count").get<int>()};
    zoo.records = read_manifest(dir);
    validate_zoo(zoo);
    return zoo;
}

void validate_zoo(const ZooCollection& zoo) {
    std::set<std::string> ids;
    std::map<std::string, std::string> sweep_keys;  // sweep_key -> model_id
    for (const auto& r : zoo.records) {
        if (!ids.insert(r.model_id).second)
            throw ValidationError("duplicate model_id " + r.model_id);
        auto [it, inserted] = sweep_keys.emplace(r.hyperparams.sweep_key(), r.model_id);
        if (!inserted)
            throw ValidationError("leakage guard: records " + it->second + " and " + r.model_id +
                                  " share all hyperparameters except the seed");
        if (r.status == RecordStatus::ok) {
            const double ms[] = {r.train_accuracy, r.test_accuracy, r.train_loss, r.test_loss};
            for (double m : ms)
                if (!std::isfinite(m))
                    throw ValidationError("record " + r.model_id + " is ok but has non-finite metrics");
            if (r.train_accuracy < 0.0 || r.train_accuracy > 1.0 || r.test_accuracy < 0.0 ||
                r.test_accuracy > 1.0)
                throw ValidationError("record " + r.model_id + " has accuracy outside [0, 1]");
        }
    }
}

std::pair<ZooCollection, ZooCollection> split_zoo(const ZooCollection& zoo, int train_count,
                                                  uint64_t split_seed) {
    auto ok = zoo.ok_records();
    if (train_count < 1 || train_count >= static_cast<int>(ok.size()))
        throw ValidationError("split: train_count " + std::to_string(train_count) +
                              " must be in [1, " + std::to_string(ok.size()) + ")");
    std::vector<int> idx(ok.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(split_seed, "split"));
    rng.shuffle(idx);

    std::vector<int> tr(idx.begin(), idx.begin() + train_count);
    std::vector<int> te(idx.begin() + train_count, idx.end());
    std::sort(tr.begin(), tr.end());
    std::sort(te.begin(), te.end());

    ZooCollection a = zoo, b = zoo;
    a.records.clear();
    b.records.clear();
    for (int i : tr) a.records.push_back(ok[static_cast<size_t>(i)]);
    for (int i : te) b.records.push_back(ok[static_cast<size_t>(i)]);
    return {std::move(a), std::move(b)};
}

}  // namespace weightzoo
