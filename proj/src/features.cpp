#include "weightzoo/features.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace weightzoo {

StatBlock stat_block(std::span<const double> values) {
    if (values.empty()) throw ValidationError("stat_block: empty array");
    const size_t n = values.size();
    // accumulate over the sorted copy so the result is exactly
    // permutation-invariant
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (double v : sorted) sum += v;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (double v : sorted) ss += (v - mean) * (v - mean);
    auto pct = [&](double q) {
        const double pos = q / 100.0 * static_cast<double>(n - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    StatBlock b;
    b.mean = mean;
    b.variance = ss / static_cast<double>(n);
    b.q0 = sorted.front();
    b.q25 = pct(25.0);
    b.q50 = pct(50.0);
    b.q75 = pct(75.0);
    b.q100 = sorted.back();
    return b;
}

StatBlock stat_block(std::span<const float> values) {
    std::vector<double> d(values.begin(), values.end());
    return stat_block(std::span<const double>(d));
}

FeatureKind FeatureKind::parse(const std::string& s) {
    FeatureKind k;
    auto colon = s.find(':');
    const std::string base = s.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : s.substr(colon + 1);
    if (base == "flat_all") k.base = Base::flat_all;
    else if (base == "flat_layer") k.base = Base::flat_layer;
    else if (base == "stats_global") k.base = Base::stats_global;
    else if (base == "stats_per_layer") k.base = Base::stats_per_layer;
    else if (base == "stats_layer_subset") k.base = Base::stats_layer_subset;
    else if (base == "norms_l1") k.base = Base::norms_l1;
    else if (base == "norms_l2") k.base = Base::norms_l2;
    else if (base == "hyperparams") k.base = Base::hyperparams;
    else if (base == "hyperparams_lr") k.base = Base::hyperparams_lr;
    else if (base == "hyperparams_plus_flat") k.base = Base::hyperparams_plus_flat;
    else if (base == "bias_range") k.base = Base::bias_range;
    else throw ParseError("unknown feature kind: " + s);

    if (k.base == Base::flat_layer) {
        if (arg.empty()) throw ParseError("flat_layer needs a layer index, e.g. flat_layer:4");
        k.layer = std::atoi(arg.c_str());
        if (k.layer < 1) throw ParseError("bad layer index in feature kind: " + s);
    } else if (k.base == Base::stats_layer_subset) {
        if (arg == "final") {
            k.final_layer = true;
        } else if (!arg.empty()) {
            std::stringstream ss(arg);
            std::string tok;
            while (std::getline(ss, tok, ',')) {
                const int v = std::atoi(tok.c_str());
                if (v < 1) throw ParseError("bad layer index in feature kind: " + s);
                k.layer_subset.push_back(v);
            }
            std::sort(k.layer_subset.begin(), k.layer_subset.end());
            k.layer_subset.erase(std::unique(k.layer_subset.begin(), k.layer_subset.end()),
                                 k.layer_subset.end());
        } else {
            throw ParseError("stats_layer_subset needs layers, e.g. stats_layer_subset:1,4");
        }
    } else if (!arg.empty()) {
        throw ParseError("feature kind " + base + " takes no argument");
    }
    return k;
}

std::string FeatureKind::str() const {
    switch (base) {
        case Base::flat_all: return "flat_all";
        case Base::flat_layer: return "flat_layer:" + std::to_string(layer);
        case Base::stats_global: return "stats_global";
        case Base::stats_per_layer: return "stats_per_layer";
        case Base::stats_layer_subset: {
            if (final_layer) return "stats_layer_subset:final";
            std::string s = "stats_layer_subset:";
            for (size_t i = 0; i < layer_subset.size(); ++i)
                s += (i ? "," : "") + std::to_string(layer_subset[i]);
            return s;
        }
        case Base::norms_l1: return "norms_l1";
        case Base::norms_l2: return "norms_l2";
        case Base::hyperparams: return "hyperparams";
        case Base::hyperparams_lr: return "hyperparams_lr";
        case Base::hyperparams_plus_flat: return "hyperparams_plus_flat";
        case Base::bias_range: return "bias_range";
    }
    return "?";
}

namespace {

void append_stats(FeatureVector& fv, const std::string& prefix, std::span<const float> values) {
    const StatBlock b = stat_block(values);
    const char* names[] = {"mean", "variance", "q0", "q25", "q50", "q75", "q100"};
    const double vals[] = {b.mean, b.variance, b.q0, b.q25, b.q50, b.q75, b.q100};
    for (int i = 0; i < 7; ++i) {
        fv.names.push_back(prefix + "." + names[i]);
        fv.values.push_back(vals[i]);
    }
}

void append_flat(FeatureVector& fv, const std::string& prefix, std::span<const float> values) {
    for (size_t i = 0; i < values.size(); ++i) {
        fv.names.push_back(prefix + "." + std::to_string(i));
        fv.values.push_back(static_cast<double>(values[i]));
    }
}

int optimizer_code(OptimizerKind k) { return static_cast<int>(k); }
int init_code(InitKind k) { return static_cast<int>(k); }
int activation_code(Activation a) { return static_cast<int>(a); }

void append_hyperparams(FeatureVector& fv, const HyperParams& hp) {
    fv.names.insert(fv.names.end(),
                    {"hp.optimizer", "hp.learning_rate", "hp.l2_coeff", "hp.dropout_rate",
                     "hp.init_type", "hp.activation", "hp.train_fraction"});
    fv.values.insert(fv.values.end(),
                     {static_cast<double>(optimizer_code(hp.optimizer)), hp.learning_rate,
                      hp.l2_coeff, hp.dropout_rate, static_cast<double>(init_code(hp.init_type)),
                      static_cast<double>(activation_code(hp.activation)), hp.train_fraction});
}

}  // namespace

FeatureVector extract(const NetworkSpec& spec, const ParameterSet& params, const FeatureKind& kind,
                      const HyperParams* hp) {
    using Base = FeatureKind::Base;
    if (kind.needs_hyperparams() && hp == nullptr)
        throw ValidationError("feature kind " + kind.str() + " requires hyperparameters");
    const auto layers = parameterized_layers(spec);
    const int L = static_cast<int>(layers.size());
    auto layer_name = [](int one_based) { return "L" + std::to_string(one_based); };
    auto check_layer = [&](int one_based) {
        if (one_based < 1 || one_based > L)
            throw ValidationError("layer " + std::to_string(one_based) +
                                  " absent from architecture with " + std::to_string(L) +
                                  " parameterized layers");
    };

    FeatureVector fv;
    switch (kind.base) {
        case Base::flat_all:
            for (int li = 1; li <= L; ++li) {
                const auto& pl = params.layers[static_cast<size_t>(layers[static_cast<size_t>(li - 1)])];
                append_flat(fv, layer_name(li) + ".kernel", pl.kernel);
                append_flat(fv, layer_name(li) + ".bias", pl.bias);
            }
            break;
        case Base::flat_layer: {
            check_layer(kind.layer);
            const auto& pl = params.layers[static_cast<size_t>(layers[static_cast<size_t>(kind.layer - 1)])];
            append_flat(fv, layer_name(kind.layer) + ".kernel", pl.kernel);
            append_flat(fv, layer_name(kind.layer) + ".bias", pl.bias);
            break;
        }
        case Base::stats_global: {
            std::vector<float> flat;
            for (int li : layers) {
                const auto& pl = params.layers[static_cast<size_t>(li)];
                flat.insert(flat.end(), pl.kernel.begin(), pl.kernel.end());
                flat.insert(flat.end(), pl.bias.begin(), pl.bias.end());
            }
            append_stats(fv, "all", flat);
            break;
        }
        case Base::stats_per_layer:
            for (int li = 1; li <= L; ++li) {
                const auto& pl = params.layers[static_cast<size_t>(layers[static_cast<size_t>(li - 1)])];
                append_stats(fv, layer_name(li) + ".kernel", pl.kernel);
                append_stats(fv, layer_name(li) + ".bias", pl.bias);
            }
            break;
        case Base::stats_layer_subset: {
            if (kind.final_layer) {
                const auto& pl = params.layers[static_cast<size_t>(layers.back())];
                append_stats(fv, "final.kernel", pl.kernel);
                append_stats(fv, "final.bias", pl.bias);
            } else {
                for (int li : kind.layer_subset) {
                    check_layer(li);
                    const auto& pl = params.layers[static_cast<size_t>(layers[static_cast<size_t>(li - 1)])];
                    append_stats(fv, layer_name(li) + ".kernel", pl.kernel);
                    append_stats(fv, layer_name(li) + ".bias", pl.bias);
                }
            }
            break;
        }
        case Base::norms_l1:
            return layer_norms(spec, params, 1);
        case Base::norms_l2:
            return layer_norms(spec, params, 2);
        case Base::hyperparams:
            append_hyperparams(fv, *hp);
            break;
        case Base::hyperparams_lr:
            fv.names.push_back("hp.learning_rate");
            fv.values.push_back(hp->learning_rate);
            break;
        case Base::hyperparams_plus_flat: {
            append_hyperparams(fv, *hp);
            for (int li = 1; li <= L; ++li) {
                const auto& pl = params.layers[static_cast<size_t>(layers[static_cast<size_t>(li - 1)])];
                append_flat(fv, layer_name(li) + ".kernel", pl.kernel);
                append_flat(fv, layer_name(li) + ".bias", pl.bias);
            }
            break;
        }
        case Base::bias_range:
            for (int li = 1; li <= L; ++li) {
                const auto& pl = params.layers[static_cast<size_t>(layers[static_cast<size_t>(li - 1)])];
                const auto [mn, mx] = std::minmax_element(pl.bias.begin(), pl.bias.end());
                fv.names.push_back(layer_name(li) + ".bias.range");
                fv.values.push_back(static_cast<double>(*mx) - static_cast<double>(*mn));
            }
            break;
    }
    return fv;
}

FeatureVector layer_norms(const NetworkSpec& spec, const ParameterSet& params, int p) {
    if (p != 1 && p != 2) throw ValidationError("layer_norms: p must be 1 or 2");
    const auto layers = parameterized_layers(spec);
    auto norm = [&](std::span<const float> v) {
        double s = 0.0;
        if (p == 1)
            for (float x : v) s += std::abs(static_cast<double>(x));
        else {
            for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
            s = std::sqrt(s);
        }
        return s;
    };
    const std::string suffix = p == 1 ? ".l1" : ".l2";
    FeatureVector fv;
    for (size_t li = 0; li < layers.size(); ++li) {
        const auto& pl = params.layers[static_cast<size_t>(layers[li])];
        fv.names.push_back("L" + std::to_string(li + 1) + ".kernel" + suffix);
        fv.values.push_back(norm(pl.kernel));
        fv.names.push_back("L" + std::to_string(li + 1) + ".bias" + suffix);
        fv.values.push_back(norm(pl.bias));
    }
    return fv;
}

FeatureTable FeatureTable::select_rows(const std::vector<int>& idx) const {
    FeatureTable out;
    out.feature_kind = feature_kind;
    out.feature_names = feature_names;
    out.meta = meta;
    for (int i : idx) {
        out.model_ids.push_back(model_ids[static_cast<size_t>(i)]);
        out.rows.push_back(rows[static_cast<size_t>(i)]);
        out.targets.push_back(targets[static_cast<size_t>(i)]);
    }
    return out;
}

FeatureTable featurize_zoo(const std::string& zoo_dir, const ZooCollection& split,
                           const FeatureKind& kind, int threads) {
    if (split.records.empty()) throw ValidationError("featurize: empty split");
    for (const auto& r : split.records)
        if (r.status != RecordStatus::ok)
            throw ValidationError("featurize: record " + r.model_id + " is not ok-status");

    FeatureTable table;
    table.feature_kind = kind.str();
    const int n = static_cast<int>(split.records.size());
    table.model_ids.resize(static_cast<size_t>(n));
    table.rows.resize(static_cast<size_t>(n));
    table.targets.resize(static_cast<size_t>(n));
    std::vector<std::vector<std::string>> names(static_cast<size_t>(n));

    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&]() {
        try {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                const auto& r = split.records[static_cast<size_t>(i)];
                Checkpoint ck;
                try {
                    ck = load_checkpoint(zoo_dir + "/" + r.checkpoint_path);
                } catch (const ParseError& e) {
                    throw ParseError("model " + r.model_id + ": " + std::string(e.what()));
                } catch (const IoError& e) {
                    throw IoError("model " + r.model_id + ": " + std::string(e.what()));
                } catch (const VersionError& e) {
                    throw VersionError("model " + r.model_id + ": " + std::string(e.what()));
                }
                FeatureVector fv = extract(ck.spec, ck.params, kind, &r.hyperparams);
                table.model_ids[static_cast<size_t>(i)] = r.model_id;
                table.rows[static_cast<size_t>(i)] = std::move(fv.values);
                table.targets[static_cast<size_t>(i)] = r.test_accuracy;
                names[static_cast<size_t>(i)] = std::move(fv.names);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            next.store(n);
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

    table.feature_names = names[0];
    for (int i = 1; i < n; ++i)
        if (names[static_cast<size_t>(i)] != table.feature_names)
            throw ValidationError("featurize: model " + table.model_ids[static_cast<size_t>(i)] +
                                  " produced mismatched feature names (mixed architectures?)");
    table.meta = json{{"feature_kind", table.feature_kind},
                      {"percentile", "linear_interpolation"},
                      {"variance", "population"}};
    return table;
}

void write_feature_csv(const std::string& path, const FeatureTable& table, const json& run_config) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write feature table " + path);
    out << "# weightzoo-features v" << kFeatureTableVersion << "\n";
    out << "# feature_kind: " << table.feature_kind << "\n";
    out << "# percentile: linear_interpolation\n";
    out << "# variance: population\n";
    out << "# run_config: " << run_config.dump() << "\n";
    out << "model_id";
    for (const auto& nm : table.feature_names) out << "," << nm;
    out << ",target\n";
    for (int i = 0; i < table.n(); ++i) {
        out << table.model_ids[static_cast<size_t>(i)];
        for (double v : table.rows[static_cast<size_t>(i)]) out << "," << format_g9(v);
        out << "," << format_g9(table.targets[static_cast<size_t>(i)]) << "\n";
    }
    if (!out) throw IoError("failed writing feature table " + path);
}

FeatureTable read_feature_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open feature table " + path);
    FeatureTable table;
    std::string line;
    bool header_done = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto colon = line.find(": ");
            if (line.rfind("# weightzoo-features", 0) == 0) {
                const auto vpos = line.find(" v");
                const int ver = vpos == std::string::npos ? -1 : std::atoi(line.c_str() + vpos + 2);
                if (ver != kFeatureTableVersion)
                    throw VersionError("feature table " + path + " has version " +
                                       std::to_string(ver) + ", expected " +
                                       std::to_string(kFeatureTableVersion));
            } else if (colon != std::string::npos) {
                const std::string key = line.substr(2, colon - 2);
                const std::string val = line.substr(colon + 2);
                if (key == "feature_kind") table.feature_kind = val;
                table.meta[key] = val;
            }
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!header_done) {
            if (cells.size() < 2 || cells.front() != "model_id" || cells.back() != "target")
                throw ParseError("feature table " + path + ": bad header row");
            table.feature_names.assign(cells.begin() + 1, cells.end() - 1);
            header_done = true;
            continue;
        }
        if (cells.size() != table.feature_names.size() + 2)
            throw ParseError("feature table " + path + " line " + std::to_string(lineno) +
                             ": wrong column count");
        table.model_ids.push_back(cells.front());
        std::vector<double> row(table.feature_names.size());
        for (size_t i = 0; i < row.size(); ++i) {
            char* end = nullptr;
            row[i] = std::strtod(cells[i + 1].c_str(), &end);
            if (end == cells[i + 1].c_str() || !std::isfinite(row[i]))
                throw ParseError("feature table " + path + " line " + std::to_string(lineno) +
                                 ": bad value '" + cells[i + 1] + "'");
        }
        table.rows.push_back(std::move(row));
        char* end = nullptr;
        const double target = std::strtod(cells.back().c_str(), &end);
        if (end == cells.back().c_str())
            throw ParseError("feature table " + path + " line " + std::to_string(lineno) +
                             ": bad target");
        table.targets.push_back(target);
    }
    if (!header_done) throw ParseError("feature table " + path + " has no header row");
    if (table.feature_kind.empty()) throw ParseError("feature table " + path + " lacks feature_kind");
    return table;
}

}  // namespace weightzoo
