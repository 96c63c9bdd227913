#include "weightzoo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace weightzoo {

double r2_score(std::span<const double> truth, std::span<const double> pred) {
    if (truth.empty() || truth.size() != pred.size())
        throw ValidationError("r2_score: inputs must have equal non-zero length");
    double mean = 0.0;
    for (double t : truth) mean += t;
    mean /= static_cast<double>(truth.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) {
        ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
    }
    if (ss_tot == 0.0)
        throw ValidationError("r2_score undefined: all true values are identical");
    return 1.0 - ss_res / ss_tot;
}

namespace {

/// Strict inversions (v[i] > v[j] for i < j) counted by merge sort.
long long count_inversions(std::vector<double>& v, std::vector<double>& tmp, size_t lo, size_t hi) {
    if (hi - lo < 2) return 0;
    const size_t mid = lo + (hi - lo) / 2;
    long long inv = count_inversions(v, tmp, lo, mid) + count_inversions(v, tmp, mid, hi);
    size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[i] <= v[j])
            tmp[k++] = v[i++];
        else {
            inv += static_cast<long long>(mid - i);
            tmp[k++] = v[j++];
        }
    }
    while (i < mid) tmp[k++] = v[i++];
    while (j < hi) tmp[k++] = v[j++];
    std::copy(tmp.begin() + static_cast<long>(lo), tmp.begin() + static_cast<long>(hi),
              v.begin() + static_cast<long>(lo));
    return inv;
}

long long tie_pairs(std::span<const double> sorted) {
    long long total = 0;
    size_t i = 0;
    while (i < sorted.size()) {
        size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const long long t = static_cast<long long>(j - i);
        total += t * (t - 1) / 2;
        i = j;
    }
    return total;
}

}  // namespace

double kendall_tau(std::span<const double> a, std::span<const double> b) {
    const size_t n = a.size();
    if (n < 2 || b.size() != n)
        throw ValidationError("kendall_tau: inputs must have equal length >= 2");

    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) {
        if (a[i] != a[j]) return a[i] < a[j];
        return b[i] < b[j];
    });

    const long long n0 = static_cast<long long>(n) * (static_cast<long long>(n) - 1) / 2;

    // ties in a, and joint ties, over the (a, b)-sorted order
    long long n1 = 0, n3 = 0;
    {
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j < n && a[idx[j]] == a[idx[i]]) ++j;
            const long long t = static_cast<long long>(j - i);
            n1 += t * (t - 1) / 2;
            size_t p = i;
            while (p < j) {
                size_t q = p;
                while (q < j && b[idx[q]] == b[idx[p]]) ++q;
                const long long u = static_cast<long long>(q - p);
                n3 += u * (u - 1) / 2;
                p = q;
            }
            i = j;
        }
    }

    std::vector<double> bs(n);
    for (size_t i = 0; i < n; ++i) bs[i] = b[idx[i]];
    std::vector<double> tmp(n);
    const long long discordant = count_inversions(bs, tmp, 0, n);  // bs ends up sorted
    const long long n2 = tie_pairs(bs);

    if (n0 == n1 || n0 == n2)
        throw ValidationError("kendall_tau undefined: one input is entirely tied");

    const long long concordant = n0 - n1 - n2 + n3 - discordant;
    const double denom = std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
    return static_cast<double>(concordant - discordant) / denom;
}

json EvalReport::to_json() const {
    json scat = json::array();
    for (const auto& p : scatter) scat.push_back(json::array({p[0], p[1]}));
    return json{{"format_version", kReportVersion}, {"kind", "eval_report"},
                {"n", n},           {"mse", mse},
                {"mad", mad},       {"r2", r2},
                {"kendall_tau", kendall},          {"provenance", provenance},
                {"scatter", scat}};
}

EvalReport evaluate(const EstimatorModel& model, const FeatureTable& table, const json& provenance) {
    const auto pred = model.predict_table(table);
    EvalReport rep;
    rep.n = table.n();
    rep.provenance = provenance;
    double mse = 0.0, mad = 0.0;
    for (int i = 0; i < table.n(); ++i) {
        const double t = table.targets[static_cast<size_t>(i)];
        const double p = pred[static_cast<size_t>(i)];
        mse += (t - p) * (t - p);
        mad += std::abs(t - p);
        rep.scatter.push_back({t, p});
    }
    rep.mse = mse / rep.n;
    rep.mad = mad / rep.n;
    rep.r2 = r2_score(table.targets, pred);
    rep.kendall = kendall_tau(pred, table.targets);
    return rep;
}

void write_eval_report(const std::string& path, const EvalReport& report, const json& run_config) {
    json doc = report.to_json();
    doc["run_config"] = run_config;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report " + path);
    out << doc.dump(2) << "\n";
    if (!out) throw IoError("failed writing report " + path);
}

void write_scatter_csv(const std::string& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write scatter " + path);
    out << "true,predicted\n";
    for (const auto& p : report.scatter) out << format_g9(p[0]) << "," << format_g9(p[1]) << "\n";
    if (!out) throw IoError("failed writing scatter " + path);
}

std::vector<std::vector<double>> transfer_matrix(const std::vector<EstimatorModel>& models,
                                                 const std::vector<FeatureTable>& tables) {
    if (models.empty() || tables.empty())
        throw ValidationError("transfer: need at least one model and one table");
    for (const auto& m : models)
        if (m.feature_kind != models[0].feature_kind)
            throw ValidationError("transfer: models use different feature kinds (" +
                                  m.feature_kind + " vs " + models[0].feature_kind + ")");
    std::vector<std::vector<double>> tau(models.size(), std::vector<double>(tables.size(), 0.0));
    for (size_t i = 0; i < models.size(); ++i)
        for (size_t j = 0; j < tables.size(); ++j) {
            const auto pred = models[i].predict_table(tables[j]);
            tau[i][j] = kendall_tau(pred, tables[j].targets);
        }
    return tau;
}

// ---------------------------------------------------------------------------
// Input-modification probes
// ---------------------------------------------------------------------------

std::string ProbeModification::label() const {
    switch (kind) {
        case ProbeKind::scale: return "scale:" + format_g9(factor);
        case ProbeKind::global_permute:
            return mix_bias_weights ? "global_permute:mix" : "global_permute";
        case ProbeKind::permute_all_layers:
            return mix_bias_weights ? "permute_all_layers:mix" : "permute_all_layers";
        case ProbeKind::permute_conv_layers:
            return mix_bias_weights ? "permute_conv_layers:mix" : "permute_conv_layers";
        case ProbeKind::permute_final_layer:
            return mix_bias_weights ? "permute_final_layer:mix" : "permute_final_layer";
    }
    return "?";
}

ProbeModification ProbeModification::parse(const std::string& s) {
    ProbeModification m;
    const auto colon = s.find(':');
    const std::string base = s.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : s.substr(colon + 1);
    if (base == "scale") {
        m.kind = ProbeKind::scale;
        if (arg.empty()) throw ParseError("scale modification needs a factor, e.g. scale:0.001");
        m.factor = std::strtod(arg.c_str(), nullptr);
        if (!(m.factor > 0.0)) throw ParseError("scale factor must be positive: " + s);
        return m;
    }
    if (base == "global_permute") m.kind = ProbeKind::global_permute;
    else if (base == "permute_all_layers") m.kind = ProbeKind::permute_all_layers;
    else if (base == "permute_conv_layers") m.kind = ProbeKind::permute_conv_layers;
    else if (base == "permute_final_layer") m.kind = ProbeKind::permute_final_layer;
    else throw ParseError("unknown modification: " + s);
    if (arg == "mix") m.mix_bias_weights = true;
    else if (!arg.empty()) throw ParseError("bad modification argument: " + s);
    return m;
}

namespace {

/// Shuffles the referenced values in place with one permutation per group.
void shuffle_group(std::vector<float*>& ptrs, Rng& rng) {
    std::vector<float> vals(ptrs.size());
    for (size_t i = 0; i < ptrs.size(); ++i) vals[i] = *ptrs[i];
    rng.shuffle(vals);
    for (size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = vals[i];
}

}  // namespace

ParameterSet apply_modification(const NetworkSpec& spec, const ParameterSet& params,
                                const ProbeModification& mod) {
    ParameterSet out = params;
    if (mod.kind == ProbeKind::scale) {
        if (!(mod.factor > 0.0)) throw ValidationError("scale factor must be positive");
        out.scale(static_cast<float>(mod.factor));
        return out;
    }

    const auto layers = parameterized_layers(spec);
    std::vector<std::vector<float*>> groups;
    auto kernel_of = [&](int li) {
        std::vector<float*> v;
        for (auto& x : out.layers[static_cast<size_t>(li)].kernel) v.push_back(&x);
        return v;
    };
    auto bias_of = [&](int li) {
        std::vector<float*> v;
        for (auto& x : out.layers[static_cast<size_t>(li)].bias) v.push_back(&x);
        return v;
    };
    auto add_layer = [&](int li) {
        auto k = kernel_of(li);
        auto b = bias_of(li);
        if (mod.mix_bias_weights) {
            k.insert(k.end(), b.begin(), b.end());
            groups.push_back(std::move(k));
        } else {
            groups.push_back(std::move(k));
            groups.push_back(std::move(b));
        }
    };

    switch (mod.kind) {
        case ProbeKind::global_permute: {
            std::vector<float*> all_k, all_b;
            for (int li : layers) {
                auto k = kernel_of(li);
                auto b = bias_of(li);
                all_k.insert(all_k.end(), k.begin(), k.end());
                all_b.insert(all_b.end(), b.begin(), b.end());
            }
            if (mod.mix_bias_weights) {
                all_k.insert(all_k.end(), all_b.begin(), all_b.end());
                groups.push_back(std::move(all_k));
            } else {
                groups.push_back(std::move(all_k));
                groups.push_back(std::move(all_b));
            }
            break;
        }
        case ProbeKind::permute_all_layers:
            for (int li : layers) add_layer(li);
            break;
        case ProbeKind::permute_conv_layers:
            for (int li : layers)
                if (spec.layers[static_cast<size_t>(li)].kind == LayerKind::conv) add_layer(li);
            break;
        case ProbeKind::permute_final_layer:
            add_layer(layers.back());
            break;
        case ProbeKind::scale:
            break;  // handled above
    }
    for (size_t g = 0; g < groups.size(); ++g) {
        Rng rng(derive_seed(mod.seed, "group", g));
        shuffle_group(groups[g], rng);
    }
    return out;
}

std::vector<ProbeResult> invariance_probe(const EstimatorModel& model, const std::string& zoo_dir,
                                          const ZooCollection& split,
                                          const std::vector<ProbeModification>& mods,
                                          int sample_count, uint64_t seed) {
    if (model.feature_kind != "flat_all")
        throw ValidationError("invariance probe requires a model trained on flat_all features");
    if (split.records.empty()) throw ValidationError("probe: empty split");
    if (sample_count < 1) throw ValidationError("probe: sample_count must be >= 1");

    std::vector<int> idx(split.records.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, "sample"));
    rng.shuffle(idx);
    idx.resize(std::min<size_t>(idx.size(), static_cast<size_t>(sample_count)));
    std::sort(idx.begin(), idx.end());

    const FeatureKind flat = FeatureKind::parse("flat_all");
    std::vector<double> mad(mods.size(), 0.0);
    for (int i : idx) {
        const auto& rec = split.records[static_cast<size_t>(i)];
        const Checkpoint ck = load_checkpoint(zoo_dir + "/" + rec.checkpoint_path);
        const FeatureVector base = extract(ck.spec, ck.params, flat, &rec.hyperparams);
        const double p0 = model.predict(base.values);
        for (size_t m = 0; m < mods.size(); ++m) {
            ProbeModification pm = mods[m];
            pm.seed = derive_seed(seed, "mod", m * 1000003u + static_cast<uint64_t>(i));
            const ParameterSet altered = apply_modification(ck.spec, ck.params, pm);
            const FeatureVector fv = extract(ck.spec, altered, flat, &rec.hyperparams);
            mad[m] += std::abs(model.predict(fv.values) - p0);
        }
    }
    std::vector<ProbeResult> out;
    for (size_t m = 0; m < mods.size(); ++m)
        out.push_back({mods[m].label(), mad[m] / static_cast<double>(idx.size())});
    return out;
}

}  // namespace weightzoo
