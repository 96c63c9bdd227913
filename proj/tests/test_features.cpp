#include <cmath>
#include <filesystem>
#include <unistd.h>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "weightzoo/features.hpp"

using namespace weightzoo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("wz_feat_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("stat_block basics") {
    SUBCASE("1..5") {
        const double v[] = {5, 3, 1, 2, 4};
        StatBlock b = stat_block(std::span<const double>(v, 5));
        CHECK(b.mean == 3.0);
        CHECK(b.variance == 2.0);  // population variance
        CHECK(b.q0 == 1.0);
        CHECK(b.q25 == 2.0);
        CHECK(b.q50 == 3.0);
        CHECK(b.q75 == 4.0);
        CHECK(b.q100 == 5.0);
    }
    SUBCASE("constant array") {
        const double v[] = {2.5, 2.5, 2.5};
        StatBlock b = stat_block(std::span<const double>(v, 3));
        CHECK(b.mean == 2.5);
        CHECK(b.variance == 0.0);
        CHECK(b.q0 == 2.5);
        CHECK(b.q50 == 2.5);
        CHECK(b.q100 == 2.5);
    }
    SUBCASE("linear interpolation at q25 of [0,10]") {
        // index 0.25*(2-1) = 0.25 -> 0*(0.75) + 10*(0.25) = 2.5
        const double v[] = {0, 10};
        StatBlock b = stat_block(std::span<const double>(v, 2));
        CHECK(b.q25 == 2.5);
        CHECK(b.q50 == 5.0);
        CHECK(b.q75 == 7.5);
    }
    SUBCASE("empty input is an error") {
        CHECK_THROWS_AS(stat_block(std::span<const double>()), ValidationError);
    }
    SUBCASE("permutation invariance and min/max exactness") {
        Rng rng(3);
        std::vector<double> v(101);
        for (auto& x : v) x = rng.normal();
        StatBlock a = stat_block(std::span<const double>(v));
        rng.shuffle(v);
        StatBlock b = stat_block(std::span<const double>(v));
        CHECK(a.mean == b.mean);
        CHECK(a.variance == b.variance);
        CHECK(a.q25 == b.q25);
        CHECK(a.q0 == *std::min_element(v.begin(), v.end()));
        CHECK(a.q100 == *std::max_element(v.begin(), v.end()));
        // two-pass oracle agreement
        double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size());
        CHECK(a.mean == doctest::Approx(mean).epsilon(1e-12));
        CHECK(a.variance == doctest::Approx(var).epsilon(1e-12));
    }
}

TEST_CASE("feature dimensions match the base CNN table") {
    NetworkSpec cnn = make_paper_cnn({16, 16, 1}, 10);
    auto params = init_params<float>(cnn, InitKind::he_normal, 0.1, 1);
    HyperParams hp = sample_hyperparams(0, 0);

    auto dim = [&](const std::string& kind) {
        return extract(cnn, params, FeatureKind::parse(kind), &hp).values.size();
    };
    CHECK(dim("flat_all") == 4970);
    CHECK(dim("flat_layer:4") == 170);
    CHECK(dim("flat_layer:1") == 160);
    CHECK(dim("stats_global") == 7);
    CHECK(dim("stats_per_layer") == 56);
    CHECK(dim("stats_layer_subset:4") == 14);
    CHECK(dim("stats_layer_subset:final") == 14);
    CHECK(dim("stats_layer_subset:1,4") == 28);
    CHECK(dim("norms_l1") == 8);
    CHECK(dim("norms_l2") == 8);
    CHECK(dim("hyperparams") == 7);
    CHECK(dim("hyperparams_lr") == 1);
    CHECK(dim("hyperparams_plus_flat") == 7 + 4970);
    CHECK(dim("bias_range") == 4);

    CHECK_THROWS_AS(dim("flat_layer:5"), ValidationError);
    CHECK_THROWS_AS(dim("stats_layer_subset:9"), ValidationError);
    CHECK_THROWS_AS(FeatureKind::parse("nonsense"), ParseError);
}

TEST_CASE("stats_per_layer ordering and names") {
    NetworkSpec cnn = make_paper_cnn({16, 16, 1}, 10);
    auto params = init_params<float>(cnn, InitKind::normal, 0.1, 2);
    FeatureVector fv = extract(cnn, params, FeatureKind::parse("stats_per_layer"));
    REQUIRE(fv.names.size() == 56);
    CHECK(fv.names[0] == "L1.kernel.mean");
    CHECK(fv.names[6] == "L1.kernel.q100");
    CHECK(fv.names[7] == "L1.bias.mean");
    CHECK(fv.names[14] == "L2.kernel.mean");
    CHECK(fv.names[55] == "L4.bias.q100");

    // values agree with directly computed blocks
    StatBlock k1 = stat_block(std::span<const float>(params.layers[0].kernel));
    CHECK(fv.values[0] == k1.mean);
    CHECK(fv.values[1] == k1.variance);
    CHECK(fv.values[2] == k1.q0);

    // global stats use the flattened vector
    FeatureVector g = extract(cnn, params, FeatureKind::parse("stats_global"));
    auto flat = params.flatten();
    StatBlock all = stat_block(std::span<const float>(flat));
    CHECK(g.values[0] == all.mean);
    CHECK(g.names[0] == "all.mean");
}

TEST_CASE("fresh initialization has all-zero bias ranges") {
    NetworkSpec cnn = make_paper_cnn({16, 16, 1}, 10);
    auto params = init_params<float>(cnn, InitKind::xavier_normal, 0.3, 3);
    FeatureVector fv = extract(cnn, params, FeatureKind::parse("bias_range"));
    REQUIRE(fv.values.size() == 4);
    for (double v : fv.values) CHECK(v == 0.0);
    CHECK(fv.names[0] == "L1.bias.range");
}

TEST_CASE("scaling transforms per-layer statistics predictably") {
    NetworkSpec cnn = make_paper_cnn({12, 12, 1}, 10);
    auto params = init_params<float>(cnn, InitKind::normal, 0.2, 4);
    const double c = 3.0;
    auto scaled = params;
    scaled.scale(static_cast<float>(c));
    FeatureVector a = extract(cnn, params, FeatureKind::parse("stats_per_layer"));
    FeatureVector b = extract(cnn, scaled, FeatureKind::parse("stats_per_layer"));
    for (size_t i = 0; i < a.names.size(); ++i) {
        const bool is_var = a.names[i].find(".variance") != std::string::npos;
        const double want = is_var ? a.values[i] * c * c : a.values[i] * c;
        CHECK(b.values[i] == doctest::Approx(want).epsilon(1e-5));
    }
}

TEST_CASE("layer norms") {
    NetworkSpec net = make_mlp({1, 1, 2}, {}, 2);  // single dense layer, kernel has 4 entries
    auto p = zeros_like<float>(net);
    p.layers[0].kernel = {3.0f, -4.0f, 0.0f, 0.0f};
    FeatureVector l2 = layer_norms(net, p, 2);
    CHECK(l2.values[0] == doctest::Approx(5.0));
    CHECK(l2.names[0] == "L1.kernel.l2");
    FeatureVector l1 = layer_norms(net, p, 1);
    CHECK(l1.values[0] == doctest::Approx(7.0));

    // homogeneity: scaling multiplies every norm by c
    NetworkSpec cnn = make_paper_cnn({12, 12, 1}, 10);
    auto params = init_params<float>(cnn, InitKind::he_normal, 0.2, 5);
    auto scaled = params;
    scaled.scale(2.0f);
    for (int p_ord : {1, 2}) {
        FeatureVector a = layer_norms(cnn, params, p_ord);
        FeatureVector b = layer_norms(cnn, scaled, p_ord);
        for (size_t i = 0; i < a.values.size(); ++i)
            CHECK(b.values[i] == doctest::Approx(2.0 * a.values[i]).epsilon(1e-6));
    }
    CHECK_THROWS_AS(layer_norms(cnn, params, 3), ValidationError);
}

TEST_CASE("featurize_zoo and the CSV interface") {
    TempDir tmp;
    SyntheticSpec sspec;
    sspec.num_classes = 3;
    sspec.samples_per_class = 20;
    sspec.image_size = 10;
    sspec.pattern_seed = 6;
    auto [train, test] = gen_synthetic(sspec);
    NetworkSpec base = make_paper_cnn({10, 10, 1}, 3);
    const auto dir = (tmp.path / "zoo").string();
    ZooCollection zoo = build_zoo(base, train, test, 6, 31, 1, 64, dir, 2, json::object());
    ZooCollection ok = zoo;
    ok.records = zoo.ok_records();
    REQUIRE(!ok.records.empty());

    FeatureTable table = featurize_zoo(dir, ok, FeatureKind::parse("stats_per_layer"), 2);
    CHECK(table.n() == static_cast<int>(ok.records.size()));
    CHECK(table.dim() == 56);
    for (int i = 0; i < table.n(); ++i) {
        CHECK(table.model_ids[static_cast<size_t>(i)] == ok.records[static_cast<size_t>(i)].model_id);
        CHECK(table.targets[static_cast<size_t>(i)] == ok.records[static_cast<size_t>(i)].test_accuracy);
    }

    const auto csv = (tmp.path / "f.csv").string();
    write_feature_csv(csv, table, json{{"args", json::array()}});
    FeatureTable back = read_feature_csv(csv);
    CHECK(back.feature_kind == "stats_per_layer");
    CHECK(back.feature_names == table.feature_names);
    CHECK(back.model_ids == table.model_ids);
    CHECK(back.n() == table.n());

    // re-serializing the parsed table writes identical bytes
    const auto csv2 = (tmp.path / "f2.csv").string();
    write_feature_csv(csv2, back, json{{"args", json::array()}});
    CHECK(slurp(csv) == slurp(csv2));

    // header row shape
    std::ifstream in(csv);
    std::string line;
    while (std::getline(in, line) && line[0] == '#') {}
    CHECK(line.rfind("model_id,L1.kernel.mean,", 0) == 0);
    CHECK(line.find(",target") == line.size() - 7);

    // hyperparams kind needs hp (provided), flat kinds parallel-safe
    FeatureTable hp_table = featurize_zoo(dir, ok, FeatureKind::parse("hyperparams"), 1);
    CHECK(hp_table.dim() == 7);

    // corrupt checkpoint reports the model id
    ZooCollection broken = ok;
    {
        std::ofstream bad(fs::path(dir) / broken.records[0].checkpoint_path,
                          std::ios::binary | std::ios::trunc);
        bad << "not a checkpoint";
    }
    CHECK_THROWS_WITH_AS(featurize_zoo(dir, broken, FeatureKind::parse("stats_global"), 1),
                         doctest::Contains(broken.records[0].model_id.c_str()), ParseError);
}

TEST_CASE("hyperparams encoding keeps reals raw and codes categoricals") {
    NetworkSpec cnn = make_paper_cnn({10, 10, 1}, 3);
    auto params = zeros_like<float>(cnn);
    HyperParams hp;
    hp.optimizer = OptimizerKind::rmsprop;
    hp.learning_rate = 0.0123;
    hp.l2_coeff = 1e-5;
    hp.dropout_rate = 0.4;
    hp.init_variance = 0.2;
    hp.init_type = InitKind::truncated_normal;
    hp.activation = Activation::tanh;
    hp.train_fraction = 0.25;
    FeatureVector fv = extract(cnn, params, FeatureKind::parse("hyperparams"), &hp);
    CHECK(fv.values == std::vector<double>{2.0, 0.0123, 1e-5, 0.4, 4.0, 1.0, 0.25});
    CHECK(fv.names[0] == "hp.optimizer");
    CHECK(fv.names[6] == "hp.train_fraction");

    CHECK_THROWS_AS(extract(cnn, params, FeatureKind::parse("hyperparams"), nullptr),
                    ValidationError);
}
