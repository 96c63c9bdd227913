#include "weightzoo/net.hpp"

namespace weightzoo {

std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::dense: return "dense";
        case LayerKind::global_avg_pool: return "global_avg_pool";
    }
    return "?";
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::none: return "none";
    }
    return "?";
}

std::string to_string(InitKind k) {
    switch (k) {
        case InitKind::xavier_normal: return "xavier_normal";
        case InitKind::he_normal: return "he_normal";
        case InitKind::orthogonal: return "orthogonal";
        case InitKind::normal: return "normal";
        case InitKind::truncated_normal: return "truncated_normal";
    }
    return "?";
}

std::string to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::adam: return "adam";
        case OptimizerKind::rmsprop: return "rmsprop";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string& s) {
    if (s == "conv") return LayerKind::conv;
    if (s == "dense") return LayerKind::dense;
    if (s == "global_avg_pool") return LayerKind::global_avg_pool;
    throw ParseError("unknown layer kind: " + s);
}

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "none") return Activation::none;
    throw ParseError("unknown activation: " + s);
}

InitKind parse_init_kind(const std::string& s) {
    if (s == "xavier_normal") return InitKind::xavier_normal;
    if (s == "he_normal") return InitKind::he_normal;
    if (s == "orthogonal") return InitKind::orthogonal;
    if (s == "normal") return InitKind::normal;
    if (s == "truncated_normal") return InitKind::truncated_normal;
    throw ParseError("unknown initializer: " + s);
}

OptimizerKind parse_optimizer_kind(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    if (s == "rmsprop") return OptimizerKind::rmsprop;
    throw ParseError("unknown optimizer: " + s);
}

NetworkSpec make_paper_cnn(Shape3 input, int num_classes, Activation act, double dropout) {
    NetworkSpec s;
    s.input_shape = input;
    s.num_classes = num_classes;
    for (int i = 0; i < 3; ++i)
        s.layers.push_back({LayerKind::conv, 16, 3, 2, act, dropout});
    s.layers.push_back({LayerKind::global_avg_pool, 0, 0, 1, Activation::none, 0.0});
    s.layers.push_back({LayerKind::dense, num_classes, 0, 1, Activation::none, 0.0});
    return s;
}

NetworkSpec make_mlp(Shape3 input, const std::vector<int>& hidden, int num_classes,
                     Activation act, double dropout) {
    NetworkSpec s;
    s.input_shape = input;
    s.num_classes = num_classes;
    for (int u : hidden) s.layers.push_back({LayerKind::dense, u, 0, 1, act, dropout});
    s.layers.push_back({LayerKind::dense, num_classes, 0, 1, Activation::none, 0.0});
    return s;
}

std::vector<LayerDims> infer_layer_dims(const NetworkSpec& spec) {
    if (spec.layers.empty()) throw ValidationError("network has no layers");
    if (spec.num_classes < 1) throw ValidationError("num_classes must be positive");
    if (spec.input_shape.height < 1 || spec.input_shape.width < 1 || spec.input_shape.channels < 1)
        throw ValidationError("input shape must be positive");

    std::vector<LayerDims> dims;
    dims.reserve(spec.layers.size());
    Shape3 cur = spec.input_shape;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const std::string at = "layer " + std::to_string(i + 1);
        LayerDims d;
        d.in = cur;
        switch (l.kind) {
            case LayerKind::conv: {
                if (l.units < 1) throw ValidationError(at + ": conv needs at least one filter");
                if (l.kernel_size < 1) throw ValidationError(at + ": conv kernel size must be positive");
                if (l.stride < 1) throw ValidationError(at + ": conv stride must be positive");
                auto g = detail::conv_geom(cur, l.kernel_size, l.stride);
                d.out = {g.oh, g.ow, l.units};
                d.kernel_elems = static_cast<size_t>(l.kernel_size) * l.kernel_size * cur.channels * l.units;
                d.bias_elems = static_cast<size_t>(l.units);
                d.fan_in = l.kernel_size * l.kernel_size * cur.channels;
                d.fan_out = l.kernel_size * l.kernel_size * l.units;
                break;
            }
            case LayerKind::dense: {
                if (l.units < 1) throw ValidationError(at + ": dense needs at least one unit");
                const int in_dim = cur.elems();
                d.out = {1, 1, l.units};
                d.kernel_elems = static_cast<size_t>(in_dim) * l.units;
                d.bias_elems = static_cast<size_t>(l.units);
                d.fan_in = in_dim;
                d.fan_out = l.units;
                break;
            }
            case LayerKind::global_avg_pool: {
                if (l.dropout_rate != 0.0)
                    throw ValidationError(at + ": dropout applies only to layers with parameters");
                if (l.activation != Activation::none)
                    throw ValidationError(at + ": pooling layer cannot have an activation");
                d.out = {1, 1, cur.channels};
                break;
            }
        }
        if (l.dropout_rate < 0.0 || l.dropout_rate > 0.7)
            throw ValidationError(at + ": dropout rate outside [0, 0.7]");
        dims.push_back(d);
        cur = d.out;
    }
    const auto& last = spec.layers.back();
    if (last.kind != LayerKind::dense || last.units != spec.num_classes)
        throw ValidationError("output layer must be dense with num_classes units");
    if (last.activation != Activation::none)
        throw ValidationError("output layer activation must be none (softmax lives in the loss)");
    if (last.dropout_rate != 0.0)
        throw ValidationError("output layer cannot have dropout");
    return dims;
}

size_t param_count(const NetworkSpec& spec) {
    size_t n = 0;
    for (const auto& d : infer_layer_dims(spec)) n += d.kernel_elems + d.bias_elems;
    return n;
}

std::vector<int> parameterized_layers(const NetworkSpec& spec) {
    std::vector<int> out;
    for (size_t i = 0; i < spec.layers.size(); ++i)
        if (spec.layers[i].kind != LayerKind::global_avg_pool) out.push_back(static_cast<int>(i));
    return out;
}

namespace detail {

void orthonormal_rows(Rng& rng, int k, int len, std::vector<double>& out) {
    out.assign(static_cast<size_t>(k) * len, 0.0);
    for (int r = 0; r < k; ++r) {
        double* row = out.data() + static_cast<size_t>(r) * len;
        for (;;) {
            for (int j = 0; j < len; ++j) row[j] = rng.normal();
            // project out previous rows
            for (int q = 0; q < r; ++q) {
                const double* prev = out.data() + static_cast<size_t>(q) * len;
                double dot = 0.0;
                for (int j = 0; j < len; ++j) dot += row[j] * prev[j];
                for (int j = 0; j < len; ++j) row[j] -= dot * prev[j];
            }
            double norm = 0.0;
            for (int j = 0; j < len; ++j) norm += row[j] * row[j];
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (int j = 0; j < len; ++j) row[j] /= norm;
                break;
            }
        }
    }
}

}  // namespace detail

EvalStats evaluate_on(const NetworkSpec& spec, const ParameterSet& params,
                      std::span<const float> images, std::span<const int> labels) {
    const int n = static_cast<int>(labels.size());
    if (n == 0) throw ValidationError("cannot evaluate on an empty dataset");
    const int K = spec.num_classes;
    const int elems = spec.input_shape.elems();
    const int chunk = 256;
    long correct = 0;
    double ce = 0.0;
    for (int off = 0; off < n; off += chunk) {
        const int bs = std::min(chunk, n - off);
        auto logits = forward<float>(
            spec, params,
            images.subspan(static_cast<size_t>(off) * elems, static_cast<size_t>(bs) * elems), bs);
        for (int b = 0; b < bs; ++b) {
            const float* zb = logits.data() + static_cast<size_t>(b) * K;
            const int y = labels[static_cast<size_t>(off + b)];
            if (argmax_class(zb, K) == y) ++correct;
            float m = zb[0];
            for (int k = 1; k < K; ++k) m = std::max(m, zb[k]);
            double sum = 0.0;
            for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(zb[k] - m));
            ce += static_cast<double>(m) + std::log(sum) - static_cast<double>(zb[y]);
        }
    }
    return {static_cast<double>(correct) / n, ce / n};
}

}  // namespace weightzoo
