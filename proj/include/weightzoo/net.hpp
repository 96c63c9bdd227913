#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "weightzoo/common.hpp"

namespace weightzoo {

enum class LayerKind { conv, dense, global_avg_pool };
enum class Activation { relu, tanh, none };
enum class InitKind { xavier_normal, he_normal, orthogonal, normal, truncated_normal };
enum class OptimizerKind { sgd, adam, rmsprop };

std::string to_string(LayerKind k);
std::string to_string(Activation a);
std::string to_string(InitKind k);
std::string to_string(OptimizerKind k);
LayerKind parse_layer_kind(const std::string& s);
Activation parse_activation(const std::string& s);
InitKind parse_init_kind(const std::string& s);
OptimizerKind parse_optimizer_kind(const std::string& s);

struct Shape3 {
    int height = 0;
    int width = 0;
    int channels = 0;
    int elems() const { return height * width * channels; }
    bool operator==(const Shape3&) const = default;
};

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    int units = 0;        // conv filters or dense units
    int kernel_size = 0;  // conv only
    int stride = 1;       // conv only
    Activation activation = Activation::none;
    double dropout_rate = 0.0;
};

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    Shape3 input_shape;
    int num_classes = 0;
};

/// The fixed small CNN: 3 conv layers of 16 3x3 filters (stride 2, same
/// padding), global average pooling, dense output. 4970 parameters on
/// 1-channel input with 10 classes, independent of image size.
NetworkSpec make_paper_cnn(Shape3 input, int num_classes, Activation act = Activation::relu,
                           double dropout = 0.0);

/// Fully-connected net: `hidden` dense layers then a dense output layer.
NetworkSpec make_mlp(Shape3 input, const std::vector<int>& hidden, int num_classes,
                     Activation act = Activation::relu, double dropout = 0.0);

struct LayerDims {
    Shape3 in, out;
    size_t kernel_elems = 0;
    size_t bias_elems = 0;
    int fan_in = 0;
    int fan_out = 0;
};

/// Shape inference with validation; throws ValidationError naming the first
/// inconsistent layer.
std::vector<LayerDims> infer_layer_dims(const NetworkSpec& spec);

size_t param_count(const NetworkSpec& spec);

/// Indices (into spec.layers) of layers that carry parameters, in order.
/// These are the "L1..L4" layers of feature naming.
std::vector<int> parameterized_layers(const NetworkSpec& spec);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct Params {
    struct Layer {
        std::vector<T> kernel;
        std::vector<T> bias;
    };
    std::vector<Layer> layers;  // one entry per spec layer; pooling entries empty

    size_t total_size() const {
        size_t n = 0;
        for (const auto& l : layers) n += l.kernel.size() + l.bias.size();
        return n;
    }

    std::vector<T> flatten() const {
        std::vector<T> out;
        out.reserve(total_size());
        for (const auto& l : layers) {
            out.insert(out.end(), l.kernel.begin(), l.kernel.end());
            out.insert(out.end(), l.bias.begin(), l.bias.end());
        }
        return out;
    }

    void scale(T c) {
        for (auto& l : layers) {
            for (auto& v : l.kernel) v *= c;
            for (auto& v : l.bias) v *= c;
        }
    }

    bool all_finite() const {
        for (const auto& l : layers) {
            for (T v : l.kernel)
                if (!std::isfinite(static_cast<double>(v))) return false;
            for (T v : l.bias)
                if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    double sum_squares() const {
        double s = 0.0;
        for (const auto& l : layers) {
            for (T v : l.kernel) s += static_cast<double>(v) * static_cast<double>(v);
            for (T v : l.bias) s += static_cast<double>(v) * static_cast<double>(v);
        }
        return s;
    }

    template <typename U>
    Params<U> cast() const {
        Params<U> out;
        out.layers.resize(layers.size());
        for (size_t i = 0; i < layers.size(); ++i) {
            out.layers[i].kernel.assign(layers[i].kernel.begin(), layers[i].kernel.end());
            out.layers[i].bias.assign(layers[i].bias.begin(), layers[i].bias.end());
        }
        return out;
    }
};

using ParameterSet = Params<float>;

template <typename T>
Params<T> zeros_like(const NetworkSpec& spec) {
    auto dims = infer_layer_dims(spec);
    Params<T> p;
    p.layers.resize(spec.layers.size());
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        p.layers[i].kernel.assign(dims[i].kernel_elems, T(0));
        p.layers[i].bias.assign(dims[i].bias_elems, T(0));
    }
    return p;
}

template <typename T>
Params<T> unflatten(const NetworkSpec& spec, std::span<const T> flat) {
    auto p = zeros_like<T>(spec);
    if (flat.size() != p.total_size())
        throw ValidationError("unflatten: vector length " + std::to_string(flat.size()) +
                              " != parameter count " + std::to_string(p.total_size()));
    size_t off = 0;
    for (auto& l : p.layers) {
        std::copy_n(flat.begin() + static_cast<long>(off), l.kernel.size(), l.kernel.begin());
        off += l.kernel.size();
        std::copy_n(flat.begin() + static_cast<long>(off), l.bias.size(), l.bias.begin());
        off += l.bias.size();
    }
    return p;
}

namespace detail {

/// Fills `k` orthonormal vectors of length `len` into rows of `out` (row-major
/// k x len), via modified Gram-Schmidt with resampling on near-degeneracy.
void orthonormal_rows(Rng& rng, int k, int len, std::vector<double>& out);

struct ConvGeom {
    int oh = 0, ow = 0, pad_top = 0, pad_left = 0;
};

inline ConvGeom conv_geom(const Shape3& in, int k, int s) {
    ConvGeom g;
    g.oh = (in.height + s - 1) / s;
    g.ow = (in.width + s - 1) / s;
    int pad_h = std::max((g.oh - 1) * s + k - in.height, 0);
    int pad_w = std::max((g.ow - 1) * s + k - in.width, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
    return g;
}

}  // namespace detail

/// Deterministic per (spec, kind, variance, seed). Biases are always zero.
/// The variance knob scales each scheme's native standard deviation by
/// sqrt(variance); orthogonal ignores it and yields orthonormal rows or
/// columns, whichever set is smaller.
template <typename T>
Params<T> init_params(const NetworkSpec& spec, InitKind kind, double variance, uint64_t seed) {
    if (!(variance > 0.0)) throw ValidationError("init variance must be positive");
    auto dims = infer_layer_dims(spec);
    auto p = zeros_like<T>(spec);
    double scale = std::sqrt(variance);
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        if (dims[i].kernel_elems == 0) continue;
        Rng rng(derive_seed(seed, "layer", i));
        double stddev = scale;
        switch (kind) {
            case InitKind::xavier_normal:
                stddev = scale * std::sqrt(2.0 / (dims[i].fan_in + dims[i].fan_out));
                break;
            case InitKind::he_normal:
                stddev = scale * std::sqrt(2.0 / dims[i].fan_in);
                break;
            case InitKind::normal:
            case InitKind::truncated_normal:
                stddev = scale;
                break;
            case InitKind::orthogonal:
                break;
        }
        auto& kern = p.layers[i].kernel;
        if (kind == InitKind::orthogonal) {
            // Kernel as a (fan_in x units) matrix in storage order; orthonormalize
            // the smaller of rows/columns.
            int rows = dims[i].fan_in;
            int cols = spec.layers[i].units;
            int small = std::min(rows, cols);
            int large = std::max(rows, cols);
            std::vector<double> q;
            detail::orthonormal_rows(rng, small, large, q);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    double v = (rows <= cols) ? q[static_cast<size_t>(r) * cols + c]
                                              : q[static_cast<size_t>(c) * rows + r];
                    kern[static_cast<size_t>(r) * cols + c] = static_cast<T>(v);
                }
        } else if (kind == InitKind::truncated_normal) {
            for (auto& v : kern) v = static_cast<T>(rng.truncated_normal(0.0, stddev));
        } else {
            for (auto& v : kern) v = static_cast<T>(rng.normal(0.0, stddev));
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardCache {
    // acts[0] is the input batch; acts[i+1] the output of layer i.
    std::vector<std::vector<T>> acts;
    std::vector<std::vector<T>> preact;    // z of layer i (empty when activation none)
    std::vector<std::vector<T>> dropmask;  // per-element scale, empty when unused
};

namespace detail {

template <typename T>
void conv_forward(const LayerSpec& l, const LayerDims& d, const std::vector<T>& kern,
                  const std::vector<T>& bias, const T* x, int n, T* z) {
    const int ih = d.in.height, iw = d.in.width, ic = d.in.channels;
    const int oh = d.out.height, ow = d.out.width, oc = d.out.channels;
    const int k = l.kernel_size, s = l.stride;
    const ConvGeom g = conv_geom(d.in, k, s);
    for (int b = 0; b < n; ++b) {
        const T* xb = x + static_cast<size_t>(b) * ih * iw * ic;
        T* zb = z + static_cast<size_t>(b) * oh * ow * oc;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T* out = zb + (static_cast<size_t>(oy) * ow + ox) * oc;
                for (int o = 0; o < oc; ++o) out[o] = bias[static_cast<size_t>(o)];
                const int y0 = oy * s - g.pad_top;
                const int x0 = ox * s - g.pad_left;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = y0 + ky;
                    if (iy < 0 || iy >= ih) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = x0 + kx;
                        if (ix < 0 || ix >= iw) continue;
                        const T* xp = xb + (static_cast<size_t>(iy) * iw + ix) * ic;
                        const T* kp = kern.data() + static_cast<size_t>((ky * k + kx) * ic) * oc;
                        for (int c = 0; c < ic; ++c) {
                            const T xv = xp[c];
                            const T* kc = kp + static_cast<size_t>(c) * oc;
                            for (int o = 0; o < oc; ++o) out[o] += xv * kc[o];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv_backward(const LayerSpec& l, const LayerDims& d, const std::vector<T>& kern,
                   const T* x, const T* dz, int n, T* dx, std::vector<T>& dkern,
                   std::vector<T>& dbias) {
    const int ih = d.in.height, iw = d.in.width, ic = d.in.channels;
    const int oh = d.out.height, ow = d.out.width, oc = d.out.channels;
    const int k = l.kernel_size, s = l.stride;
    const ConvGeom g = conv_geom(d.in, k, s);
    for (int b = 0; b < n; ++b) {
        const T* xb = x + static_cast<size_t>(b) * ih * iw * ic;
        const T* dzb = dz + static_cast<size_t>(b) * oh * ow * oc;
        T* dxb = dx + static_cast<size_t>(b) * ih * iw * ic;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const T* dzo = dzb + (static_cast<size_t>(oy) * ow + ox) * oc;
                for (int o = 0; o < oc; ++o) dbias[static_cast<size_t>(o)] += dzo[o];
                const int y0 = oy * s - g.pad_top;
                const int x0 = ox * s - g.pad_left;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = y0 + ky;
                    if (iy < 0 || iy >= ih) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = x0 + kx;
                        if (ix < 0 || ix >= iw) continue;
                        const T* xp = xb + (static_cast<size_t>(iy) * iw + ix) * ic;
                        T* dxp = dxb + (static_cast<size_t>(iy) * iw + ix) * ic;
                        const size_t koff = static_cast<size_t>((ky * k + kx) * ic) * oc;
                        for (int c = 0; c < ic; ++c) {
                            const T xv = xp[c];
                            const T* kc = kern.data() + koff + static_cast<size_t>(c) * oc;
                            T* dkc = dkern.data() + koff + static_cast<size_t>(c) * oc;
                            T acc = T(0);
                            for (int o = 0; o < oc; ++o) {
                                dkc[o] += xv * dzo[o];
                                acc += kc[o] * dzo[o];
                            }
                            dxp[c] += acc;
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void dense_forward(const LayerDims& d, const std::vector<T>& kern, const std::vector<T>& bias,
                   const T* x, int n, T* z) {
    const int in_dim = d.in.elems();
    const int out_dim = d.out.channels;
    for (int b = 0; b < n; ++b) {
        const T* xb = x + static_cast<size_t>(b) * in_dim;
        T* zb = z + static_cast<size_t>(b) * out_dim;
        for (int o = 0; o < out_dim; ++o) zb[o] = bias[static_cast<size_t>(o)];
        for (int i = 0; i < in_dim; ++i) {
            const T xv = xb[i];
            const T* w = kern.data() + static_cast<size_t>(i) * out_dim;
            for (int o = 0; o < out_dim; ++o) zb[o] += xv * w[o];
        }
    }
}

template <typename T>
void dense_backward(const LayerDims& d, const std::vector<T>& kern, const T* x, const T* dz,
                    int n, T* dx, std::vector<T>& dkern, std::vector<T>& dbias) {
    const int in_dim = d.in.elems();
    const int out_dim = d.out.channels;
    for (int b = 0; b < n; ++b) {
        const T* xb = x + static_cast<size_t>(b) * in_dim;
        const T* dzb = dz + static_cast<size_t>(b) * out_dim;
        T* dxb = dx + static_cast<size_t>(b) * in_dim;
        for (int o = 0; o < out_dim; ++o) dbias[static_cast<size_t>(o)] += dzb[o];
        for (int i = 0; i < in_dim; ++i) {
            const T xv = xb[i];
            const T* w = kern.data() + static_cast<size_t>(i) * out_dim;
            T* dw = dkern.data() + static_cast<size_t>(i) * out_dim;
            T acc = T(0);
            for (int o = 0; o < out_dim; ++o) {
                dw[o] += xv * dzb[o];
                acc += w[o] * dzb[o];
            }
            dxb[i] += acc;
        }
    }
}

}  // namespace detail

/// Runs the network on a batch of `n` inputs laid out NHWC. Returns logits
/// (n x num_classes). `training` enables dropout, with masks drawn from
/// `dropout_seed` only. Pass a cache to keep intermediates for backward.
template <typename T>
std::vector<T> forward(const NetworkSpec& spec, const Params<T>& params, std::span<const T> input,
                       int n, bool training = false, uint64_t dropout_seed = 0,
                       ForwardCache<T>* cache = nullptr) {
    auto dims = infer_layer_dims(spec);
    if (input.size() != static_cast<size_t>(n) * spec.input_shape.elems())
        throw ValidationError("forward: batch size mismatch with input shape");
    if (params.layers.size() != spec.layers.size())
        throw ValidationError("forward: parameter layer count mismatch");

    const size_t L = spec.layers.size();
    std::vector<std::vector<T>> acts(L + 1);
    std::vector<std::vector<T>> preact(L);
    std::vector<std::vector<T>> dropmask(L);
    acts[0].assign(input.begin(), input.end());

    for (size_t i = 0; i < L; ++i) {
        const auto& l = spec.layers[i];
        const auto& d = dims[i];
        std::vector<T> z(static_cast<size_t>(n) * d.out.elems(), T(0));
        switch (l.kind) {
            case LayerKind::conv:
                detail::conv_forward(l, d, params.layers[i].kernel, params.layers[i].bias,
                                     acts[i].data(), n, z.data());
                break;
            case LayerKind::dense:
                detail::dense_forward(d, params.layers[i].kernel, params.layers[i].bias,
                                      acts[i].data(), n, z.data());
                break;
            case LayerKind::global_avg_pool: {
                const int hw = d.in.height * d.in.width;
                const int c = d.in.channels;
                const T inv = T(1) / static_cast<T>(hw);
                for (int b = 0; b < n; ++b) {
                    const T* xb = acts[i].data() + static_cast<size_t>(b) * hw * c;
                    T* zb = z.data() + static_cast<size_t>(b) * c;
                    for (int j = 0; j < hw; ++j)
                        for (int ch = 0; ch < c; ++ch) zb[ch] += xb[static_cast<size_t>(j) * c + ch];
                    for (int ch = 0; ch < c; ++ch) zb[ch] *= inv;
                }
                break;
            }
        }
        std::vector<T> a;
        if (l.activation == Activation::none) {
            a = z;
        } else {
            preact[i] = z;
            a.resize(z.size());
            if (l.activation == Activation::relu) {
                for (size_t j = 0; j < z.size(); ++j) a[j] = z[j] > T(0) ? z[j] : T(0);
            } else {
                for (size_t j = 0; j < z.size(); ++j) a[j] = std::tanh(z[j]);
            }
        }
        if (training && l.dropout_rate > 0.0) {
            Rng rng(derive_seed(dropout_seed, "dropout", i));
            const double keep = 1.0 - l.dropout_rate;
            const T inv_keep = static_cast<T>(1.0 / keep);
            dropmask[i].resize(a.size());
            for (size_t j = 0; j < a.size(); ++j) {
                const T m = rng.next_double() < keep ? inv_keep : T(0);
                dropmask[i][j] = m;
                a[j] *= m;
            }
        }
        acts[i + 1] = std::move(a);
    }
    std::vector<T> logits = acts[L];
    if (cache) {
        cache->acts = std::move(acts);
        cache->preact = std::move(preact);
        cache->dropmask = std::move(dropmask);
    }
    return logits;
}

/// Backpropagates dL/dlogits through the cached forward pass; returns raw
/// parameter gradients (no regularization term).
template <typename T>
Params<T> backward(const NetworkSpec& spec, const Params<T>& params, const ForwardCache<T>& cache,
                   std::vector<T> dout, int n) {
    auto dims = infer_layer_dims(spec);
    auto grads = zeros_like<T>(spec);
    for (int i = static_cast<int>(spec.layers.size()) - 1; i >= 0; --i) {
        const auto& l = spec.layers[static_cast<size_t>(i)];
        const auto& d = dims[static_cast<size_t>(i)];
        if (!cache.dropmask[static_cast<size_t>(i)].empty()) {
            const auto& m = cache.dropmask[static_cast<size_t>(i)];
            for (size_t j = 0; j < dout.size(); ++j) dout[j] *= m[j];
        }
        if (l.activation == Activation::relu) {
            const auto& z = cache.preact[static_cast<size_t>(i)];
            for (size_t j = 0; j < dout.size(); ++j)
                if (z[j] <= T(0)) dout[j] = T(0);
        } else if (l.activation == Activation::tanh) {
            const auto& z = cache.preact[static_cast<size_t>(i)];
            for (size_t j = 0; j < dout.size(); ++j) {
                const T t = std::tanh(z[j]);
                dout[j] *= (T(1) - t * t);
            }
        }
        std::vector<T> dx(static_cast<size_t>(n) * d.in.elems(), T(0));
        switch (l.kind) {
            case LayerKind::conv:
                detail::conv_backward(l, d, params.layers[static_cast<size_t>(i)].kernel,
                                      cache.acts[static_cast<size_t>(i)].data(), dout.data(), n,
                                      dx.data(), grads.layers[static_cast<size_t>(i)].kernel,
                                      grads.layers[static_cast<size_t>(i)].bias);
                break;
            case LayerKind::dense:
                detail::dense_backward(d, params.layers[static_cast<size_t>(i)].kernel,
                                       cache.acts[static_cast<size_t>(i)].data(), dout.data(), n,
                                       dx.data(), grads.layers[static_cast<size_t>(i)].kernel,
                                       grads.layers[static_cast<size_t>(i)].bias);
                break;
            case LayerKind::global_avg_pool: {
                const int hw = d.in.height * d.in.width;
                const int c = d.in.channels;
                const T inv = T(1) / static_cast<T>(hw);
                for (int b = 0; b < n; ++b) {
                    const T* dzb = dout.data() + static_cast<size_t>(b) * c;
                    T* dxb = dx.data() + static_cast<size_t>(b) * hw * c;
                    for (int j = 0; j < hw; ++j)
                        for (int ch = 0; ch < c; ++ch) dxb[static_cast<size_t>(j) * c + ch] += dzb[ch] * inv;
                }
                break;
            }
        }
        dout = std::move(dx);
    }
    return grads;
}

template <typename T>
struct LossGrads {
    double loss = 0.0;
    Params<T> grads;
};

/// Mean softmax cross-entropy plus l2 * sum of squares over all parameters
/// (kernels and biases). Dropout masks come from dropout_seed; pass
/// training=false semantics by using a spec without dropout.
template <typename T>
LossGrads<T> ce_loss_and_grads(const NetworkSpec& spec, const Params<T>& params,
                               std::span<const T> input, int n, std::span<const int> labels,
                               double l2_coeff, uint64_t dropout_seed) {
    const int K = spec.num_classes;
    if (labels.size() != static_cast<size_t>(n))
        throw ValidationError("loss: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= K) throw ValidationError("loss: label out of range");

    ForwardCache<T> cache;
    auto logits = forward(spec, params, input, n, /*training=*/true, dropout_seed, &cache);

    double loss = 0.0;
    std::vector<T> dlogits(logits.size());
    const T invn = T(1) / static_cast<T>(n);
    for (int b = 0; b < n; ++b) {
        const T* zb = logits.data() + static_cast<size_t>(b) * K;
        T* db = dlogits.data() + static_cast<size_t>(b) * K;
        T m = zb[0];
        for (int k = 1; k < K; ++k) m = std::max(m, zb[k]);
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(zb[k] - m));
        const double lse = static_cast<double>(m) + std::log(sum);
        loss += lse - static_cast<double>(zb[labels[static_cast<size_t>(b)]]);
        for (int k = 0; k < K; ++k) {
            double p = std::exp(static_cast<double>(zb[k]) - lse);
            db[k] = static_cast<T>(p) * invn;
        }
        db[labels[static_cast<size_t>(b)]] -= invn;
    }
    loss /= n;

    LossGrads<T> out;
    out.grads = backward(spec, params, cache, std::move(dlogits), n);
    if (l2_coeff != 0.0) {
        loss += l2_coeff * params.sum_squares();
        const T c2 = static_cast<T>(2.0 * l2_coeff);
        for (size_t i = 0; i < params.layers.size(); ++i) {
            auto& gl = out.grads.layers[i];
            const auto& pl = params.layers[i];
            for (size_t j = 0; j < gl.kernel.size(); ++j) gl.kernel[j] += c2 * pl.kernel[j];
            for (size_t j = 0; j < gl.bias.size(); ++j) gl.bias[j] += c2 * pl.bias[j];
        }
    }
    out.loss = loss;
    return out;
}

/// Regression head used by the accuracy estimators: single-logit network,
/// prediction sigmoid(z), loss mean (pred - target)^2 + l2 * sum(kernel^2).
/// l2 covers kernels only so the offset stays unregularized.
template <typename T>
LossGrads<T> sigmoid_mse_loss_and_grads(const NetworkSpec& spec, const Params<T>& params,
                                        std::span<const T> input, int n,
                                        std::span<const double> targets, double l2_coeff,
                                        uint64_t dropout_seed) {
    if (spec.num_classes != 1) throw ValidationError("regression head expects one output unit");
    if (targets.size() != static_cast<size_t>(n))
        throw ValidationError("loss: target count mismatch");

    ForwardCache<T> cache;
    auto logits = forward(spec, params, input, n, /*training=*/true, dropout_seed, &cache);

    double loss = 0.0;
    std::vector<T> dlogits(logits.size());
    for (int b = 0; b < n; ++b) {
        const double z = static_cast<double>(logits[static_cast<size_t>(b)]);
        const double p = 1.0 / (1.0 + std::exp(-z));
        const double e = p - targets[static_cast<size_t>(b)];
        loss += e * e;
        dlogits[static_cast<size_t>(b)] = static_cast<T>(2.0 * e * p * (1.0 - p) / n);
    }
    loss /= n;

    LossGrads<T> out;
    out.grads = backward(spec, params, cache, std::move(dlogits), n);
    if (l2_coeff != 0.0) {
        double ss = 0.0;
        const T c2 = static_cast<T>(2.0 * l2_coeff);
        for (size_t i = 0; i < params.layers.size(); ++i) {
            auto& gl = out.grads.layers[i];
            const auto& pl = params.layers[i];
            for (size_t j = 0; j < gl.kernel.size(); ++j) {
                ss += static_cast<double>(pl.kernel[j]) * static_cast<double>(pl.kernel[j]);
                gl.kernel[j] += c2 * pl.kernel[j];
            }
        }
        loss += l2_coeff * ss;
    }
    out.loss = loss;
    return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-7;
inline constexpr double kRmspropDecay = 0.9;
inline constexpr double kRmspropEpsilon = 1e-7;

template <typename T>
class Optimizer {
public:
    Optimizer(const NetworkSpec& spec, OptimizerKind kind, double learning_rate)
        : kind_(kind), lr_(learning_rate) {
        if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
        if (kind_ != OptimizerKind::sgd) v_ = zeros_like<T>(spec);
        if (kind_ == OptimizerKind::adam) m_ = zeros_like<T>(spec);
    }

    OptimizerKind kind() const { return kind_; }
    long steps() const { return step_; }

    void step(Params<T>& p, const Params<T>& g) {
        ++step_;
        const T lr = static_cast<T>(lr_);
        switch (kind_) {
            case OptimizerKind::sgd:
                for (size_t i = 0; i < p.layers.size(); ++i) {
                    apply_sgd(p.layers[i].kernel, g.layers[i].kernel, lr);
                    apply_sgd(p.layers[i].bias, g.layers[i].bias, lr);
                }
                break;
            case OptimizerKind::adam: {
                const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step_));
                const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step_));
                for (size_t i = 0; i < p.layers.size(); ++i) {
                    apply_adam(p.layers[i].kernel, g.layers[i].kernel, m_.layers[i].kernel,
                               v_.layers[i].kernel, lr, bc1, bc2);
                    apply_adam(p.layers[i].bias, g.layers[i].bias, m_.layers[i].bias,
                               v_.layers[i].bias, lr, bc1, bc2);
                }
                break;
            }
            case OptimizerKind::rmsprop:
                for (size_t i = 0; i < p.layers.size(); ++i) {
                    apply_rms(p.layers[i].kernel, g.layers[i].kernel, v_.layers[i].kernel, lr);
                    apply_rms(p.layers[i].bias, g.layers[i].bias, v_.layers[i].bias, lr);
                }
                break;
        }
    }

private:
    static void apply_sgd(std::vector<T>& p, const std::vector<T>& g, T lr) {
        for (size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    static void apply_adam(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& m,
                           std::vector<T>& v, T lr, double bc1, double bc2) {
        const T b1 = static_cast<T>(kAdamBeta1), b2 = static_cast<T>(kAdamBeta2);
        const T ib1 = static_cast<T>(1.0 - kAdamBeta1), ib2 = static_cast<T>(1.0 - kAdamBeta2);
        const T ibc1 = static_cast<T>(1.0 / bc1), ibc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(kAdamEpsilon);
        for (size_t j = 0; j < p.size(); ++j) {
            m[j] = b1 * m[j] + ib1 * g[j];
            v[j] = b2 * v[j] + ib2 * g[j] * g[j];
            const T mhat = m[j] * ibc1;
            const T vhat = v[j] * ibc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    static void apply_rms(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& v, T lr) {
        const T rho = static_cast<T>(kRmspropDecay), irho = static_cast<T>(1.0 - kRmspropDecay);
        const T eps = static_cast<T>(kRmspropEpsilon);
        for (size_t j = 0; j < p.size(); ++j) {
            v[j] = rho * v[j] + irho * g[j] * g[j];
            p[j] -= lr * g[j] / (std::sqrt(v[j]) + eps);
        }
    }

    OptimizerKind kind_;
    double lr_;
    long step_ = 0;
    Params<T> m_, v_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Argmax with ties broken toward the lowest class index.
template <typename T>
int argmax_class(const T* logits, int num_classes) {
    int best = 0;
    for (int k = 1; k < num_classes; ++k)
        if (logits[k] > logits[best]) best = k;
    return best;
}

struct EvalStats {
    double accuracy = 0.0;
    double mean_cross_entropy = 0.0;
};

/// Inference-mode accuracy and mean cross-entropy over a labeled set,
/// processed in fixed-size chunks.
EvalStats evaluate_on(const NetworkSpec& spec, const ParameterSet& params,
                      std::span<const float> images, std::span<const int> labels);

}  // namespace weightzoo
