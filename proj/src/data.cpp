#include "weightzoo/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace weightzoo {

namespace {

constexpr uint32_t kImageMagic = 0x00000803;
constexpr uint32_t kLabelMagic = 0x00000801;

uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw ParseError("truncated IDX file: " + path);
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

Dataset gather(const Dataset& d, const std::vector<int>& idx) {
    Dataset out;
    out.name = d.name;
    out.split = d.split;
    out.height = d.height;
    out.width = d.width;
    out.num_classes = d.num_classes;
    out.n = static_cast<int>(idx.size());
    const size_t sz = static_cast<size_t>(d.height) * d.width;
    out.images.resize(static_cast<size_t>(out.n) * sz);
    out.labels.resize(static_cast<size_t>(out.n));
    for (size_t i = 0; i < idx.size(); ++i) {
        auto src = d.image(idx[i]);
        std::copy(src.begin(), src.end(), out.images.begin() + static_cast<long>(i * sz));
        out.labels[i] = d.labels[static_cast<size_t>(idx[i])];
    }
    out.validate();
    return out;
}

}  // namespace

void Dataset::validate() const {
    if (n <= 0) throw ValidationError("dataset '" + name + "' is empty");
    if (num_classes < 1) throw ValidationError("dataset '" + name + "' has no classes");
    if (images.size() != static_cast<size_t>(n) * height * width)
        throw ValidationError("dataset '" + name + "': image buffer size mismatch");
    if (labels.size() != static_cast<size_t>(n))
        throw ValidationError("dataset '" + name + "': label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= num_classes)
            throw ValidationError("dataset '" + name + "': label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(num_classes) + ")");
    for (float v : images)
        if (!(v >= -1.0f && v <= 1.0f))
            throw ValidationError("dataset '" + name + "': pixel outside [-1, 1]");
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, int num_classes,
                 const std::string& name, const std::string& split) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError("cannot open " + images_path);
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("cannot open " + labels_path);

    const uint32_t im = read_be32(img, images_path);
    if (im != kImageMagic)
        throw ParseError("bad IDX image magic in " + images_path + " (got " + std::to_string(im) + ")");
    const uint32_t n_img = read_be32(img, images_path);
    const uint32_t rows = read_be32(img, images_path);
    const uint32_t cols = read_be32(img, images_path);

    const uint32_t lm = read_be32(lab, labels_path);
    if (lm != kLabelMagic)
        throw ParseError("bad IDX label magic in " + labels_path + " (got " + std::to_string(lm) + ")");
    const uint32_t n_lab = read_be32(lab, labels_path);
    if (n_img != n_lab)
        throw ParseError("IDX count mismatch: " + std::to_string(n_img) + " images vs " +
                         std::to_string(n_lab) + " labels");

    Dataset d;
    d.name = name;
    d.split = split;
    d.n = static_cast<int>(n_img);
    d.height = static_cast<int>(rows);
    d.width = static_cast<int>(cols);
    d.num_classes = num_classes;

    const size_t pix = static_cast<size_t>(n_img) * rows * cols;
    std::vector<unsigned char> raw(pix);
    if (!img.read(reinterpret_cast<char*>(raw.data()), static_cast<long>(pix)))
        throw ParseError("truncated IDX file: " + images_path);
    d.images.resize(pix);
    for (size_t i = 0; i < pix; ++i)
        d.images[i] = static_cast<float>(2.0 * raw[i] / 255.0 - 1.0);

    std::vector<unsigned char> rl(n_lab);
    if (!lab.read(reinterpret_cast<char*>(rl.data()), static_cast<long>(n_lab)))
        throw ParseError("truncated IDX file: " + labels_path);
    d.labels.assign(rl.begin(), rl.end());

    d.validate();
    return d;
}

void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw IoError("cannot write " + images_path);
    write_be32(img, kImageMagic);
    write_be32(img, static_cast<uint32_t>(d.n));
    write_be32(img, static_cast<uint32_t>(d.height));
    write_be32(img, static_cast<uint32_t>(d.width));
    std::vector<unsigned char> raw(d.images.size());
    for (size_t i = 0; i < d.images.size(); ++i) {
        const long b = std::lround((static_cast<double>(d.images[i]) + 1.0) * 127.5);
        raw[i] = static_cast<unsigned char>(std::clamp(b, 0L, 255L));
    }
    img.write(reinterpret_cast<const char*>(raw.data()), static_cast<long>(raw.size()));
    if (!img) throw IoError("failed writing " + images_path);

    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("cannot write " + labels_path);
    write_be32(lab, kLabelMagic);
    write_be32(lab, static_cast<uint32_t>(d.n));
    std::vector<unsigned char> rl(d.labels.begin(), d.labels.end());
    lab.write(reinterpret_cast<const char*>(rl.data()), static_cast<long>(rl.size()));
    if (!lab) throw IoError("failed writing " + labels_path);
}

namespace {

/// One grating image; v = dc + amp * sin(2*pi*f*u/S + phase) + noise, where
/// u is the coordinate along the class orientation. The small class-specific
/// dc offset is a weak secondary cue that barely trained networks still pick
/// up, so attainable accuracy varies smoothly with training progress.
void render_grating(Rng& rng, int size, double theta, double freq, double dc, float* out) {
    const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double amp = rng.uniform(0.40, 0.90);
    const double th = theta + rng.uniform(-0.06, 0.06);
    const double f = freq * rng.uniform(0.90, 1.10);
    const double ct = std::cos(th), st = std::sin(th);
    const double c = (size - 1) / 2.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double u = (x - c) * ct + (y - c) * st;
            double v = dc + amp * std::sin(2.0 * 3.14159265358979323846 * f * u / size + phase);
            v += rng.normal(0.0, 0.22);
            v = std::clamp(v, -1.0, 1.0);
            // quantize to the byte grid so IDX round-trips are exact
            const long b = std::lround((v + 1.0) * 127.5);
            out[static_cast<size_t>(y) * size + x] = static_cast<float>(2.0 * b / 255.0 - 1.0);
        }
    }
}

/// Classes come in pairs sharing a grating frequency; the two members of
/// pair p differ by an orientation gap that narrows with p. Weak networks
/// separate frequencies only, strong ones also resolve the narrow pairs, so
/// attainable accuracies form a continuum rather than a chance/perfect split.
Dataset gen_split(const SyntheticSpec& spec, const std::string& split, int per_class,
                  double theta0, double f_lo, double f_hi) {
    Dataset d;
    d.name = "synthetic:p" + std::to_string(spec.pattern_seed);
    d.split = split;
    d.height = spec.image_size;
    d.width = spec.image_size;
    d.num_classes = spec.num_classes;
    d.n = spec.num_classes * per_class;
    const size_t sz = static_cast<size_t>(spec.image_size) * spec.image_size;
    d.images.resize(static_cast<size_t>(d.n) * sz);
    d.labels.resize(static_cast<size_t>(d.n));

    const int pairs = (spec.num_classes + 1) / 2;
    const double pi = 3.14159265358979323846;
    int row = 0;
    for (int k = 0; k < spec.num_classes; ++k) {
        const int p = k / 2;
        const double freq = pairs > 1 ? f_lo + (f_hi - f_lo) * p / (pairs - 1) : f_lo;
        const double gap = (pi / 2.0) / std::pow(2.5, p);  // 90, 36, 14.4, 5.8, 2.3 degrees
        const double theta = theta0 + p * (pi / pairs) + (k % 2 ? gap : 0.0);
        const double dc =
            spec.num_classes > 1 ? -0.12 + 0.24 * k / (spec.num_classes - 1) : 0.0;
        for (int j = 0; j < per_class; ++j, ++row) {
            Rng rng(derive_seed(spec.pattern_seed, split + "/sample", static_cast<uint64_t>(k) * 1000003u + j));
            render_grating(rng, spec.image_size, theta, freq, dc,
                           d.images.data() + static_cast<size_t>(row) * sz);
            d.labels[static_cast<size_t>(row)] = k;
        }
    }
    // mix classes so sequential mini-batches are not class-sorted
    std::vector<int> order(static_cast<size_t>(d.n));
    std::iota(order.begin(), order.end(), 0);
    Rng mix(derive_seed(spec.pattern_seed, split + "/order"));
    mix.shuffle(order);
    return gather(d, order);
}

}  // namespace

std::pair<Dataset, Dataset> gen_synthetic(const SyntheticSpec& spec) {
    if (spec.image_size < 8) throw ValidationError("synthetic image_size must be >= 8");
    if (spec.num_classes < 2) throw ValidationError("synthetic needs at least two classes");
    if (spec.samples_per_class < 2) throw ValidationError("synthetic needs samples_per_class >= 2");
    Rng ds(derive_seed(spec.pattern_seed, "dataset"));
    const double theta0 = ds.uniform(0.0, 3.14159265358979323846);
    const double f_lo = ds.uniform(2.0, 3.0);
    const double f_hi = ds.uniform(4.5, 6.0);
    Dataset train = gen_split(spec, "train", spec.samples_per_class, theta0, f_lo, f_hi);
    Dataset test = gen_split(spec, "test", std::max(1, spec.samples_per_class / 2), theta0, f_lo, f_hi);
    return {std::move(train), std::move(test)};
}

Dataset subsample(const Dataset& d, double fraction, uint64_t seed) {
    d.validate();
    const double allowed[] = {0.1, 0.25, 0.5, 1.0};
    bool ok = false;
    for (double a : allowed) ok = ok || fraction == a;
    if (!ok)
        throw ValidationError("train fraction must be one of {0.1, 0.25, 0.5, 1.0}, got " +
                              format_g9(fraction));
    if (fraction == 1.0) return d;
    const int m = static_cast<int>(std::floor(fraction * d.n));
    if (m < 1) throw ValidationError("subsample would be empty");
    Rng rng(seed);
    return gather(d, rng.sample_without_replacement(d.n, m));
}

Dataset take_n(const Dataset& d, int count, uint64_t seed) {
    d.validate();
    if (count < 1) throw ValidationError("take_n requires a positive count");
    if (count >= d.n) return d;
    Rng rng(seed);
    return gather(d, rng.sample_without_replacement(d.n, count));
}

}  // namespace weightzoo
