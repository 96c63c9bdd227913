#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "weightzoo/common.hpp"

namespace weightzoo {

/// Grayscale labeled image set. Pixels are stored as float32 in [-1, 1]
/// (raw bytes 0..255 mapped linearly); this is the only pixel scaling the
/// pipeline performs.
struct Dataset {
    std::string name;
    std::string split;  // "train" or "test"
    int n = 0;
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<float> images;  // n * height * width
    std::vector<int> labels;

    void validate() const;
    std::span<const float> image(int i) const {
        const size_t sz = static_cast<size_t>(height) * width;
        return {images.data() + static_cast<size_t>(i) * sz, sz};
    }
};

/// Reads an IDX image/label file pair (the MNIST distribution format:
/// big-endian magic 0x00000803 for images, 0x00000801 for labels).
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int num_classes = 10, const std::string& name = "idx",
                 const std::string& split = "train");

/// Writes a dataset back to the IDX pair; load_idx(write_idx(d)) is
/// bit-exact because pixels live on the 256-level grid.
void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

struct SyntheticSpec {
    int num_classes = 10;
    int samples_per_class = 100;  // train; the test split gets half per class
    int image_size = 16;
    uint64_t pattern_seed = 0;
};

/// Class-conditional oriented gratings plus noise, deterministic per seed and
/// balanced by construction. Pixels are quantized to the 256-level grid so
/// IDX round-trips are exact.
std::pair<Dataset, Dataset> gen_synthetic(const SyntheticSpec& spec);

/// Uniform sample without replacement of floor(fraction * n) examples.
/// Fraction must be one of {0.1, 0.25, 0.5, 1.0}; 1.0 is the identity.
Dataset subsample(const Dataset& d, double fraction, uint64_t seed);

/// Uniform sample without replacement of min(count, n) examples (used to
/// reduce a full dataset to desk scale).
Dataset take_n(const Dataset& d, int count, uint64_t seed);

}  // namespace weightzoo
