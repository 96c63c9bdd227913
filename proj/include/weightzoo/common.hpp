#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace weightzoo {

// Errors carry a category string that the CLI prints as a machine-parsable
// prefix ("error:<category>: ...") and maps to a distinct exit code.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}
    const std::string& category() const { return category_; }

private:
    std::string category_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

class ParseError : public Error {
public:
    explicit ParseError(const std::string& what) : Error("parse", what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io", what) {}
};

class VersionError : public Error {
public:
    explicit VersionError(const std::string& what) : Error("version", what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error("usage", what) {}
};

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& what) : Error("training", what) {}
};

// ---------------------------------------------------------------------------
// Deterministic randomness. Every stochastic step in the pipeline draws from
// an Rng seeded through derive_seed(), so results are reproducible across
// platforms and independent of the standard library's distributions.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_str(std::string_view s) {
    // FNV-1a 64
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    uint64_t s = base ^ (0x9e3779b97f4a7c15ULL * (stream + 0x51ed2701));
    return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    return derive_seed(base, hash_str(tag));
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t stream) {
    return derive_seed(derive_seed(base, tag), stream);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform double in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    /// Box-Muller; consumes two uniforms per call.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - next_double();  // (0, 1]
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Normal truncated at +-2 standard deviations, by resampling.
    double truncated_normal(double mean, double stddev) {
        for (;;) {
            double z = normal(0.0, 1.0);
            if (std::abs(z) <= 2.0) return mean + stddev * z;
        }
    }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<size_t>(below(i))]);
        }
    }

    /// k distinct indices from [0, n), returned sorted ascending.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<size_t>(k < n ? k : n));
        std::sort(idx.begin(), idx.end());
        return idx;
    }

private:
    uint64_t state_;
};

/// Reals in text artifacts are serialized with 9 significant digits.
inline std::string format_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

}  // namespace weightzoo
