#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace apa {

// Build-wide scalar type for training math. Gradient checks instantiate the
// templated core at double regardless of this choice.
#ifdef APA_REAL_DOUBLE
using real = double;
#else
using real = float;
#endif

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct DegenerateInputError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct RangeError : Error { using Error::Error; };
struct VocabError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ChecksumError : Error { using Error::Error; };
struct ConfigMismatchError : Error { using Error::Error; };
struct SplitError : Error { using Error::Error; };
struct UndefinedCorrelationError : Error { using Error::Error; };

// Deterministic RNG. The engine is the standardized mt19937_64; the draw
// recipes are hand-rolled because std:: distributions are
// implementation-defined and would break cross-platform reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Box-Muller with cached spare.
    double normal(double mu, double sigma) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + sigma * spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mu + sigma * r * std::cos(theta);
    }

    // [0, n)
    std::uint64_t below(std::uint64_t n) {
        return n == 0 ? 0 : eng_() % n;
    }

    // [lo, hi] inclusive
    int range_int(int lo, int hi) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    template <typename V>
    void shuffle(V& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a, used for config and dataset digests.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(s.data(), s.size());
}

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed = 0);

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace apa
