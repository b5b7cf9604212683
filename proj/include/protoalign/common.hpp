#pragma once

// Shared vocabulary for the protoalign library: matrix aliases, domain tags,
// the exception hierarchy and seeded RNG helpers.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace protoalign {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = RowMatrix<double>;
using Vec = ColVector<double>;

using Rng = std::mt19937_64;

enum class Domain : int { Target = 0, Auxiliary = 1 };

inline const char* domain_name(Domain d) {
    return d == Domain::Target ? "target" : "auxiliary";
}

// Error hierarchy. The CLI maps each family to its own exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    NumericError(std::string where, const std::string& what)
        : Error("numeric failure in " + where + ": " + what), where_(std::move(where)) {}
    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

inline Domain parse_domain(const std::string& s) {
    if (s == "target") return Domain::Target;
    if (s == "auxiliary" || s == "aux") return Domain::Auxiliary;
    throw ConfigError("unknown domain tag '" + s + "'");
}

// splitmix64 finalizer; used to derive independent stream seeds from one run seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Named salts so that every consumer of randomness owns a distinct stream.
namespace seed_salt {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kTargetShuffle = 2;
inline constexpr std::uint64_t kAuxSubset = 3;
inline constexpr std::uint64_t kAuxShuffle = 4;
inline constexpr std::uint64_t kAugment = 5;
inline constexpr std::uint64_t kSplit = 6;
inline constexpr std::uint64_t kFraction = 7;
}  // namespace seed_salt

// Uniform integer in [0, n) that does not depend on the standard library's
// distribution implementation, so streams are reproducible across toolchains.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = rng();
    while (v >= limit) v = rng();
    return static_cast<std::size_t>(v % n);
}

inline double uniform_real(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform_real(rng);
}

// Box-Muller; one draw per call keeps the stream position easy to reason about.
inline double standard_normal(Rng& rng) {
    double u1 = uniform_real(rng);
    while (u1 <= 0.0) u1 = uniform_real(rng);
    const double u2 = uniform_real(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[uniform_index(rng, i)]);
    }
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

}  // namespace protoalign
