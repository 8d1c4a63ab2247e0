// SPDX-License-Identifier: Apache-2.0
//
// Shared aliases, error types and deterministic random streams.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace g2p2 {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using NodeId = int;
using ClassId = int;
using TokenId = int;

// Error taxonomy. The CLI maps these onto exit codes.
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct LookupError : std::out_of_range {
    using std::out_of_range::out_of_range;
};
struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigurationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent seed for a named stream, e.g.
/// `derive_seed(master, "neighbors", epoch, batch)`.
template <typename... Ints>
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, Ints... indices) {
    std::uint64_t h = splitmix64(master ^ fnv1a(stream));
    ((h = splitmix64(h ^ static_cast<std::uint64_t>(indices))), ...);
    return h;
}

/// Random source with platform-independent distributions. std::mt19937_64
/// is fully specified; the std distributions are not, so sampling helpers
/// live here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}

    std::uint64_t next() {
        // xoshiro-style mixing on a splitmix sequence keeps this trivially portable.
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix64(state_);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ParameterError("Rng::below requires n > 0");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = next();
        while (x >= limit) x = next();
        return x % n;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct elements of `pool` chosen uniformly, in draw order.
    template <typename T>
    std::vector<T> sample(std::vector<T> pool, std::size_t k) {
        if (k > pool.size()) k = pool.size();
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + below(pool.size() - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename Scalar>
Mat<Scalar> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Mat<Scalar> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(stddev * rng.normal());
    return m;
}

template <typename Scalar>
Mat<Scalar> random_uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
    Mat<Scalar> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(bound * (2.0 * rng.uniform() - 1.0));
    return m;
}

/// FNV-1a over the raw bytes of a matrix; used to assert frozen parameters.
template <typename Scalar>
std::uint64_t hash_matrix(const Mat<Scalar>& m, std::uint64_t h = 1469598103934665603ULL) {
    const std::int64_t dims[2] = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(dims), sizeof(dims)), h);
    const auto* bytes = reinterpret_cast<const char*>(m.data());
    return fnv1a(std::string_view(bytes, static_cast<std::size_t>(m.size()) * sizeof(Scalar)), h);
}

}  // namespace g2p2
