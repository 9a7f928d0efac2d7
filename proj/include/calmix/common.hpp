#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace calmix {

// Base error for contract violations (shape/label/argument mismatches).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration / usage. The CLI maps this to exit code 2.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Missing or unreadable data files.
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Training produced non-finite loss. The CLI maps this to exit code 3.
struct DivergedError : Error {
    explicit DivergedError(const std::string& msg) : Error(msg) {}
};

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << args);
    return oss.str();
}
}  // namespace detail

#define CALMIX_CHECK(cond, ...)                                               \
    do {                                                                      \
        if (!(cond))                                                          \
            throw ::calmix::Error(::calmix::detail::format_msg(__VA_ARGS__)); \
    } while (0)

#define CALMIX_CHECK_CONFIG(cond, ...)                                        \
    do {                                                                      \
        if (!(cond))                                                          \
            throw ::calmix::ConfigError(                                      \
                ::calmix::detail::format_msg(__VA_ARGS__));                   \
    } while (0)

using Rng = std::mt19937;

// Uniform in [0, 1) from the top 24 engine bits. Hand-rolled so streams are
// identical across standard library implementations.
inline float uniform_unit(Rng& rng) {
    return static_cast<float>(rng() >> 8) * (1.0f / 16777216.0f);
}

inline double uniform_unit_double(Rng& rng) {
    const std::uint64_t hi = rng();
    const std::uint64_t lo = rng();
    return static_cast<double>((hi << 21) ^ lo) * (1.0 / 9007199254740992.0);
}

// Uniform integer in [0, n) via 64-bit multiply (bias < n / 2^32).
inline int uniform_below(Rng& rng, int n) {
    CALMIX_CHECK(n > 0, "uniform_below: n must be positive, got ", n);
    return static_cast<int>((static_cast<std::uint64_t>(rng()) *
                             static_cast<std::uint64_t>(n)) >> 32);
}

inline bool coin_flip(Rng& rng) { return (rng() & 1u) != 0u; }

// Box-Muller; consumes two draws per pair, caller gets one value at a time.
template <typename T = float>
inline T gaussian(Rng& rng, T mean = T(0), T stddev = T(1)) {
    double u1 = 0.0;
    do {
        u1 = uniform_unit_double(rng);
    } while (u1 <= 1e-300);
    const double u2 = uniform_unit_double(rng);
    const double z = std::sqrt(-2.0 * std::log(u1)) *
                     std::cos(2.0 * 3.14159265358979323846 * u2);
    return static_cast<T>(mean + stddev * static_cast<T>(z));
}

// FNV-1a over raw bytes; used for config ids and checkpoint blob integrity.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

}  // namespace calmix
