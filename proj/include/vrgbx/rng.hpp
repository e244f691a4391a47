// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace vrgbx {

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(s.data()), s.size()), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Sub-seed for a named purpose; stable across platforms and releases.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
    return splitmix64(seed ^ fnv1a(purpose));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
    return splitmix64(derive_seed(seed, purpose) + splitmix64(index));
}

/// Seeded random stream. Copying an Rng copies its full state, so a copy
/// replays exactly the draws of the original.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
    double normal() { return normal_(engine_); }

    /// Uniform integer in [0, n).
    int index(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }
    bool bernoulli(double p) { return uniform_(engine_) < p; }

    template <typename Real>
    void fill_normal(std::span<Real> out) {
        for (auto& v : out) v = static_cast<Real>(normal_(engine_));
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace vrgbx
