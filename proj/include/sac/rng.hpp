#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace sac {

// FNV-1a 64-bit. Used for content hashes and for deriving labeled sub-seeds.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

namespace detail {

// splitmix64 output function (Steele, Lea, Flood 2014).
inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
}

} // namespace detail

// Counter-based deterministic generator: the n-th output is a pure function
// of (seed, n), so identical seeds replay identical streams on any platform.
// Sub-streams are derived from string labels, never from global state.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), counter_(0) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL;
        return detail::mix64(z);
    }

    // Child generator for an independent labeled stream.
    Rng derive(std::string_view label) const {
        return Rng(detail::mix64(seed_ ^ fnv1a64(label)));
    }

    Rng derive(std::string_view label, std::uint64_t index) const {
        std::uint64_t h = fnv1a64(label);
        h = fnv1a64(&index, sizeof(index), h);
        return Rng(detail::mix64(seed_ ^ h));
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n). n must be > 0; modulo bias is irrelevant
    // at the range sizes used here.
    std::uint64_t next_below(std::uint64_t n) {
        return next_u64() % n;
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller (no rejection, so the stream length
    // consumed is a fixed function of the call count).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

} // namespace sac
