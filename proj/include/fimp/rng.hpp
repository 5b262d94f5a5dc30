#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace fimp {

// Counter-based generator: sample i is a pure function of (seed, i), so the
// stream is identical on every platform and can be split by constructing a
// new Rng from any derived seed. Finalizer is the splitmix64 mix.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    static constexpr std::string_view algorithm() { return "splitmix64-counter"; }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; consumes exactly two raw samples.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, bound). Modulo bias is < 2^-32 for desk-scale bounds.
    std::uint64_t below(std::uint64_t bound) { return bound == 0 ? 0 : next_u64() % bound; }

    template <class V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), uniform without replacement, ascending order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

    // Derive an independent stream for a named sub-purpose.
    Rng split(std::uint64_t stream_id) const {
        std::uint64_t z = (seed_ ^ 0xD1B54A32D192ED03ULL) + stream_id * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return Rng(z ^ (z >> 31));
    }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

inline std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    if (k > n) k = n;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + static_cast<std::size_t>(below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace fimp
