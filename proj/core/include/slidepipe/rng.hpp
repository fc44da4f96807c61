#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

namespace slidepipe {

// Deterministic random stream. All sampling helpers are implemented here
// rather than through std:: distributions so that a given seed produces the
// same sequence on every standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0)
        : seed_(seed), engine_(splitmix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; draws two uniforms per sample, no cached state.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream for a named sub-component. Derivation
    // depends only on the constructing seed, never on how much of this
    // stream has been consumed, so adding a consumer to one stream cannot
    // disturb any other.
    Rng derive(std::string_view tag) const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return Rng(splitmix(seed_ ^ splitmix(h)));
    }

    Rng derive(std::string_view tag, std::uint64_t index) const {
        return Rng(derive(tag).seed_ ^ splitmix(index + 0x51ed2701));
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::uint64_t seed_ = 0;
    std::mt19937_64 engine_;
};

} // namespace slidepipe
