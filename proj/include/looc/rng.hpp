#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace looc {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a; labels are short ASCII tags.
inline constexpr std::uint64_t hash_label(std::string_view label) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// A named, seeded random stream. Child streams are derived by hashing a label
/// and integer coordinates into the parent seed, so a stream's contents depend
/// only on its derivation path and never on how many draws other streams made.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

    std::uint64_t seed() const noexcept { return seed_; }

    RngStream child(std::string_view label, std::initializer_list<std::uint64_t> coords = {}) const {
        std::uint64_t h = splitmix64(seed_ ^ hash_label(label));
        for (std::uint64_t c : coords) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
        return RngStream(h);
    }

    std::mt19937_64& engine() noexcept { return engine_; }

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    bool bernoulli(double p) {
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        return uniform() < p;
    }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    template <typename T>
    void shuffle(T& container) {
        // Fisher-Yates with our own index draws; std::shuffle's draw pattern is
        // implementation-defined.
        for (std::size_t i = container.size(); i > 1; --i) {
            std::size_t j = index(i);
            using std::swap;
            swap(container[i - 1], container[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace looc
