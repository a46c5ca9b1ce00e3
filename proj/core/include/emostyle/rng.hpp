#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace emostyle {

// Counter-based generator. Every stochastic call sites its own Rng derived
// from (seed, stream tags), so draws are independent of call order and of
// how work is split across threads. Same key + counter -> same value, always.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ kGolden)), counter_(0) {}

    // New independent stream. Tags fold strings or integers into the key.
    [[nodiscard]] Rng derive(std::string_view tag) const {
        Rng r = *this;
        for (char c : tag) r.key_ = mix(r.key_ ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
        r.counter_ = 0;
        return r;
    }
    [[nodiscard]] Rng derive(std::uint64_t tag) const {
        Rng r = *this;
        r.key_ = mix(r.key_ ^ tag ^ kGolden);
        r.counter_ = 0;
        return r;
    }
    [[nodiscard]] Rng derive(std::string_view tag, std::uint64_t a) const { return derive(tag).derive(a); }
    [[nodiscard]] Rng derive(std::string_view tag, std::uint64_t a, std::uint64_t b) const {
        return derive(tag).derive(a).derive(b);
    }

    std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; two fresh uniforms per call, no cached state.
    double gaussian() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    std::uint64_t counter() const { return counter_; }
    std::uint64_t key() const { return key_; }

  private:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) {
        z += kGolden;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_;
};

// Fisher-Yates shuffle with draws from the given stream.
template <class Vec>
void shuffle(Vec& v, Rng rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace emostyle
