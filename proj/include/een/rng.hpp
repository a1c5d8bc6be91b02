#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace een {

// Seeded generator with self-contained uniform/normal construction so that
// streams are identical across standard library implementations. Normal
// draws use Box-Muller without a cached spare, so the full state is the
// engine state and round-trips through text serialization.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        // u in (0,1], v in [0,1)
        const double u = 1.0 - uniform();
        const double v = uniform();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586476925287 * v);
    }

    std::size_t below(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::string state() const;
    void set_state(const std::string& s);

    // Stream derivation: independent child seeds from (seed, tag) pairs.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t tag);

private:
    std::mt19937_64 eng_;
};

}  // namespace een
