#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace evalnet {

// Deterministic random source. Only the raw mt19937_64 stream is used;
// uniform/normal/shuffle are derived here by hand because the standard
// distributions are implementation-defined and would break cross-build
// reproducibility of seeded runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), n > 0. Modulo bias is negligible for the
    // extents used here (n << 2^64).
    std::uint64_t uniform_int(std::uint64_t n) { return eng_() % n; }

    // Standard normal via Box-Muller, one spare cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Fisher-Yates with the modulo draw above.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace evalnet
