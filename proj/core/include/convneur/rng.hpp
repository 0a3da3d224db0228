#pragma once

#include <cstdint>

namespace convneur {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Mixes several integers into one seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) noexcept;

// Uniform in [0, 1) from one 64-bit word, 53-bit resolution.
double unit_from_bits(std::uint64_t bits) noexcept;

// xoshiro256** generator with platform-independent derived distributions, so
// seeded runs reproduce bit-for-bit across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept;

    std::uint64_t next() noexcept;
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept;
    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept;
    double normal() noexcept;
    // Normal(0, std) resampled until within +-2 std.
    double truncated_normal(double std) noexcept;

    std::uint64_t state_digest() const noexcept;

private:
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace convneur
