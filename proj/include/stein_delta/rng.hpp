#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

#include <boost/math/special_functions/erf.hpp>

namespace stein_delta {

// Philox4x64-10 counter-based generator. A (seed, stream) pair selects the key, so
// every replicate owns an independent stream and results never depend on scheduling.
class Philox4x64 {
public:
    using result_type = std::uint64_t;
    using Block = std::array<std::uint64_t, 4>;
    using Key = std::array<std::uint64_t, 2>;

    Philox4x64(std::uint64_t seed, std::uint64_t stream) : key_{seed, stream} {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        if (pos_ == 4) {
            buffer_ = block(counter_, key_);
            if (++counter_[0] == 0)
                if (++counter_[1] == 0)
                    if (++counter_[2] == 0) ++counter_[3];
            pos_ = 0;
        }
        return buffer_[pos_++];
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
    // Uniform on the open interval (0, 1).
    double uniform_open() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

    // Standard normal by Box-Muller; the spare variate is cached within the stream.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * M_PI * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    // Uniform integer in [0, bound) by rejection (bound > 0).
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = max() - max() % bound;
        std::uint64_t x;
        do {
            x = (*this)();
        } while (x >= limit);
        return x % bound;
    }

    static Block block(Block ctr, Key key) {
        constexpr std::uint64_t M0 = 0xD2E7470EE14C6C93ULL, M1 = 0xCA5A826395121157ULL;
        constexpr std::uint64_t W0 = 0x9E3779B97F4A7C15ULL, W1 = 0xBB67AE8584CAA73BULL;
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += W0;
                key[1] += W1;
            }
            const unsigned __int128 p0 = static_cast<unsigned __int128>(M0) * ctr[0];
            const unsigned __int128 p1 = static_cast<unsigned __int128>(M1) * ctr[2];
            const auto hi0 = static_cast<std::uint64_t>(p0 >> 64), lo0 = static_cast<std::uint64_t>(p0);
            const auto hi1 = static_cast<std::uint64_t>(p1 >> 64), lo1 = static_cast<std::uint64_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        }
        return ctr;
    }

private:
    Key key_;
    Block counter_{0, 0, 0, 0};
    Block buffer_{};
    int pos_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

using Rng = Philox4x64;

// Stream identifiers: the top bits separate the roles that draw from one seed.
namespace streams {
inline constexpr std::uint64_t kStatistic = 0;
inline constexpr std::uint64_t kLimit = 1ULL << 62;
inline constexpr std::uint64_t kAuxiliary = 2ULL << 62;
inline constexpr std::uint64_t kCoupled = 3ULL << 62;
}  // namespace streams

// Standard normal quantile.
inline double normal_quantile(double u) { return -M_SQRT2 * boost::math::erfc_inv(2.0 * u); }

}  // namespace stein_delta
