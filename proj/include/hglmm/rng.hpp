#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace hglmm {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11). The 64-bit
/// seed is the key; the stream id occupies the upper half of the counter, so
/// distinct streams never overlap. Satisfies UniformRandomBitGenerator.
class Philox {
public:
    using result_type = std::uint64_t;
    using block_type = std::array<std::uint32_t, 4>;
    using key_type = std::array<std::uint32_t, 2>;

    explicit Philox(std::uint64_t seed = 0, std::uint64_t stream = 0)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          stream_(stream) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        if (pos_ == 2) {
            block_ = generate(counter_block(), key_);
            ++counter_;
            pos_ = 0;
        }
        const auto k = 2 * pos_++;
        return static_cast<std::uint64_t>(block_[k]) | (static_cast<std::uint64_t>(block_[k + 1]) << 32);
    }

    /// Independent generator for a sub-stream (e.g. one replicate).
    Philox split(std::uint64_t substream) const {
        Philox p;
        p.key_ = key_;
        p.stream_ = stream_ * 0x9E3779B97F4A7C15ULL + substream + 1;
        return p;
    }

    /// Raw block function, exposed for known-answer tests.
    static block_type generate(block_type ctr, key_type key) {
        constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
        constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * ctr[0];
            const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * ctr[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
            key[0] += W0;
            key[1] += W1;
        }
        return ctr;
    }

private:
    block_type counter_block() const {
        return {static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    }

    key_type key_{};
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
    block_type block_{};
    unsigned pos_ = 2;
};

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Philox& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace hglmm
