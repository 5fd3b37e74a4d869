#pragma once

#include "hglmm/error.hpp"
#include "hglmm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

namespace hglmm::io {

struct Split {
    std::vector<std::size_t> train, dev, test;  // ascending row indices
};

/// Uniform integer in [0, bound] by rejection, independent of the standard
/// library's distribution implementation.
inline std::uint64_t uniform_index(Philox& rng, std::uint64_t bound) {
    if (bound == 0) return 0;
    const std::uint64_t range = bound + 1;
    if (range == 0) return rng();
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % range;
    std::uint64_t x;
    do x = rng();
    while (x >= limit);
    return x % range;
}

/// Seeded train/dev/test partition of n rows: round(train*n) and
/// round(dev*n) rows, the rest to test.
inline Split split_rows(std::size_t n, double train, double dev, std::uint64_t seed) {
    if (!(train >= 0.0) || !(dev >= 0.0) || train + dev > 1.0 + 1e-12)
        throw UsageError("split fractions must be non-negative and sum to at most 1");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Philox rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i - 1)]);
    const auto n_train = static_cast<std::size_t>(std::llround(train * static_cast<double>(n)));
    const auto n_dev = std::min(n - n_train, static_cast<std::size_t>(std::llround(dev * static_cast<double>(n))));
    Split s;
    s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.dev.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                 perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
    s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), perm.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.dev.begin(), s.dev.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

}  // namespace hglmm::io
