#pragma once

#include <cstdint>
#include <random>

namespace p4p {

// splitmix64 step; used to derive independent substream seeds from one master seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d4a798dd9b1e35ULL;  // odd multiplier, avalanche step
    return z ^ (z >> 31);
}

// Deterministic seed for substream `stream` of master seed `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (0x5851f42d4c957f2dULL * (stream + 1));
    std::uint64_t a = splitmix64(s);
    return splitmix64(s) ^ a;
}

inline std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream = 0) {
    return std::mt19937_64(derive_seed(seed, stream));
}

// Unbiased draw from [0, n) used for resampling; independent of std lib
// distribution internals so resample index sets stay stable.
inline std::size_t uniform_index(std::mt19937_64& eng, std::size_t n) {
    const std::uint64_t span = n;
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % span;
    std::uint64_t draw;
    do {
        draw = eng();
    } while (draw >= limit);
    return static_cast<std::size_t>(draw % span);
}

}  // namespace p4p
