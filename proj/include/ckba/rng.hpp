#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ckba {

using Rng = std::mt19937_64;

/// Independent stream for (seed, tag). Each pipeline stage draws from its
/// own stream so stages reproduce independently of each other.
inline Rng make_stream(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : tag) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return Rng(seq);
}

}  // namespace ckba
