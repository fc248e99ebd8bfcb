#pragma once

#include <cstdint>
#include <initializer_list>

namespace imaml {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Order-sensitive combination of seeds and indices into a new seed.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x5851f42d4c957f2dULL;
    for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

}  // namespace imaml
