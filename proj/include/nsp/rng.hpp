#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace nsp {

// Named RNG streams: each (seed, tag) pair yields an independent generator,
// so adding a consumer with a new tag never perturbs existing draws.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view tag) {
    return std::mt19937_64(splitmix64(splitmix64(seed) ^ hash_tag(tag)));
}

}  // namespace nsp
