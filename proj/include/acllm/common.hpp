#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace acllm {

// Raised when a forward pass produces NaN/Inf. The message names the op.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct StageOrderError : std::runtime_error {
    explicit StageOrderError(const std::string& what) : std::runtime_error(what) {}
};

// splitmix64; used to derive per-stage / per-step / per-utterance seeds from
// one global seed so that every stochastic choice is addressable.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, const std::string& salt) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : salt) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix_seed(seed, h);
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(seed); }

// FNV-1a over a string, rendered as 16 hex chars. Used for config hashes.
std::string fnv1a_hex(const std::string& data);

}  // namespace acllm
