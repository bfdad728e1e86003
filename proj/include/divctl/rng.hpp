#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace divctl {

// Every stochastic draw in the toolkit comes from one of these streams.
// A stream is keyed by (root seed, tag, index); the key is folded through
// SplitMix64 and the result seeds a std::mt19937_64 engine.
//
//   key = splitmix64(splitmix64(splitmix64(root) ^ tag) ^ index)
//
// Conversions are fixed here so that any reimplementation can reproduce them:
//   uniform(): (next >> 11) * 2^-53, in [0, 1)
//   normal():  Box-Muller, cos branch only, u1 = 1 - uniform(), u2 = uniform()
//   below(n):  floor(uniform() * n)
enum class Stream : std::uint64_t {
    init = 1,      // parameter initialization
    data = 2,      // base image index and condition per batch item
    noise = 3,     // timestep and eps per batch item
    dropout = 4,   // dropout masks
    shapes = 5,    // synthetic image generator, index = image number
    text = 6,      // instruction token table, index = table row
    vision = 7,    // frozen image encoder projection
    heldout = 8,   // evaluation set
    sample = 9,    // ancestral sampling noise
    adapt = 10,    // fresh tailors and adaptation data
    transform = 11 // condition transforms with internal randomness
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, Stream tag, std::uint64_t index = 0);

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t root, Stream tag, std::uint64_t index = 0)
        : engine_(derive_seed(root, tag, index)) {}

    std::uint64_t next_u64() { return engine_(); }
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    std::size_t below(std::size_t n);

private:
    std::mt19937_64 engine_;
};

}  // namespace divctl
