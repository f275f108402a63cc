#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "apd/hash.hpp"

namespace apd {

// All randomness flows from one root seed. Component streams are derived
// by hashing the component name into the root, so adding a new consumer
// never perturbs existing streams.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component) {
    std::uint64_t h = fnv1a64(&root, sizeof(root));
    return fnv1a64(component, h);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component,
                                 std::uint64_t index) {
    std::uint64_t h = derive_seed(root, component);
    return fnv1a64(&index, sizeof(index), h);
}

inline std::mt19937_64 make_rng(std::uint64_t root, std::string_view component) {
    return std::mt19937_64(derive_seed(root, component));
}

inline std::mt19937_64 make_rng(std::uint64_t root, std::string_view component,
                                std::uint64_t index) {
    return std::mt19937_64(derive_seed(root, component, index));
}

}  // namespace apd
