#pragma once

#include <cstdint>
#include <string_view>

namespace mic {

/// FNV-1a 64-bit hash.
std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Sub-seed for one purpose of a run, derived by hashing (seed, purpose,
/// index). Every random stream in the project is keyed this way.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose,
                          std::uint64_t index = 0);

}  // namespace mic
