#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace agnn {

using Rng = std::mt19937_64;

/// Independent sub-seed for a named random stream ("split", "init", ...), so
/// each consumer of randomness is reproducible on its own.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream);

inline Rng make_rng(std::uint64_t base, std::string_view stream) { return Rng(derive_seed(base, stream)); }

}  // namespace agnn
