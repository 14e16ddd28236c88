#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ecoreg {

using Engine = std::mt19937_64;

// Seed for a named substream of `base`. Every random draw in the library goes
// through a substream so that adding a consumer never shifts another's draws.
std::uint64_t substream_seed(std::uint64_t base, std::string_view name);

inline Engine substream(std::uint64_t base, std::string_view name) {
    return Engine(substream_seed(base, name));
}

}  // namespace ecoreg
