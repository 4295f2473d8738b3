#pragma once

#include <cstdint>
#include <random>

#include "sharpen/array.hpp"

namespace sharpen {

using Rng = std::mt19937_64;

/// Array of i.i.d. standard normal draws.
Array standard_normal(const Shape& shape, Rng& rng);

/// Uniform integer in [lo, hi].
int uniform_int(Rng& rng, int lo, int hi);
double uniform_real(Rng& rng);

/// Fresh 64-bit seed drawn from `rng`.
std::uint64_t draw_seed(Rng& rng);

}  // namespace sharpen
