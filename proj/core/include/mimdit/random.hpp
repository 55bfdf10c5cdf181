#pragma once

#include <cstdint>
#include <random>

#include "mimdit/tensor.hpp"

namespace mimdit {

using Rng = std::mt19937_64;

/// Independent deterministic stream for (seed, stream) pairs.
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

Tensor normal_tensor(Shape shape, double stddev, Rng& rng);
Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng);
double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);

}  // namespace mimdit
