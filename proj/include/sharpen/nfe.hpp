#pragma once

#include <cstdint>

namespace sharpen {

/// Denoiser forward-evaluation counter. Counts only grow.
struct NfeLedger {
  std::uint64_t generation = 0;
  std::uint64_t reward = 0;
  std::uint64_t search = 0;
  std::uint64_t samples = 0;  // final samples returned to the caller

  std::uint64_t total() const { return generation + reward + search; }
  double per_sample() const { return samples ? static_cast<double>(total()) / static_cast<double>(samples) : 0.0; }
};

}  // namespace sharpen
