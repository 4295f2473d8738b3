#include "sharpen/rng.hpp"

namespace sharpen {

Array standard_normal(const Shape& shape, Rng& rng) {
  Array out(shape);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : out.storage()) v = normal(rng);
  return out;
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double uniform_real(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

std::uint64_t draw_seed(Rng& rng) { return rng(); }

}  // namespace sharpen
