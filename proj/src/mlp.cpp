#include "sharpen/mlp.hpp"

#include <cmath>

#include "sharpen/error.hpp"
#include "sharpen/rng.hpp"

namespace sharpen {

Array glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::uint64_t& state) {
  Rng rng(state);
  state = rng();
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Array w({fan_in, fan_out});
  for (auto& v : w.storage()) v = dist(rng);
  return w;
}

void append_mlp_parameters(const MlpLayout& layout, std::uint64_t seed, const std::string& prefix,
                           std::vector<Array>& params, std::vector<std::string>& names) {
  if (layout.widths.size() < 2) throw ConfigError("mlp needs at least input and output widths");
  std::uint64_t state = seed;
  for (std::size_t l = 0; l + 1 < layout.widths.size(); ++l) {
    params.push_back(glorot_uniform(layout.widths[l], layout.widths[l + 1], state));
    names.push_back(prefix + "layer" + std::to_string(l) + ".weight");
    params.emplace_back(Shape{1, layout.widths[l + 1]});
    names.push_back(prefix + "layer" + std::to_string(l) + ".bias");
  }
}

Var mlp_forward(const MlpLayout& layout, std::span<const Var> params, Var input) {
  const std::size_t layers = layout.widths.size() - 1;
  if (params.size() != 2 * layers) throw ShapeError("mlp: expected " + std::to_string(2 * layers) + " parameters");
  Var h = input;
  for (std::size_t l = 0; l < layers; ++l) {
    h = matmul(h, params[2 * l]) + params[2 * l + 1];
    if (l + 1 < layers) h = layout.activation == Activation::silu ? silu(h) : tanh(h);
  }
  return h;
}

}  // namespace sharpen
