#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sharpen/autodiff.hpp"

namespace sharpen {

enum class Activation { silu, tanh };

/// Fully connected stack: widths[0] -> ... -> widths.back(), activation between
/// layers, linear output. Parameters alternate weight (in x out), bias (1 x out).
struct MlpLayout {
  std::vector<std::size_t> widths;
  Activation activation = Activation::silu;
};

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)); zero biases.
Array glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::uint64_t& state);

void append_mlp_parameters(const MlpLayout& layout, std::uint64_t seed, const std::string& prefix,
                           std::vector<Array>& params, std::vector<std::string>& names);

/// Applies the stack using `params` (2 per layer) on `input`.
Var mlp_forward(const MlpLayout& layout, std::span<const Var> params, Var input);

}  // namespace sharpen
