#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sharpen/array.hpp"

namespace sharpen {

/// AdamW hyperparameters. Defaults are the fine-tuning settings
/// (beta1 = 0, beta2 = 0.99, no weight decay).
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

struct OptimState {
  std::vector<Array> first_moment;
  std::vector<Array> second_moment;
  std::uint64_t step = 0;
};

OptimState make_optim_state(std::span<const Array> params);

/// One decoupled-weight-decay Adam update, in place. `names` labels the
/// parameters in error messages (optional).
void adamw_step(std::span<Array> params, std::span<const Array> grads, OptimState& state, const AdamConfig& config,
                std::span<const std::string> names = {});

}  // namespace sharpen
