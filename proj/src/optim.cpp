#include "sharpen/optim.hpp"

#include <cmath>

#include "sharpen/error.hpp"

namespace sharpen {

OptimState make_optim_state(std::span<const Array> params) {
  OptimState state;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.shape());
    state.second_moment.emplace_back(p.shape());
  }
  return state;
}

void adamw_step(std::span<Array> params, std::span<const Array> grads, OptimState& state, const AdamConfig& config,
                std::span<const std::string> names) {
  if (!(config.lr > 0.0)) throw ConfigError("adamw: learning rate must be positive");
  if (grads.size() != params.size()) throw ShapeError("adamw: parameter and gradient counts differ");
  if (state.first_moment.empty()) state = make_optim_state(params);
  if (state.first_moment.size() != params.size()) throw ShapeError("adamw: optimizer state does not match parameters");

  auto label = [&](std::size_t i) { return i < names.size() ? names[i] : "param[" + std::to_string(i) + "]"; };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || state.first_moment[i].shape() != params[i].shape())
      throw ShapeError("adamw: shape mismatch for " + label(i) + " " + shape_string(params[i].shape()) + " vs " +
                       shape_string(grads[i].shape()));
    if (!grads[i].all_finite()) throw NumericError("adamw: non-finite gradient for " + label(i));
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].storage();
    const auto& g = grads[i].storage();
    auto& m = state.first_moment[i].storage();
    auto& v = state.second_moment[i].storage();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= config.lr * (mhat / (std::sqrt(vhat) + config.epsilon) + config.weight_decay * p[k]);
    }
  }
}

}  // namespace sharpen
