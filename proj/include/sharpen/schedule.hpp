#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sharpen/array.hpp"

namespace sharpen {

enum class ScheduleKind { cosine, linear };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Variance-preserving discrete noise schedule on the grid t = 0..T.
///
/// cosine: alpha_t = cos(phi_t), sigma_t = sin(phi_t) with phi linear in t,
///         sigma_0 = 1e-3 and alpha_T = 1e-2.
/// linear: alpha_t^2 = exp(-(b0 u + (b1 - b0) u^2 / 2)), u = t / T,
///         b0 = 0.1, b1 = 20, sigma_0 clamped to 1e-3.
struct Schedule {
  ScheduleKind kind = ScheduleKind::cosine;
  int T = 0;
  std::vector<double> alpha;
  std::vector<double> sigma;

  double alpha_at(int t) const;
  double sigma_at(int t) const;
};

inline constexpr int kDefaultSteps = 50;
inline constexpr double kSigmaFloor = 1e-3;

Schedule make_schedule(ScheduleKind kind, int T = kDefaultSteps);

/// alpha_t * x0 + sigma_t * eps.
Array forward_noise(const Array& x0, int t, const Array& eps, const Schedule& schedule);

/// One reverse transition between grid indices `from` > `to`. Arrays are
/// (rows x D); `log_prob` holds one entry per row when the step was stochastic.
struct SamplerStep {
  int from = 0;
  int to = 0;
  Array next;
  Array predicted_clean;
  std::optional<std::vector<double>> log_prob;
};

SamplerStep ddim_step(const Array& x_t, const Array& eps_hat, int t, int s, const Schedule& schedule);

/// Variance of the stochastic reverse transition t -> s, scaled by eta^2:
/// eta^2 * sigma_s^2 / sigma_t^2 * (1 - alpha_t^2 / alpha_s^2).
double ancestral_variance(int t, int s, const Schedule& schedule, double eta = 1.0);

/// The transition mean is x_coef * x_t + eps_coef * eps_hat.
struct TransitionCoefficients {
  double x_coef;
  double eps_coef;
  double variance;
};

TransitionCoefficients ancestral_coefficients(int t, int s, const Schedule& schedule, double eta = 1.0);

/// Stochastic reverse step: mean alpha_s x0_hat + sqrt(sigma_s^2 - var) eps_hat,
/// which for eta = 1 is the Gaussian posterior q(x_s | x_t, x0_hat). With eta = 0
/// it coincides with ddim_step and no log-probability is reported.
SamplerStep ancestral_step(const Array& x_t, const Array& eps_hat, int t, int s, const Schedule& schedule,
                           const Array& noise, double eta = 1.0);

/// Per-row Gaussian log-density of `x` under N(mean, variance I).
std::vector<double> gaussian_log_prob(const Array& x, const Array& mean, double variance);

/// Clean-sample estimator used for reward evaluation.
struct EstimatorMode {
  enum class Kind { tweedie, ode } kind = Kind::tweedie;
  int substeps = 1;

  static EstimatorMode tweedie() { return {}; }
  static EstimatorMode ode(int k) { return {Kind::ode, k}; }
  std::string describe() const;
};

EstimatorMode parse_estimator(const std::string& text);

/// Noise predictor evaluated at (x_t, grid index t).
using EpsPredictor = std::function<Array(const Array& x_t, int t)>;

/// tweedie: (x_t - sigma_t eps)/alpha_t. ode(k): k-1 DDIM substeps on the
/// uniform sub-grid round(t (k - j) / k) followed by a tweedie jump to clean,
/// so ode(1) is tweedie. Requires 1 <= k <= t for t > 0.
Array estimate_x0(const Array& x_t, int t, const EpsPredictor& predictor, const Schedule& schedule,
                  EstimatorMode mode = EstimatorMode::tweedie());

}  // namespace sharpen
