#include "sharpen/schedule.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

#include "sharpen/error.hpp"

namespace sharpen {

namespace {

constexpr double kAlphaFloorCosine = 1e-2;
constexpr double kLinearBetaMin = 0.1;
constexpr double kLinearBetaMax = 20.0;
constexpr double kSingularAlpha = 1e-8;

void check_index(const Schedule& schedule, int t, const char* what) {
  if (t < 0 || t > schedule.T)
    throw ConfigError(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " +
                      std::to_string(schedule.T) + "]");
}

void check_same_shape(const Array& a, const Array& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
}

}  // namespace

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "cosine") return ScheduleKind::cosine;
  if (name == "linear") return ScheduleKind::linear;
  throw ConfigError("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::cosine ? "cosine" : "linear"; }

double Schedule::alpha_at(int t) const {
  check_index(*this, t, "schedule");
  return alpha[static_cast<std::size_t>(t)];
}

double Schedule::sigma_at(int t) const {
  check_index(*this, t, "schedule");
  return sigma[static_cast<std::size_t>(t)];
}

Schedule make_schedule(ScheduleKind kind, int T) {
  if (T < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
  Schedule s;
  s.kind = kind;
  s.T = T;
  s.alpha.resize(static_cast<std::size_t>(T) + 1);
  s.sigma.resize(static_cast<std::size_t>(T) + 1);
  for (int t = 0; t <= T; ++t) {
    const double u = static_cast<double>(t) / T;
    double a, sg;
    if (kind == ScheduleKind::cosine) {
      const double phi0 = std::asin(kSigmaFloor);
      const double phi1 = std::acos(kAlphaFloorCosine);
      const double phi = phi0 + (phi1 - phi0) * u;
      a = std::cos(phi);
      sg = std::sin(phi);
    } else {
      const double integral = kLinearBetaMin * u + 0.5 * (kLinearBetaMax - kLinearBetaMin) * u * u;
      if (t == 0) {
        sg = kSigmaFloor;
        a = std::sqrt(1.0 - sg * sg);
      } else {
        a = std::exp(-0.5 * integral);
        sg = std::sqrt(-std::expm1(-integral));
      }
    }
    s.alpha[static_cast<std::size_t>(t)] = a;
    s.sigma[static_cast<std::size_t>(t)] = sg;
  }
  return s;
}

Array forward_noise(const Array& x0, int t, const Array& eps, const Schedule& schedule) {
  check_index(schedule, t, "forward_noise");
  check_same_shape(x0, eps, "forward_noise");
  const double a = schedule.alpha_at(t), sg = schedule.sigma_at(t);
  Array out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + sg * eps[i];
  return out;
}

SamplerStep ddim_step(const Array& x_t, const Array& eps_hat, int t, int s, const Schedule& schedule) {
  check_index(schedule, t, "ddim_step");
  check_index(schedule, s, "ddim_step");
  if (s >= t) throw ConfigError("ddim_step: target index must precede source index");
  check_same_shape(x_t, eps_hat, "ddim_step");
  const double at = schedule.alpha_at(t), st = schedule.sigma_at(t);
  if (at < kSingularAlpha) throw NumericError("ddim_step: alpha_t below 1e-8");
  const double as = schedule.alpha_at(s), ss = schedule.sigma_at(s);
  SamplerStep step{t, s, Array(x_t.shape()), Array(x_t.shape()), std::nullopt};
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double x0 = (x_t[i] - st * eps_hat[i]) / at;
    step.predicted_clean[i] = x0;
    step.next[i] = as * x0 + ss * eps_hat[i];
  }
  return step;
}

double ancestral_variance(int t, int s, const Schedule& schedule, double eta) {
  const double at = schedule.alpha_at(t), st = schedule.sigma_at(t);
  const double as = schedule.alpha_at(s), ss = schedule.sigma_at(s);
  const double ratio = (at * at) / (as * as);
  return eta * eta * (ss * ss) / (st * st) * (1.0 - ratio);
}

TransitionCoefficients ancestral_coefficients(int t, int s, const Schedule& schedule, double eta) {
  check_index(schedule, t, "ancestral_step");
  check_index(schedule, s, "ancestral_step");
  if (t == 0) throw ConfigError("ancestral_step: no step below t = 0");
  if (s >= t) throw ConfigError("ancestral_step: target index must precede source index");
  const double at = schedule.alpha_at(t), st = schedule.sigma_at(t);
  if (at < kSingularAlpha) throw NumericError("ancestral_step: alpha_t below 1e-8");
  const double as = schedule.alpha_at(s), ss = schedule.sigma_at(s);
  const double var = ancestral_variance(t, s, schedule, eta);
  const double direction = var == 0.0 ? ss : std::sqrt(std::max(0.0, ss * ss - var));
  return {as / at, direction - as * st / at, var};
}

SamplerStep ancestral_step(const Array& x_t, const Array& eps_hat, int t, int s, const Schedule& schedule,
                           const Array& noise, double eta) {
  const TransitionCoefficients c = ancestral_coefficients(t, s, schedule, eta);
  check_same_shape(x_t, eps_hat, "ancestral_step");
  check_same_shape(x_t, noise, "ancestral_step");
  const double at = schedule.alpha_at(t), st = schedule.sigma_at(t);
  const double as = schedule.alpha_at(s);
  const double ss = schedule.sigma_at(s);
  const double direction = c.variance == 0.0 ? ss : std::sqrt(std::max(0.0, ss * ss - c.variance));
  const double std_dev = std::sqrt(c.variance);
  SamplerStep step{t, s, Array(x_t.shape()), Array(x_t.shape()), std::nullopt};
  Array mean(x_t.shape());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double x0 = (x_t[i] - st * eps_hat[i]) / at;
    step.predicted_clean[i] = x0;
    mean[i] = as * x0 + direction * eps_hat[i];
    step.next[i] = mean[i] + std_dev * noise[i];
  }
  if (c.variance > 0.0) step.log_prob = gaussian_log_prob(step.next, mean, c.variance);
  return step;
}

std::vector<double> gaussian_log_prob(const Array& x, const Array& mean, double variance) {
  check_same_shape(x, mean, "gaussian_log_prob");
  if (!(variance > 0.0)) throw NumericError("gaussian_log_prob: variance must be positive");
  const std::size_t rows = x.rows(), d = x.cols();
  const double norm = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * variance);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x[r * d + j] - mean[r * d + j];
      sq += diff * diff;
    }
    out[r] = norm - 0.5 * sq / variance;
  }
  return out;
}

std::string EstimatorMode::describe() const {
  return kind == Kind::tweedie ? "tweedie" : "ode(" + std::to_string(substeps) + ")";
}

EstimatorMode parse_estimator(const std::string& text) {
  if (text == "tweedie") return EstimatorMode::tweedie();
  if (text.rfind("ode(", 0) == 0 && text.back() == ')') {
    const std::string digits = text.substr(4, text.size() - 5);
    int k = 0;
    const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
    if (ec != std::errc{} || end != digits.data() + digits.size() || k < 1)
      throw ConfigError("ode estimator needs an integer k >= 1, got '" + text + "'");
    return EstimatorMode::ode(k);
  }
  throw ConfigError("unknown estimator '" + text + "' (expected tweedie or ode(k))");
}

Array estimate_x0(const Array& x_t, int t, const EpsPredictor& predictor, const Schedule& schedule,
                  EstimatorMode mode) {
  check_index(schedule, t, "estimate_x0");
  const int k = mode.kind == EstimatorMode::Kind::tweedie ? 1 : mode.substeps;
  if (k < 1) throw ConfigError("estimate_x0: ode(k) needs k >= 1");
  if (t > 0 && k > t)
    throw ConfigError("estimate_x0: ode(" + std::to_string(k) + ") needs at least " + std::to_string(k) +
                      " grid positions below t = " + std::to_string(t));
  Array x = x_t;
  int current = t;
  for (int j = 1; j < k; ++j) {
    const int next = static_cast<int>(std::lround(static_cast<double>(t) * (k - j) / k));
    x = ddim_step(x, predictor(x, current), current, next, schedule).next;
    current = next;
  }
  const Array eps = predictor(x, current);
  const double a = schedule.alpha_at(current), sg = schedule.sigma_at(current);
  if (a < kSingularAlpha) throw NumericError("estimate_x0: alpha_t below 1e-8");
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - sg * eps[i]) / a;
  return out;
}

}  // namespace sharpen
