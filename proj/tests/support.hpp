#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sharpen/denoiser.hpp"
#include "sharpen/schedule.hpp"

namespace testing_support {

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("sharpen_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline sharpen::Denoiser small_denoiser(int num_classes = 0, std::uint64_t seed = 3, int hidden = 16) {
  sharpen::DenoiserConfig c;
  c.num_classes = num_classes;
  c.hidden = hidden;
  c.depth = 2;
  c.time_dim = 8;
  c.cond_dim = 4;
  c.init_seed = seed;
  return sharpen::Denoiser(c);
}

/// Exact noise predictor for data x0 ~ N(mean, s^2 I):
/// E[eps | x_t] = sigma_t (x_t - alpha_t mean) / (alpha_t^2 s^2 + sigma_t^2).
inline sharpen::EpsPredictor gaussian_predictor(const sharpen::Schedule& sched, std::vector<double> mean, double s) {
  return [&sched, mean, s](const sharpen::Array& x, int t) {
    const double a = sched.alpha_at(t), sg = sched.sigma_at(t);
    const double v = a * a * s * s + sg * sg;
    sharpen::Array out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t j = 0; j < x.cols(); ++j) out(r, j) = sg * (x(r, j) - a * mean[j]) / v;
    return out;
  };
}

}  // namespace testing_support
