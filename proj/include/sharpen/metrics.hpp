#pragma once

#include <vector>

#include "sharpen/array.hpp"
#include "sharpen/rewards.hpp"

namespace sharpen {

struct Bandwidth {
  enum class Kind { median, fixed } kind = Kind::median;
  double value = 0.0;  // kernel length scale for Kind::fixed

  static Bandwidth median() { return {}; }
  static Bandwidth fixed(double h) { return {Kind::fixed, h}; }
};

/// Median pairwise Euclidean distance over the union of both sets.
double median_distance(const Array& a, const Array& b);

/// Unbiased MMD^2 with k(x, y) = exp(-||x - y||^2 / (2 h^2)).
double mmd2(const Array& a, const Array& b, Bandwidth bandwidth = Bandwidth::median());

struct ModeFractions {
  std::vector<double> fractions;  // one per mixture mean
  double outside = 0.0;
};

/// Share of rows within radius * std of each mean. Balls must not overlap.
ModeFractions mode_fractions(const Array& samples, const MixtureSpec& mixture, double radius_in_stds);

struct MeanStd {
  double mean = 0.0;
  double std_dev = 0.0;  // sample standard deviation (n - 1)
  std::size_t count = 0;
  double sem() const;
};

MeanStd mean_std(std::span<const double> values);

}  // namespace sharpen
