#include "sharpen/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "sharpen/error.hpp"

namespace sharpen {

namespace {

double sq_dist(const Array& a, std::size_t i, const Array& b, std::size_t j) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double d = a(i, k) - b(j, k);
    acc += d * d;
  }
  return acc;
}

void check_sets(const Array& a, const Array& b) {
  if (a.rows() == 0 || b.rows() == 0) throw ShapeError("mmd2: sample sets must be nonempty");
  if (a.cols() != b.cols()) {
    throw ShapeError("mmd2: dimension mismatch (" + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()) + ")");
  }
}

}  // namespace

double median_distance(const Array& a, const Array& b) {
  check_sets(a, b);
  const Array u = stack_rows(std::vector<Array>{a, b});
  const std::size_t n = u.rows();
  std::vector<double> d;
  d.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d.push_back(sq_dist(u, i, u, j));
  if (d.empty()) throw ShapeError("median_distance: need at least two points");
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return std::sqrt(*mid);
}

double mmd2(const Array& a, const Array& b, Bandwidth bandwidth) {
  check_sets(a, b);
  if (a.rows() < 2 || b.rows() < 2) throw ShapeError("mmd2: unbiased estimate needs at least two samples per set");
  const double h = bandwidth.kind == Bandwidth::Kind::median ? median_distance(a, b) : bandwidth.value;
  if (!(h > 0.0)) throw NumericError("mmd2: bandwidth must be positive");
  const double gamma = 1.0 / (2.0 * h * h);
  const auto within = [&](const Array& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = i + 1; j < x.rows(); ++j) s += std::exp(-gamma * sq_dist(x, i, x, j));
    const double n = static_cast<double>(x.rows());
    return 2.0 * s / (n * (n - 1.0));
  };
  double cross = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) cross += std::exp(-gamma * sq_dist(a, i, b, j));
  cross /= static_cast<double>(a.rows()) * static_cast<double>(b.rows());
  return within(a) + within(b) - 2.0 * cross;
}

ModeFractions mode_fractions(const Array& samples, const MixtureSpec& mixture, double radius_in_stds) {
  if (!(radius_in_stds > 0.0)) throw ConfigError("mode_fractions: radius must be positive");
  mixture.validate();
  const double r = radius_in_stds * mixture.std_dev;
  const auto& mu = mixture.means;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (mu[i].size() != samples.cols()) throw ShapeError("mode_fractions: mean dimension does not match samples");
    for (std::size_t j = i + 1; j < mu.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < mu[i].size(); ++k) d2 += (mu[i][k] - mu[j][k]) * (mu[i][k] - mu[j][k]);
      if (std::sqrt(d2) <= 2.0 * r) {
        throw ConfigError("mode_fractions: balls of radius " + std::to_string(r) + " around modes " +
                          std::to_string(i) + " and " + std::to_string(j) + " overlap");
      }
    }
  }
  std::vector<std::size_t> counts(mu.size(), 0);
  std::size_t outside = 0;
  for (std::size_t row = 0; row < samples.rows(); ++row) {
    bool hit = false;
    for (std::size_t m = 0; m < mu.size() && !hit; ++m) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < samples.cols(); ++k) d2 += (samples(row, k) - mu[m][k]) * (samples(row, k) - mu[m][k]);
      if (d2 <= r * r) {
        ++counts[m];
        hit = true;
      }
    }
    if (!hit) ++outside;
  }
  const double n = static_cast<double>(samples.rows());
  ModeFractions out;
  for (std::size_t c : counts) out.fractions.push_back(static_cast<double>(c) / n);
  out.outside = static_cast<double>(outside) / n;
  return out;
}

double MeanStd::sem() const { return count > 0 ? std_dev / std::sqrt(static_cast<double>(count)) : 0.0; }

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  out.count = values.size();
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double acc = 0.0;
    for (double v : values) acc += (v - out.mean) * (v - out.mean);
    out.std_dev = std::sqrt(acc / static_cast<double>(values.size() - 1));
  }
  return out;
}

}  // namespace sharpen
