#include "sharpen/array.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sharpen/error.hpp"

namespace sharpen {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("array dimensions must be positive, got " + shape_string(shape_));
}

Array::Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("array dimensions must be positive, got " + shape_string(shape_));
  if (shape_size(shape_) != data_.size())
    throw ShapeError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
}

Array Array::scalar(double value) { return Array(Shape{}, std::vector<double>{value}); }

Array Array::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Array({rows, cols}, std::vector<double>(values));
}

Array Array::row(std::span<const double> values) {
  return Array({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

Array Array::identity(std::size_t n) {
  Array out({n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

std::size_t Array::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Array::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  return 1;
}

Array Array::row_copy(std::size_t r) const {
  auto span = row_span(r);
  return Array({1, cols()}, std::vector<double>(span.begin(), span.end()));
}

double Array::item() const {
  if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_string(shape_));
  return data_[0];
}

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Array matmul_plain(const Array& a, const Array& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Array out({n, m});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Array stack_rows(std::span<const Array> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t d = rows.front().cols();
  std::size_t total = 0;
  for (const auto& r : rows) {
    if (r.cols() != d) throw ShapeError("stack_rows: column mismatch");
    total += r.rows();
  }
  std::vector<double> values;
  values.reserve(total * d);
  for (const auto& r : rows) values.insert(values.end(), r.storage().begin(), r.storage().end());
  return Array({total, d}, std::move(values));
}

double max_abs_diff(const Array& a, const Array& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace sharpen
