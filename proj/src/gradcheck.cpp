#include "sharpen/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "sharpen/error.hpp"

namespace sharpen {

namespace {

double evaluate(const TapeFunction& f, const Array& point) {
  Tape tape;
  Var out = f(tape, tape.leaf(point));
  if (out.value().size() != 1)
    throw ShapeError("gradcheck: function output must be scalar, got " + shape_string(out.value().shape()));
  return out.value().item();
}

}  // namespace

Array gradient(const TapeFunction& f, const Array& point) {
  Tape tape;
  Var x = tape.leaf(point);
  Var out = f(tape, x);
  if (out.value().size() != 1)
    throw ShapeError("gradcheck: function output must be scalar, got " + shape_string(out.value().shape()));
  return tape.backward(out).of(x);
}

double gradcheck(const TapeFunction& f, const Array& point, double perturbation) {
  if (!(perturbation >= 1e-7 && perturbation <= 1e-3))
    throw ConfigError("gradcheck: perturbation must lie in [1e-7, 1e-3]");
  const Array analytic = gradient(f, point);
  double worst = 0.0;
  Array probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    probe[i] = x0 + perturbation;
    const double up = evaluate(f, probe);
    probe[i] = x0 - perturbation;
    const double down = evaluate(f, probe);
    probe[i] = x0;
    const double numeric = (up - down) / (2.0 * perturbation);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace sharpen
