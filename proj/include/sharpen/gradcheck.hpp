#pragma once

#include <functional>

#include "sharpen/autodiff.hpp"

namespace sharpen {

/// Scalar-valued function of a single array input, evaluated on a tape.
using TapeFunction = std::function<Var(Tape&, Var)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// `perturbation` must lie in [1e-7, 1e-3].
double gradcheck(const TapeFunction& f, const Array& point, double perturbation = 1e-5);

/// Gradient of `f` at `point` by reverse mode.
Array gradient(const TapeFunction& f, const Array& point);

}  // namespace sharpen
