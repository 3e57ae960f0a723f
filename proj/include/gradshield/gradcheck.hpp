#pragma once

#include <functional>

#include "gradshield/graph.hpp"

namespace gradshield {

// Scalar-valued expression of a single input, evaluated on the 64-bit path.
using ScalarFn = std::function<Var<double>(Graph<double>&, Var<double>)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// Throws NumericError if f is non-finite at a perturbed point.
double grad_check(const ScalarFn& f, const TensorD& x, double eps = 1e-5);

}  // namespace gradshield
