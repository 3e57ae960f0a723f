#include "gradshield/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace gradshield {

namespace {

double evaluate(const ScalarFn& f, const TensorD& x) {
  Graph<double> g;
  const Var<double> in = constant(g, x);
  const Var<double> out = f(g, in);
  if (out.value().size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace

double grad_check(const ScalarFn& f, const TensorD& x, double eps) {
  if (!(eps > 0)) throw ShapeError("grad_check: eps must be positive");

  Graph<double> g;
  const Var<double> in = parameter(g, x);
  const Var<double> out = f(g, in);
  if (out.value().size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  const auto grads = g.backward(out.id);
  const TensorD& analytic = grads.at(in.id);

  double worst = 0.0;
  TensorD probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = evaluate(f, probe);
    probe[i] = orig - eps;
    const double down = evaluate(f, probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace gradshield
