#include "gradshield/dgs.hpp"

#include <algorithm>
#include <random>

#include "gradshield/tasks.hpp"

namespace gradshield {

double PMatrix::max_lambda() const {
  return lambdas.empty() ? 0.0 : *std::max_element(lambdas.begin(), lambdas.end());
}

PMatrix make_P(std::size_t dim, double lambda_min, double lambda_max, std::uint64_t seed) {
  if (!(lambda_min > 0) || !(lambda_max > 0)) {
    throw ShapeError("make_P: eigenvalue bounds must be positive, got [" + std::to_string(lambda_min) + ", " +
                     std::to_string(lambda_max) + "]");
  }
  if (lambda_min > lambda_max) throw ShapeError("make_P: lambda_min exceeds lambda_max");
  PMatrix p;
  p.lambda_min = lambda_min;
  p.lambda_max = lambda_max;
  p.seed = seed;
  p.lambdas.resize(dim);
  if (lambda_min == lambda_max) {
    std::fill(p.lambdas.begin(), p.lambdas.end(), lambda_min);
    return p;
  }
  std::mt19937_64 rng(mix_seed(seed, 0x504d6174));
  std::uniform_real_distribution<double> u(lambda_min, lambda_max);
  for (auto& l : p.lambdas) l = std::clamp(u(rng), lambda_min, lambda_max);
  return p;
}

Tensor reorient(const Tensor& z, const DGSConfig& cfg) {
  if (!cfg.p) throw ShapeError("reorient: configuration has no P");
  return reorient(z, *cfg.p, cfg.w);
}

TensorD effective_z_gradient(const TensorD& z, const PMatrix& p, const Tensor& w, const Tensor& w0,
                             const TensorD& interference) {
  detail::check_dims(p, w);
  if (w0.shape != w.shape) throw ShapeError("effective_z_gradient: W0 shape differs from W");
  if (!interference.data.empty() && interference.shape != z.shape) {
    throw ShapeError("effective_z_gradient: interference " + shape_str(interference.shape) + " vs Z " +
                     shape_str(z.shape));
  }
  const std::size_t plane = w.size();
  if (z.size() % plane != 0) throw ShapeError("effective_z_gradient: Z " + shape_str(z.shape) + " vs mark");
  TensorD g(z.shape);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double lam = p.lambdas[i % plane];
    const double wi = w.data[i % plane], w0i = w0.data[i % plane];
    const double f = interference.data.empty() ? 0.0 : interference.data[i];
    const double zstar = -lam * z.data[i] + (lam + 1.0) * wi + f;
    g.data[i] = -2.0 * lam * (zstar - w0i);
  }
  return g;
}

Tensor query_decoder_api(const ModelParams& decoder, const DGSConfig& cfg, const Tensor& s) {
  Graph<float> g;
  const auto bound = bind<float>(g, decoder, false);
  return decoder_api(bound, cfg, constant(g, s)).response.value();
}

}  // namespace gradshield
