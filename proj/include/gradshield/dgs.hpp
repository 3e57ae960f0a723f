#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "gradshield/graph.hpp"
#include "gradshield/metrics.hpp"
#include "gradshield/nn.hpp"

namespace gradshield {

// Diagonal positive-definite P, one eigenvalue per mark pixel.
struct PMatrix {
  std::vector<double> lambdas;
  double lambda_min = 1.0;
  double lambda_max = 1.0;
  std::uint64_t seed = 0;

  double max_lambda() const;
};

// Eigenvalues i.i.d. uniform in [lambda_min, lambda_max]; min == max == 1 gives P = I.
PMatrix make_P(std::size_t dim, double lambda_min, double lambda_max, std::uint64_t seed);

struct DGSConfig {
  std::optional<PMatrix> p;
  Tensor w;   // 1x1xHxW watermark
  Tensor w0;  // 1x1xHxW null mark
  double nc_threshold = kDefaultNcThreshold;
  bool enabled = true;

  // Reorientation only happens when enabled and P is present.
  bool active() const { return enabled && p.has_value(); }
};

namespace detail {

// Repeats per-pixel values over the batch axis of `like` (Nx1xHxW).
template <typename T, typename Src>
BasicTensor<T> tile_like(const Shape& like, const Src& per_pixel, std::size_t plane) {
  if (like.empty() || numel(like) != like[0] * plane) {
    throw ShapeError("dgs: tensor " + shape_str(like) + " does not hold whole " + std::to_string(plane) +
                     "-pixel marks");
  }
  BasicTensor<T> out(like);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<T>(per_pixel[i % plane]);
  return out;
}

inline void check_dims(const PMatrix& p, const Tensor& w) {
  if (p.lambdas.size() != w.size()) {
    throw ShapeError("dgs: P has " + std::to_string(p.lambdas.size()) + " eigenvalues but mark has " +
                     std::to_string(w.size()) + " pixels");
  }
}

}  // namespace detail

// Z* = -P Z + (P + I) W, evaluated as W + P (W - Z) in wider precision: Z = W is an exact
// fixed point and P = I gives exactly 2W - Z. Output is not clipped.
// Z may hold a batch of marks (Nx1xHxW).
template <typename T>
BasicTensor<T> reorient(const BasicTensor<T>& z, const PMatrix& p, const Tensor& w) {
  detail::check_dims(p, w);
  const auto wt = detail::tile_like<T>(z.shape, w.data, w.size());
  const auto lam = detail::tile_like<T>(z.shape, p.lambdas, w.size());
  BasicTensor<T> out(z.shape);
  for (std::size_t i = 0; i < z.size(); ++i) out.data[i] = reflect_about(z.data[i], wt.data[i], lam.data[i]);
  return out;
}

// Same map on the autodiff graph, bit-identical values; dZ*/dZ = -P.
template <typename T>
Var<T> reorient(Var<T> z, const PMatrix& p, const Tensor& w) {
  detail::check_dims(p, w);
  Graph<T>& g = *z.graph;
  auto wt = constant(g, detail::tile_like<T>(z.shape(), w.data, w.size()));
  auto lam = constant(g, detail::tile_like<T>(z.shape(), p.lambdas, w.size()));
  return reflect(z, wt, lam);
}

Tensor reorient(const Tensor& z, const DGSConfig& cfg);

// Z = -P^-1 Z* + (I + P^-1) W, evaluated as W + (W - Z*) / P. Rejects any zero eigenvalue.
template <typename T>
BasicTensor<T> invert_reorient(const BasicTensor<T>& zstar, const PMatrix& p, const Tensor& w) {
  detail::check_dims(p, w);
  for (double l : p.lambdas) {
    if (!(l > 0)) throw ShapeError("invert_reorient: P must have strictly positive eigenvalues");
  }
  const auto wt = detail::tile_like<T>(zstar.shape, w.data, w.size());
  const auto lam = detail::tile_like<T>(zstar.shape, p.lambdas, w.size());
  BasicTensor<T> out(zstar.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = wt.data[i] + (wt.data[i] - zstar.data[i]) / lam.data[i];
  }
  return out;
}

// Attacker's guess assuming P = I: Z~ = -Z* + 2 W_est.
template <typename T>
BasicTensor<T> approx_invert(const BasicTensor<T>& zstar, const BasicTensor<T>& w_est) {
  const auto est = detail::tile_like<T>(zstar.shape, w_est.data, w_est.size());
  BasicTensor<T> out(zstar.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = T(2) * est.data[i] - zstar.data[i];
  return out;
}

template <typename T>
Var<T> approx_invert(Var<T> zstar, const BasicTensor<T>& w_est) {
  auto est = constant(*zstar.graph, detail::tile_like<T>(zstar.shape(), w_est.data, w_est.size()));
  return scale(est, 2.0) - zstar;
}

// d/dZ of sum((-P Z + (P + I) W + F - W0)^2) = -2 P (-P Z + (P + I) W + F - W0).
// F may be empty (treated as zero). Computed in the expanded form, independent of reorient().
TensorD effective_z_gradient(const TensorD& z, const PMatrix& p, const Tensor& w, const Tensor& w0,
                             const TensorD& interference = {});

template <typename T>
struct ApiResponse {
  Var<T> raw;        // decoder output Z
  Var<T> response;   // what the API returns
  std::vector<bool> reoriented;  // per batch item
};

// Protected decoder API. Per batch item: reorient when NC(D(S), W) exceeds the threshold,
// otherwise return D(S) unchanged. The response stays on the caller's graph.
template <typename T>
ApiResponse<T> decoder_api(const BoundParams<T>& decoder, const DGSConfig& cfg, Var<T> s) {
  ApiResponse<T> r;
  r.raw = decoder_forward(decoder, s);
  const auto& z = r.raw.value();
  const std::size_t n = z.dim(0);
  r.reoriented.assign(n, false);
  if (!cfg.active()) {
    r.response = r.raw;
    return r;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.reoriented[i] = nc(batch_item(z, i).template cast<float>(), cfg.w) > cfg.nc_threshold;
    hits += r.reoriented[i];
  }
  if (hits == 0) {
    r.response = r.raw;
  } else if (hits == n) {
    r.response = reorient(r.raw, *cfg.p, cfg.w);
  } else {
    std::vector<Var<T>> parts;
    for (std::size_t i = 0; i < n; ++i) {
      auto item = slice(r.raw, i, i + 1, 0);
      parts.push_back(r.reoriented[i] ? reorient(item, *cfg.p, cfg.w) : item);
    }
    r.response = concat<T>(std::span<const Var<T>>(parts), 0);
  }
  return r;
}

// Out-of-graph convenience: response values for a batch of query images.
Tensor query_decoder_api(const ModelParams& decoder, const DGSConfig& cfg, const Tensor& s);

}  // namespace gradshield
