#pragma once

#include <span>
#include <string>

#include "gradshield/tensor.hpp"

namespace gradshield {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kDefaultNcThreshold = 0.96;

// Peak signal-to-noise ratio on the [0,1] scale; kPsnrCap when MSE < 1e-10.
double psnr(const Tensor& a, const Tensor& b);

// Multi-scale SSIM (7x7 Gaussian window, sigma 1.5, 2x2 mean pooling between scales).
// Exponents are the first `scales` standard MS-SSIM weights renormalised to sum to one.
double ms_ssim(const Tensor& a, const Tensor& b, int scales = 3);

// Normalised cross-correlation without mean removal.
double nc(const Tensor& a, const Tensor& b);

// Fraction of NxCxHxW batch items whose NC with `w` exceeds `threshold`.
double success_rate(const Tensor& decoded, const Tensor& w, double threshold = kDefaultNcThreshold);

struct MetricsRecord {
  std::string name;
  double psnr_db = 0.0;
  double ms_ssim = 0.0;
  double nc = 0.0;
  double sr = 0.0;
};

}  // namespace gradshield
