#include "gradshield/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace gradshield {

namespace {

void same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
};

Plane as_plane(const Tensor& t) {
  if (t.rank() < 2) throw ShapeError("ms_ssim: need at least 2 dims, got " + shape_str(t.shape));
  Plane p;
  p.h = t.shape[t.rank() - 2];
  p.w = t.shape[t.rank() - 1];
  if (p.h * p.w != t.size()) throw ShapeError("ms_ssim: expects a single plane, got " + shape_str(t.shape));
  p.v.assign(t.data.begin(), t.data.end());
  return p;
}

Plane downsample(const Plane& p) {
  Plane out;
  out.h = p.h / 2;
  out.w = p.w / 2;
  out.v.resize(out.h * out.w);
  for (std::size_t y = 0; y < out.h; ++y)
    for (std::size_t x = 0; x < out.w; ++x)
      out.v[y * out.w + x] = 0.25 * (p.v[2 * y * p.w + 2 * x] + p.v[2 * y * p.w + 2 * x + 1] +
                                     p.v[(2 * y + 1) * p.w + 2 * x] + p.v[(2 * y + 1) * p.w + 2 * x + 1]);
  return out;
}

constexpr std::size_t kWindow = 7;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr std::array<double, 5> kStandardWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

std::array<double, kWindow * kWindow> gaussian_window() {
  std::array<double, kWindow * kWindow> g{};
  double total = 0;
  const double c = (kWindow - 1) / 2.0;
  for (std::size_t y = 0; y < kWindow; ++y)
    for (std::size_t x = 0; x < kWindow; ++x) {
      const double dy = y - c, dx = x - c;
      g[y * kWindow + x] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
      total += g[y * kWindow + x];
    }
  for (auto& v : g) v /= total;
  return g;
}

struct SsimTerms {
  double luminance;
  double contrast_structure;
};

// Mean luminance and contrast-structure terms over all valid window positions.
SsimTerms ssim_terms(const Plane& a, const Plane& b) {
  static const auto win = gaussian_window();
  const std::size_t oh = a.h - kWindow + 1, ow = a.w - kWindow + 1;
  double lum = 0, cs = 0;
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t ky = 0; ky < kWindow; ++ky)
        for (std::size_t kx = 0; kx < kWindow; ++kx) {
          const double g = win[ky * kWindow + kx];
          const double va = a.v[(y + ky) * a.w + x + kx], vb = b.v[(y + ky) * b.w + x + kx];
          ma += g * va;
          mb += g * vb;
          saa += g * va * va;
          sbb += g * vb * vb;
          sab += g * va * vb;
        }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      lum += (2 * ma * mb + kC1) / (ma * ma + mb * mb + kC1);
      cs += (2 * cov + kC2) / (var_a + var_b + kC2);
    }
  }
  const double n = static_cast<double>(oh * ow);
  return {lum / n, cs / n};
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  same_shape("psnr", a, b);
  if (a.size() == 0) throw ShapeError("psnr: empty input");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ms_ssim(const Tensor& a, const Tensor& b, int scales) {
  same_shape("ms_ssim", a, b);
  if (scales < 1 || scales > static_cast<int>(kStandardWeights.size())) {
    throw ShapeError("ms_ssim: scales must be in [1, 5], got " + std::to_string(scales));
  }
  Plane pa = as_plane(a), pb = as_plane(b);
  const std::size_t coarsest = std::min(pa.h, pa.w) >> (scales - 1);
  if (coarsest < 8) {
    throw ShapeError("ms_ssim: " + shape_str(a.shape) + " too small for " + std::to_string(scales) + " scales");
  }
  double weight_sum = 0;
  for (int s = 0; s < scales; ++s) weight_sum += kStandardWeights[s];

  double result = 1.0;
  for (int s = 0; s < scales; ++s) {
    const double weight = kStandardWeights[s] / weight_sum;
    const SsimTerms t = ssim_terms(pa, pb);
    // Anti-correlated structure would make the fractional power undefined.
    result *= std::pow(std::max(0.0, t.contrast_structure), weight);
    if (s == scales - 1) {
      result *= std::pow(std::max(0.0, t.luminance), weight);
    } else {
      pa = downsample(pa);
      pb = downsample(pb);
    }
  }
  return std::clamp(result, 0.0, 1.0);
}

double nc(const Tensor& a, const Tensor& b) {
  same_shape("nc", a, b);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double va = a.data[i], vb = b.data[i];
    ab += va * vb;
    aa += va * va;
    bb += vb * vb;
  }
  if (aa == 0 && bb == 0) throw ShapeError("nc: undefined for two all-zero inputs");
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

double success_rate(const Tensor& decoded, const Tensor& w, double threshold) {
  if (decoded.rank() == 0 || decoded.dim(0) == 0) throw ShapeError("success_rate: empty batch");
  const std::size_t n = decoded.dim(0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (nc(batch_item(decoded, i), w) > threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace gradshield
