#include "gradshield/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace gradshield {

std::string_view task_name(Task t) { return t == Task::Derain ? "derain" : "style"; }

Task parse_task(std::string_view name) {
  if (name == "derain") return Task::Derain;
  if (name == "style") return Task::Style;
  throw ShapeError("unknown task '" + std::string(name) + "'");
}

std::string_view pattern_name(MarkPattern p) { return p == MarkPattern::Logo ? "logo" : "checker"; }

MarkPattern parse_pattern(std::string_view name) {
  if (name == "logo") return MarkPattern::Logo;
  if (name == "checker") return MarkPattern::Checker;
  throw ShapeError("unknown watermark pattern '" + std::string(name) + "'");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finaliser
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

void check_size(std::size_t size) {
  if (size < 16) throw ShapeError("image size must be >= 16, got " + std::to_string(size));
}

Shape image_shape(std::size_t size) { return {1, 1, size, size}; }

// Rain streaks: mask of streak pixels and the additive intensity per pixel.
struct Rain {
  std::vector<float> add;
  std::vector<std::uint8_t> mask;
};

Rain make_rain(std::uint64_t seed, std::size_t size) {
  std::mt19937_64 rng(mix_seed(seed, 0x7261696e));
  std::uniform_int_distribution<int> count_d(8, 16);
  std::uniform_int_distribution<int> pos_d(0, static_cast<int>(size) - 1);
  std::uniform_int_distribution<int> len_d(static_cast<int>(size) / 4, static_cast<int>(size) / 2);
  std::uniform_real_distribution<float> amp_d(0.3f, 0.6f);
  const int dir = std::bernoulli_distribution(0.5)(rng) ? 1 : -1;

  Rain r{std::vector<float>(size * size, 0.f), std::vector<std::uint8_t>(size * size, 0)};
  const int streaks = count_d(rng);
  for (int s = 0; s < streaks; ++s) {
    int y = pos_d(rng), x = pos_d(rng);
    const int len = len_d(rng);
    const float amp = amp_d(rng);
    for (int k = 0; k < len; ++k, ++y, x += dir) {
      if (y < 0 || x < 0 || y >= static_cast<int>(size) || x >= static_cast<int>(size)) break;
      const std::size_t i = static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x);
      r.add[i] += amp;
      r.mask[i] = 1;
    }
  }
  return r;
}

}  // namespace

Tensor gen_base_image(std::uint64_t seed, std::size_t size) {
  check_size(size);
  std::mt19937_64 rng(mix_seed(seed, 0x62617365));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double n = static_cast<double>(size);

  struct Wave {
    double amp, fx, fy, phase;
  };
  std::array<Wave, 4> waves{};
  for (auto& w : waves) {
    w.amp = 0.5 + 0.5 * unit(rng);
    w.fx = 4.0 * unit(rng);
    w.fy = 4.0 * unit(rng);
    w.phase = 2.0 * std::numbers::pi * unit(rng);
  }
  struct Rect {
    double y0, x0, y1, x1, amp;
  };
  std::array<Rect, 2> rects{};
  for (auto& r : rects) {
    const double h = n * (0.2 + 0.4 * unit(rng));
    const double w = n * (0.2 + 0.4 * unit(rng));
    r.y0 = (n - h) * unit(rng);
    r.x0 = (n - w) * unit(rng);
    r.y1 = r.y0 + h;
    r.x1 = r.x0 + w;
    r.amp = (unit(rng) < 0.5 ? -1.0 : 1.0) * (1.0 + unit(rng));
  }

  constexpr double softness = 1.5;
  auto soft = [](double d) { return 1.0 / (1.0 + std::exp(-d / softness)); };
  std::vector<double> field(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / n, v = static_cast<double>(y) / n;
      double acc = 0;
      for (const auto& w : waves) acc += w.amp * std::cos(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
      for (const auto& r : rects) {
        const double yy = static_cast<double>(y) + 0.5, xx = static_cast<double>(x) + 0.5;
        acc += r.amp * soft(yy - r.y0) * soft(r.y1 - yy) * soft(xx - r.x0) * soft(r.x1 - xx);
      }
      field[y * size + x] = acc;
    }
  }
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const double span = *hi - *lo;
  Tensor img(image_shape(size));
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double v = span > 0 ? (field[i] - *lo) / span : 0.5;
    img.data[i] = std::clamp(static_cast<float>(v), 0.f, 1.f);
  }
  return img;
}

ImagePair gen_rain_pair(std::uint64_t seed, std::size_t size) {
  ImagePair p;
  p.x = gen_base_image(seed, size);
  p.x0 = p.x;
  const Rain rain = make_rain(seed, size);
  for (std::size_t i = 0; i < p.x0.size(); ++i) {
    if (rain.mask[i]) p.x0.data[i] = std::clamp(p.x.data[i] + rain.add[i], 0.f, 1.f);
  }
  return p;
}

Tensor rain_support(std::uint64_t seed, std::size_t size) {
  check_size(size);
  const Rain rain = make_rain(seed, size);
  Tensor m(image_shape(size));
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = rain.mask[i] ? 1.f : 0.f;
  return m;
}

Tensor stylize(const Tensor& x0) {
  if (x0.rank() != 4 || x0.dim(0) != 1 || x0.dim(1) != 1) {
    throw ShapeError("stylize: expects 1x1xHxW, got " + shape_str(x0.shape));
  }
  const std::size_t h = x0.dim(2), w = x0.dim(3);
  auto px = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return static_cast<double>(x0.data[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]);
  };
  std::vector<double> mag(h * w);
  double peak = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const long yy = static_cast<long>(y), xx = static_cast<long>(x);
      const double gx = 0.5 * (px(yy, xx + 1) - px(yy, xx - 1));
      const double gy = 0.5 * (px(yy + 1, xx) - px(yy - 1, xx));
      mag[y * w + x] = std::sqrt(gx * gx + gy * gy);
      peak = std::max(peak, mag[y * w + x]);
    }
  }
  Tensor out(x0.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double edge = peak > 0 ? mag[i] / peak : 0.0;
    const double tone = std::pow(static_cast<double>(x0.data[i]), 0.45);
    out.data[i] = std::clamp(static_cast<float>(0.7 * tone + 0.3 * edge), 0.f, 1.f);
  }
  return out;
}

ImagePair gen_style_pair(std::uint64_t seed, std::size_t size) {
  ImagePair p;
  p.x0 = gen_base_image(seed, size);
  p.x = stylize(p.x0);
  return p;
}

ImagePair gen_pair(Task task, std::uint64_t seed, std::size_t size) {
  return task == Task::Derain ? gen_rain_pair(seed, size) : gen_style_pair(seed, size);
}

WatermarkSpec gen_watermark(std::size_t size, MarkPattern pattern) {
  check_size(size);
  WatermarkSpec spec{Tensor(image_shape(size)), Tensor(image_shape(size), 1.f)};
  if (pattern == MarkPattern::Checker) {
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) spec.w.data[y * size + x] = ((y / 4 + x / 4) % 2 == 0) ? 1.f : 0.f;
    return spec;
  }
  // Dark "C" glyph on a white field.
  static constexpr std::array<const char*, 8> stencil = {
      "11111111",
      "11000011",
      "10011111",
      "10111111",
      "10111111",
      "10011111",
      "11000011",
      "11111111",
  };
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      spec.w.data[y * size + x] = stencil[y * 8 / size][x * 8 / size] == '1' ? 1.f : 0.f;
  return spec;
}

Dataset make_dataset(Task task, std::size_t count, std::uint64_t seed, std::size_t size) {
  if (count < 3) throw ShapeError("make_dataset: count must be >= 3, got " + std::to_string(count));
  check_size(size);
  Dataset ds;
  ds.task = task;
  ds.image_size = size;
  const std::size_t n_victim = count * 45 / 100;
  const std::size_t n_attacker = count * 45 / 100;
  const std::uint64_t base = mix_seed(seed, 0x64617461);
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t s = base + k;
    ImagePair pair = gen_pair(task, s, size);
    if (k < n_victim) {
      ds.victim.push_back(std::move(pair));
      ds.victim_seeds.push_back(s);
    } else if (k < n_victim + n_attacker) {
      ds.attacker.push_back(std::move(pair));
      ds.attacker_seeds.push_back(s);
    } else {
      ds.eval.push_back(std::move(pair));
      ds.eval_seeds.push_back(s);
    }
  }
  return ds;
}

}  // namespace gradshield
