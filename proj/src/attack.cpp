#include "gradshield/attack.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace gradshield {

namespace {

template <typename E, std::size_t N>
E parse_named(std::string_view name, const std::array<std::pair<std::string_view, E>, N>& table,
              const char* field) {
  for (const auto& [n, e] : table) {
    if (n == name) return e;
  }
  throw ConfigError(field, "unknown value '" + std::string(name) + "'");
}

constexpr std::array<std::pair<std::string_view, LossVariant>, 3> kVariants{{
    {"l1", LossVariant::L1}, {"l2", LossVariant::L2}, {"l2_consistent", LossVariant::L2Consistent}}};
constexpr std::array<std::pair<std::string_view, Countermeasure>, 3> kCounters{{
    {"none", Countermeasure::None}, {"sign_flip", Countermeasure::SignFlip},
    {"approx_invert", Countermeasure::ApproxInvert}}};
constexpr std::array<std::pair<std::string_view, PostProcess>, 4> kPosts{{
    {"none", PostProcess::None}, {"jpeg", PostProcess::Jpeg}, {"noise", PostProcess::Noise},
    {"lattice", PostProcess::Lattice}}};

constexpr std::array<int, 64> kLumaTable{
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

std::array<double, 64> dct_basis() {
  std::array<double, 64> c{};
  for (int u = 0; u < 8; ++u) {
    const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
    for (int x = 0; x < 8; ++x) c[u * 8 + x] = a * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
  }
  return c;
}

std::size_t mirror_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}

void require_image_batch(const Tensor& t, const char* op) {
  if (t.rank() != 4) throw ShapeError(std::string(op) + ": expects NxCxHxW, got " + shape_str(t.shape));
}

}  // namespace

std::string_view loss_variant_name(LossVariant v) {
  for (const auto& [n, e] : kVariants) if (e == v) return n;
  return "?";
}
LossVariant parse_loss_variant(std::string_view name) { return parse_named(name, kVariants, "loss_variant"); }

std::string_view countermeasure_name(Countermeasure c) {
  for (const auto& [n, e] : kCounters) if (e == c) return n;
  return "?";
}
Countermeasure parse_countermeasure(std::string_view name) {
  return parse_named(name, kCounters, "countermeasure");
}

std::string_view post_process_name(PostProcess p) {
  for (const auto& [n, e] : kPosts) if (e == p) return n;
  return "?";
}
PostProcess parse_post_process(std::string_view name) { return parse_named(name, kPosts, "post_process"); }

void validate(const AttackConfig& cfg) {
  if (!(cfg.beta1 > 0)) throw ConfigError("beta1", "must be positive");
  if (!(cfg.beta2 > 0)) throw ConfigError("beta2", "must be positive");
  if (cfg.batch == 0) throw ConfigError("batch", "must be positive");
  if (cfg.loss_variant == LossVariant::L2Consistent && cfg.batch % 2 != 0) {
    throw ConfigError("batch", "must be even for the consistent loss");
  }
  if (!(cfg.lr >= 0)) throw ConfigError("lr", "must be non-negative");
  switch (cfg.post.kind) {
    case PostProcess::Jpeg:
      if (cfg.post.param < 1 || cfg.post.param > 100) throw ConfigError("post.param", "JPEG quality must be in 1..100");
      break;
    case PostProcess::Lattice:
      if (cfg.post.param < 1) throw ConfigError("post.param", "lattice step must be at least 1");
      break;
    case PostProcess::Noise:
      if (!std::isfinite(cfg.post.param)) throw ConfigError("post.param", "noise level must be finite");
      break;
    case PostProcess::None: break;
  }
}

Tensor watermarked_batch(const VictimModel& victim, const std::vector<ImagePair>& pairs) {
  if (pairs.empty()) throw ShapeError("watermarked_batch: no images");
  return embed(victim.encoder, stack_x(pairs), victim.wspec);
}

Tensor apply_remover(const ModelParams& remover, const Tensor& y) {
  require_image_batch(y, "apply_remover");
  Graph<float> g;
  const auto rem = bind<float>(g, remover, false);
  return remover_forward(rem, constant(g, y)).value();
}

AttackRun train_remover(const VictimModel& victim, const DGSConfig& dgs, const AttackConfig& cfg,
                        const std::vector<ImagePair>& attacker_pairs, const AttackStepCallback& on_step) {
  validate(cfg);
  const Tensor ys = watermarked_batch(victim, attacker_pairs);
  const std::size_t pool = ys.dim(0);
  const Tensor& w0 = victim.wspec.w0;

  AttackRun run;
  run.remover = init_params(Arch::Remover, mix_seed(cfg.seed, 1));
  AdamState opt = AdamState::for_params(run.remover, cfg.lr);
  std::mt19937_64 rng(mix_seed(cfg.seed, 2));
  std::uniform_int_distribution<std::size_t> pick(0, pool - 1);

  Tensor w_est;
  if (cfg.countermeasure == Countermeasure::ApproxInvert) {
    w_est = query_decoder_api(victim.decoder, dgs, batch_item(ys, 0));
  }

  run.attacker_view.reserve(cfg.steps);
  run.defender_view.reserve(cfg.steps);
  run.reoriented.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> items;
    items.reserve(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i) items.push_back(batch_item(ys, pick(rng)));

    double attacker_view = 0.0, defender_view = 0.0;
    std::ptrdiff_t hits = 0;
    try {
      Graph<float> g;
      const auto rem = bind<float>(g, run.remover, true);
      const auto dec = bind<float>(g, victim.decoder, false);
      auto y = constant(g, stack_batch<float>(items));
      auto ry = remover_forward(rem, y);
      auto api = decoder_api(dec, dgs, ry);
      if (cfg.countermeasure == Countermeasure::SignFlip) g.apply_tap({api.response.id, TapKind::Negate, 1.0});

      auto seen = api.response;
      if (cfg.post.kind != PostProcess::None) {
        // The processed mark enters as an additive constant, so gradients pass straight through.
        const Tensor& z = seen.value();
        Tensor f = apply_post_process(cfg.post, z, mix_seed(cfg.seed, 0x706f7374 + step));
        for (std::size_t i = 0; i < f.size(); ++i) f.data[i] -= z.data[i];
        seen = seen + constant(g, std::move(f));
      }
      if (cfg.countermeasure == Countermeasure::ApproxInvert) seen = approx_invert(seen, w_est);

      auto removal = removal_loss(cfg.loss_variant, seen, w0);
      auto fidelity = attack_fidelity_loss(ry, y);
      auto loss = scale(removal, cfg.beta1) + scale(fidelity, cfg.beta2);
      attacker_view = removal.value()[0];
      if (!std::isfinite(loss.value()[0])) throw NumericError("train_remover: non-finite loss");

      const Tensor& z = api.raw.value();
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double d = static_cast<double>(z.data[i]) - w0.data[i % w0.size()];
        defender_view += d * d;
      }
      defender_view /= static_cast<double>(z.size());
      hits = std::count(api.reoriented.begin(), api.reoriented.end(), true);

      const auto grads = g.backward(loss.id);
      adam_step(run.remover, collect_grads(grads, rem), opt);
    } catch (const NumericError& e) {
      throw NumericError(e.what(), static_cast<long>(step));
    }

    run.attacker_view.push_back(attacker_view);
    run.defender_view.push_back(defender_view);
    run.reoriented.push_back(static_cast<double>(hits) / static_cast<double>(cfg.batch));
    if (on_step) on_step(step, attacker_view, defender_view);
  }
  run.steps = cfg.steps;
  return run;
}

Tensor jpeg_proxy(const Tensor& image, int quality) {
  require_image_batch(image, "jpeg_proxy");
  if (quality < 1 || quality > 100) throw ShapeError("jpeg_proxy: quality must be in 1..100, got " + std::to_string(quality));
  static const std::array<double, 64> basis = dct_basis();
  const int s = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<double, 64> q{};
  for (std::size_t i = 0; i < 64; ++i) q[i] = std::clamp((kLumaTable[i] * s + 50) / 100, 1, 255);

  const std::size_t h = image.dim(2), w = image.dim(3);
  const std::size_t hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
  Tensor out(image.shape);
  std::vector<double> plane(hp * wp);
  std::array<double, 64> block{}, tmp{}, coef{};
  for (std::size_t p = 0; p < image.dim(0) * image.dim(1); ++p) {
    const float* src = image.data.data() + p * h * w;
    for (std::size_t r = 0; r < hp; ++r) {
      for (std::size_t c = 0; c < wp; ++c) {
        const double v = std::clamp(src[mirror_index(static_cast<long>(r), h) * w + mirror_index(static_cast<long>(c), w)], 0.f, 1.f);
        plane[r * wp + c] = v * 255.0 - 128.0;
      }
    }
    for (std::size_t by = 0; by < hp; by += 8) {
      for (std::size_t bx = 0; bx < wp; bx += 8) {
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) block[y * 8 + x] = plane[(by + y) * wp + bx + x];
        // Forward transform: coef = C * block * C^T.
        for (std::size_t u = 0; u < 8; ++u)
          for (std::size_t x = 0; x < 8; ++x) {
            double acc = 0;
            for (std::size_t y = 0; y < 8; ++y) acc += basis[u * 8 + y] * block[y * 8 + x];
            tmp[u * 8 + x] = acc;
          }
        for (std::size_t u = 0; u < 8; ++u)
          for (std::size_t v = 0; v < 8; ++v) {
            double acc = 0;
            for (std::size_t x = 0; x < 8; ++x) acc += tmp[u * 8 + x] * basis[v * 8 + x];
            coef[u * 8 + v] = std::nearbyint(acc / q[u * 8 + v]) * q[u * 8 + v];
          }
        // Inverse: block = C^T * coef * C.
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t v = 0; v < 8; ++v) {
            double acc = 0;
            for (std::size_t u = 0; u < 8; ++u) acc += basis[u * 8 + y] * coef[u * 8 + v];
            tmp[y * 8 + v] = acc;
          }
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) {
            double acc = 0;
            for (std::size_t v = 0; v < 8; ++v) acc += tmp[y * 8 + v] * basis[v * 8 + x];
            plane[(by + y) * wp + bx + x] = acc;
          }
      }
    }
    float* dst = out.data.data() + p * h * w;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        dst[r * w + c] = static_cast<float>(std::clamp((plane[r * wp + c] + 128.0) / 255.0, 0.0, 1.0));
  }
  return out;
}

Tensor add_awgn(const Tensor& image, double level_db, std::uint64_t seed) {
  const double sigma = std::pow(10.0, -level_db / 20.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  Tensor out(image.shape);
  for (std::size_t i = 0; i < image.size(); ++i) {
    out.data[i] = static_cast<float>(std::clamp(image.data[i] + noise(rng), 0.0, 1.0));
  }
  return out;
}

Tensor lattice_attack(const Tensor& image, std::size_t step, std::uint64_t seed) {
  require_image_batch(image, "lattice_attack");
  if (step < 1) throw ShapeError("lattice_attack: step must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Tensor out = image;
  out.requires_grad = false;
  out.grad.reset();
  const std::size_t plane = image.dim(2) * image.dim(3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if ((i % plane) % (step + 1) == 0) out.data[i] = u(rng);
  }
  return out;
}

Tensor apply_post_process(const PostProcessSpec& spec, const Tensor& image, std::uint64_t seed) {
  switch (spec.kind) {
    case PostProcess::None: return image;
    case PostProcess::Jpeg: return jpeg_proxy(image, static_cast<int>(spec.param));
    case PostProcess::Noise: return add_awgn(image, spec.param, seed);
    case PostProcess::Lattice: return lattice_attack(image, static_cast<std::size_t>(spec.param), seed);
  }
  throw ShapeError("apply_post_process: unknown kind");
}

}  // namespace gradshield
