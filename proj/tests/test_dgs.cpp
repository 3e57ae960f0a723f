#include <cmath>
#include <algorithm>
#include <random>

#include "doctest.h"
#include "gradshield/dgs.hpp"
#include "gradshield/tasks.hpp"
#include "gradshield/watermark.hpp"

using namespace gradshield;

namespace {

Tensor pixel(float v) { return Tensor({1, 1, 1, 1}, {v}); }

PMatrix single(double lambda) { return make_P(1, lambda, lambda, 0); }

TensorD random_near(const Tensor& w, double spread, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-spread, spread);
  TensorD z(w.shape);
  for (std::size_t i = 0; i < z.size(); ++i) z.data[i] = w.data[i] + u(rng);
  return z;
}

// Z-space gradient of sum((reorient(Z) + F - W0)^2), taken through the autodiff graph.
TensorD observed_gradient(const TensorD& z, const PMatrix& p, const Tensor& w, const Tensor& w0,
                          const TensorD& f = {}) {
  Graph<double> g;
  auto zv = parameter(g, z);
  auto out = reorient(zv, p, w);
  if (!f.data.empty()) out = out + constant(g, f);
  auto loss = sum(square(out - constant(g, w0.cast<double>())));
  return g.backward(loss.id).at(zv.id);
}

double dot(const TensorD& a, const TensorD& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

double norm(const TensorD& a) { return std::sqrt(dot(a, a)); }

}  // namespace

TEST_CASE("make_P ranges and ablation identity") {
  const auto id = make_P(64, 1.0, 1.0, 3);
  for (double l : id.lambdas) CHECK(l == 1.0);
  const auto p = make_P(1024, 1e-5, 1e-4, 3);
  for (double l : p.lambdas) {
    CHECK(l >= 1e-5);
    CHECK(l <= 1e-4);
  }
  CHECK(p.lambdas == make_P(1024, 1e-5, 1e-4, 3).lambdas);
  CHECK(p.lambdas != make_P(1024, 1e-5, 1e-4, 4).lambdas);
  CHECK(p.max_lambda() <= 1e-4);
  CHECK_THROWS_AS(make_P(4, 0.0, 1.0, 1), ShapeError);
  CHECK_THROWS_AS(make_P(4, -1.0, 1.0, 1), ShapeError);
  CHECK_THROWS_AS(make_P(4, 0.5, 0.1, 1), ShapeError);
}

TEST_CASE("reorient worked examples") {
  CHECK(reorient(pixel(0.8f), single(0.3), pixel(0.8f))[0] == 0.8f);
  CHECK(reorient(pixel(1.f), single(1.0), pixel(0.8f))[0] == doctest::Approx(0.6));
  CHECK(reorient(pixel(0.2f), single(0.5), pixel(0.8f))[0] == doctest::Approx(1.1));
  const auto w = gen_watermark(32, MarkPattern::Logo);
  const auto p = make_P(w.w.size(), 1e-5, 1e-4, 1);
  CHECK(reorient(w.w, p, w.w) == w.w);
  CHECK(reorient(tile_batch(w.w, 3), p, w.w) == tile_batch(w.w, 3));
  CHECK_THROWS_AS(reorient(Tensor({1, 1, 16, 16}), p, w.w), ShapeError);
}

TEST_CASE("reorient with P = I is 2W - Z") {
  const auto w = gen_watermark(32, MarkPattern::Logo).w;
  const auto z = gen_base_image(2, 32);
  const auto out = reorient(z, make_P(w.size(), 1, 1, 0), w);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(out.data[i] == 2.f * w.data[i] - z.data[i]);
}

TEST_CASE("inversion") {
  const auto w = gen_watermark(32, MarkPattern::Logo).w;
  std::mt19937_64 rng(5);
  SUBCASE("64-bit round trip over small eigenvalues") {
    const auto p = make_P(w.size(), 1e-5, 1e-4, 2);
    for (int k = 0; k < 10; ++k) {
      const auto z = gen_base_image(k, 32).cast<double>();
      const auto back = invert_reorient(reorient(z, p, w), p, w);
      for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::abs(back.data[i] - z.data[i]) < 1e-4);
    }
  }
  SUBCASE("32-bit round trip once eigenvalues are not tiny") {
    const auto p = make_P(w.size(), 1e-2, 1.0, 2);
    const auto z = gen_base_image(3, 32);
    const auto back = invert_reorient(reorient(z, p, w), p, w);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::abs(back.data[i] - z.data[i]) < 1e-4);
  }
  CHECK(invert_reorient(pixel(0.6f), single(1.0), pixel(0.8f))[0] == doctest::Approx(1.0));
  CHECK(invert_reorient(pixel(0.8f), single(1e-5), pixel(0.8f))[0] == 0.8f);
  PMatrix broken = single(1.0);
  broken.lambdas[0] = 0.0;
  CHECK_THROWS_AS(invert_reorient(pixel(0.5f), broken, pixel(0.8f)), ShapeError);
}

TEST_CASE("approximate inversion") {
  CHECK(approx_invert(reorient(pixel(0.2f), single(1.0), pixel(0.8f)), pixel(0.8f))[0] == doctest::Approx(0.2));
  const auto zstar = reorient(pixel(0.2f), single(0.5), pixel(0.8f));
  CHECK(approx_invert(zstar, pixel(0.8f))[0] == doctest::Approx(0.5));
  // |Z~ - Z| = |(1 - lambda)(W - Z)| when the estimate is the true mark.
  for (double lam : {1e-5, 0.1, 0.5, 2.0}) {
    const auto est = approx_invert(reorient(pixel(0.3f), single(lam), pixel(0.9f)), pixel(0.9f));
    CHECK(std::abs(est[0] - 0.3) == doctest::Approx(std::abs((1 - lam) * 0.6)).epsilon(1e-5));
  }
}

TEST_CASE("effective gradient oracle") {
  const Tensor w = pixel(0.5f), w0 = pixel(1.f);
  CHECK(effective_z_gradient(TensorD({1, 1, 1, 1}, {0.5}), single(0.1), w, w0)[0] == doctest::Approx(0.1));
  // A constant interference shifts the effective target to W0 - F.
  const TensorD z({1, 1, 1, 1}, {0.3});
  const TensorD f({1, 1, 1, 1}, {0.25});
  const double with_f = effective_z_gradient(z, single(0.1), w, w0, f)[0];
  const double shifted = effective_z_gradient(z, single(0.1), w, pixel(0.75f))[0];
  CHECK(with_f == doctest::Approx(shifted));
  CHECK_THROWS_AS(effective_z_gradient(z, single(0.1), w, w0, TensorD({1, 1, 2, 1})), ShapeError);
}

TEST_CASE("autodiff through reorient matches the oracle") {
  const auto spec = gen_watermark(32, MarkPattern::Logo);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int k = 0; k < 10; ++k) {
    const auto p = make_P(spec.w.size(), 1e-5, 1.0, k);
    const auto z = random_near(spec.w, 0.4, rng);
    TensorD f(z.shape);
    for (auto& v : f.data) v = u(rng);
    const auto got = observed_gradient(z, p, spec.w, spec.w0, f);
    const auto want = effective_z_gradient(z, p, spec.w, spec.w0, f);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-9));
  }
}

TEST_CASE("gradient geometry at Z = W") {
  std::mt19937_64 rng(12);
  for (int k = 0; k < 20; ++k) {
    const auto spec = gen_watermark(32, k % 2 ? MarkPattern::Logo : MarkPattern::Checker);
    const auto p = make_P(spec.w.size(), 1e-5, 1e-4, k);
    const auto z = spec.w.cast<double>();
    const auto observed = observed_gradient(z, p, spec.w, spec.w0);
    TensorD truth(z.shape);
    double expected = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = spec.w.data[i] - spec.w0.data[i];
      truth.data[i] = 2 * d;
      expected -= 4 * p.lambdas[i] * d * d;
    }
    CHECK(dot(observed, truth) < 0);
    CHECK(dot(observed, truth) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(norm(observed) <= p.max_lambda() * norm(truth) * (1 + 1e-12));

    TensorD flipped = observed;
    for (auto& v : flipped.data) v = -v;
    CHECK(dot(flipped, truth) > 0);
    CHECK(norm(flipped) / norm(truth) <= p.max_lambda() * (1 + 1e-12));
  }
}

TEST_CASE("small eigenvalues keep reoriented marks above threshold") {
  const auto spec = gen_watermark(32, MarkPattern::Logo);
  std::mt19937_64 rng(21);
  int tried = 0;
  for (int k = 0; k < 50; ++k) {
    const auto z = random_near(spec.w, 0.25, rng).cast<float>();
    if (nc(z, spec.w) <= 0.96) continue;
    ++tried;
    const auto p = make_P(spec.w.size(), 1e-6, 1e-3, k);
    CHECK(nc(reorient(z, p, spec.w), spec.w) > 0.96);
  }
  CHECK(tried > 10);
}

TEST_CASE("decoder api branches") {
  const auto spec = gen_watermark(32, MarkPattern::Logo);
  const auto decoder = init_params(Arch::Decoder, 3);
  DGSConfig cfg;
  cfg.w = spec.w;
  cfg.w0 = spec.w0;
  cfg.p = make_P(spec.w.size(), 1e-5, 1e-4, 1);
  std::vector<Tensor> images;
  for (std::uint64_t s = 0; s < 4; ++s) images.push_back(gen_base_image(s, 32));
  const auto batch = stack_batch<float>(images);
  const auto raw = extract(decoder, batch);

  std::vector<double> scores;
  for (std::size_t i = 0; i < 4; ++i) scores.push_back(nc(batch_item(raw, i), spec.w));

  SUBCASE("below threshold returns the raw output bitwise") {
    cfg.nc_threshold = 0.999999;
    CHECK(query_decoder_api(decoder, cfg, batch) == raw);
  }
  SUBCASE("disabled or missing P returns the raw output") {
    cfg.nc_threshold = 0.0;
    cfg.enabled = false;
    CHECK(query_decoder_api(decoder, cfg, batch) == raw);
    cfg.enabled = true;
    cfg.p.reset();
    CHECK(query_decoder_api(decoder, cfg, batch) == raw);
  }
  SUBCASE("above threshold returns the reoriented output") {
    cfg.nc_threshold = 0.0;
    CHECK(query_decoder_api(decoder, cfg, batch) == reorient(raw, *cfg.p, spec.w));
  }
  SUBCASE("mixed batch is decided per item") {
    auto sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    cfg.nc_threshold = 0.5 * (sorted[1] + sorted[2]);
    const auto out = query_decoder_api(decoder, cfg, batch);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto item = batch_item(raw, i);
      CHECK(batch_item(out, i) == (scores[i] > cfg.nc_threshold ? reorient(item, *cfg.p, spec.w) : item));
    }
  }
}

TEST_CASE("decoder api gradient equals the chain rule with the oracle") {
  const auto spec = gen_watermark(16, MarkPattern::Logo);
  const auto decoder = init_params(Arch::Decoder, 5);
  DGSConfig cfg;
  cfg.w = spec.w;
  cfg.w0 = spec.w0;
  cfg.p = make_P(spec.w.size(), 1e-3, 0.5, 6);
  cfg.nc_threshold = 0.0;
  const auto s = gen_base_image(9, 16).cast<double>();

  Graph<double> g;
  const auto dec = bind<double>(g, decoder, false);
  auto sv = parameter(g, s);
  auto api = decoder_api(dec, cfg, sv);
  REQUIRE(api.reoriented[0]);
  auto loss = sum(square(api.response - constant(g, spec.w0.cast<double>())));
  const auto through_api = g.backward(loss.id).at(sv.id);

  // Vector-Jacobian product of the bare decoder with the oracle as the upstream gradient.
  const auto upstream = effective_z_gradient(api.raw.value(), *cfg.p, spec.w, spec.w0);
  Graph<double> h;
  const auto dec2 = bind<double>(h, decoder, false);
  auto sv2 = parameter(h, s);
  auto vjp = sum(decoder_forward(dec2, sv2) * constant(h, upstream));
  const auto expected = h.backward(vjp.id).at(sv2.id);
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(through_api.data[i] == doctest::Approx(expected.data[i]).epsilon(1e-9).scale(1e-12));
  }
}

TEST_CASE("exactness of the two special cases on both paths") {
  const auto spec = gen_watermark(32, MarkPattern::Logo);
  const auto z = gen_base_image(6, 32);
  std::vector<double> lambdas{1e-8, 3e-7, 1e-5, 7.3e-5, 1e-4, 1e-3, 0.1, 0.5, 1.0, 3.7};
  for (double lam : lambdas) {
    CAPTURE(lam);
    const auto p = make_P(spec.w.size(), lam, lam, 0);
    CHECK(reorient(spec.w, p, spec.w) == spec.w);
    CHECK(reorient(spec.w.cast<double>(), p, spec.w) == spec.w.cast<double>());
    Graph<float> g;
    CHECK(reorient(constant(g, spec.w), p, spec.w).value() == spec.w);
    Graph<double> gd;
    CHECK(reorient(constant(gd, spec.w.cast<double>()), p, spec.w).value() == spec.w.cast<double>());
  }
  const auto id = make_P(spec.w.size(), 1.0, 1.0, 0);
  Graph<float> g;
  const auto on_graph = reorient(constant(g, z), id, spec.w).value();
  const auto direct = reorient(z, id, spec.w);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const float expected = -z.data[i] + 2.f * spec.w.data[i];
    CHECK(direct.data[i] == expected);
    CHECK(on_graph.data[i] == expected);
  }
}
