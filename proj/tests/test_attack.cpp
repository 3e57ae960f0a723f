#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gradshield/attack.hpp"
#include "gradshield/gradcheck.hpp"
#include "gradshield/metrics.hpp"

using namespace gradshield;

namespace {

VictimModel random_victim(std::size_t size) {
  VictimModel v;
  v.encoder = init_params(Arch::Encoder, 1);
  v.decoder = init_params(Arch::Decoder, 2);
  v.wspec = gen_watermark(size, MarkPattern::Logo);
  return v;
}

DGSConfig config_for(const VictimModel& v) {
  DGSConfig cfg;
  cfg.w = v.wspec.w;
  cfg.w0 = v.wspec.w0;
  return cfg;
}

bool in_unit_range(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](float v) { return v >= 0.f && v <= 1.f; });
}

}  // namespace

TEST_CASE("removal loss examples") {
  const auto spec = gen_watermark(16, MarkPattern::Checker);
  Graph<float> g;
  auto at_w0 = constant(g, tile_batch(spec.w0, 4));
  auto at_w = constant(g, tile_batch(spec.w, 4));
  CHECK(removal_loss(LossVariant::L1, at_w0, spec.w0).value()[0] == 0.f);
  CHECK(removal_loss(LossVariant::L2, at_w0, spec.w0).value()[0] == 0.f);
  CHECK(removal_loss(LossVariant::L2, at_w, spec.w0).value()[0] == doctest::Approx(0.5));
  CHECK(removal_loss(LossVariant::L1, at_w, spec.w0).value()[0] == doctest::Approx(0.5));
  CHECK(removal_loss(LossVariant::L2Consistent, at_w, spec.w0).value()[0] == doctest::Approx(0.5));

  // Halves {W, W0} and {W0, W}: each half-pair differs on half the pixels by 1.
  const std::vector<Tensor> mixed{spec.w, spec.w0, spec.w0, spec.w};
  auto z = constant(g, stack_batch<float>(mixed));
  CHECK(removal_loss(LossVariant::L2Consistent, z, spec.w0).value()[0] == doctest::Approx(0.25 + 0.5));
  CHECK_THROWS_AS(removal_loss(LossVariant::L2Consistent, constant(g, tile_batch(spec.w, 3)), spec.w0), ShapeError);
}

TEST_CASE("attack fidelity loss examples") {
  Graph<float> g;
  auto y = constant(g, gen_base_image(3, 16));
  Tensor lifted = gen_base_image(3, 16);
  for (auto& v : lifted.data) v += 0.1f;
  auto ry = constant(g, lifted);
  CHECK(attack_fidelity_loss(y, y).value()[0] == 0.f);
  CHECK(attack_fidelity_loss(ry, y).value()[0] == doctest::Approx(0.01).epsilon(1e-4));
  CHECK(attack_fidelity_loss(ry, y).value()[0] == attack_fidelity_loss(y, ry).value()[0]);
  CHECK_THROWS_AS(attack_fidelity_loss(ry, constant(g, Tensor({1, 1, 8, 8}))), ShapeError);
}

TEST_CASE("composed attack loss gradients match finite differences") {
  const auto victim = random_victim(16);
  auto dgs = config_for(victim);
  dgs.p = make_P(victim.wspec.w.size(), 0.1, 1.0, 3);
  const auto remover = init_params(Arch::Remover, 4);
  const std::vector<Tensor> ys_items{gen_base_image(1, 16), gen_base_image(2, 16)};
  const auto ys = stack_batch<float>(ys_items).cast<double>();

  for (double threshold : {0.0, 1.0}) {
    dgs.nc_threshold = threshold;
    for (LossVariant variant : {LossVariant::L2, LossVariant::L2Consistent}) {
      CAPTURE(threshold);
      CAPTURE(loss_variant_name(variant));
      auto fn = [&](Graph<double>& g, Var<double> y) {
        const auto rem = bind<double>(g, remover, false);
        const auto dec = bind<double>(g, victim.decoder, false);
        auto ry = remover_forward(rem, y);
        auto api = decoder_api(dec, dgs, ry);
        return removal_loss(variant, api.response, victim.wspec.w0) + attack_fidelity_loss(ry, y);
      };
      CHECK(grad_check(fn, ys) < 1e-4);
    }
  }
}

TEST_CASE("remover training bookkeeping") {
  const auto data = make_dataset(Task::Derain, 20, 2, 16);
  const auto victim = random_victim(16);
  const auto frozen = victim;
  auto dgs = config_for(victim);
  dgs.enabled = false;
  AttackConfig cfg;
  cfg.steps = 12;
  cfg.batch = 4;
  cfg.seed = 3;
  cfg.lr = 1e-3;
  std::size_t calls = 0;
  const auto run = train_remover(victim, dgs, cfg, data.attacker, [&](std::size_t, double, double) { ++calls; });
  CHECK(calls == 12);
  CHECK(run.attacker_view.size() == 12);
  CHECK(run.defender_view.size() == 12);
  // Same quantity, once summed in float inside the graph and once in double outside it.
  for (std::size_t i = 0; i < run.steps; ++i) CHECK(run.attacker_view[i] == doctest::Approx(run.defender_view[i]).epsilon(1e-5));
  CHECK(std::all_of(run.attacker_view.begin(), run.attacker_view.end(), [](double v) { return std::isfinite(v); }));
  CHECK(victim.encoder == frozen.encoder);
  CHECK(victim.decoder == frozen.decoder);
  const auto again = train_remover(victim, dgs, cfg, data.attacker);
  CHECK(again.remover == run.remover);
  CHECK(again.defender_view == run.defender_view);
}

TEST_CASE("sign flip without the defense works against the attacker") {
  const auto data = make_dataset(Task::Derain, 20, 2, 16);
  const auto victim = random_victim(16);
  auto dgs = config_for(victim);
  dgs.enabled = false;
  AttackConfig cfg;
  cfg.steps = 40;
  cfg.batch = 4;
  cfg.lr = 1e-3;
  // A faint fidelity term keeps the removal gradient in charge of the direction.
  cfg.beta2 = 1e-3;
  cfg.countermeasure = Countermeasure::SignFlip;
  const auto ascent = train_remover(victim, dgs, cfg, data.attacker);
  cfg.countermeasure = Countermeasure::None;
  const auto descent = train_remover(victim, dgs, cfg, data.attacker);
  CHECK(ascent.defender_view.back() > ascent.defender_view.front());
  CHECK(descent.defender_view.back() < descent.defender_view.front());
}

TEST_CASE("attack configuration is validated") {
  const auto data = make_dataset(Task::Derain, 20, 2, 16);
  const auto victim = random_victim(16);
  const auto dgs = config_for(victim);
  AttackConfig cfg;
  cfg.steps = 1;
  cfg.loss_variant = LossVariant::L2Consistent;
  cfg.batch = 3;
  CHECK_THROWS_AS(train_remover(victim, dgs, cfg, data.attacker), ConfigError);
  cfg.batch = 4;
  cfg.beta2 = 0.0;
  CHECK_THROWS_AS(train_remover(victim, dgs, cfg, data.attacker), ConfigError);
  cfg.beta2 = 1.0;
  cfg.post = {PostProcess::Jpeg, 0.0};
  CHECK_THROWS_AS(train_remover(victim, dgs, cfg, data.attacker), ConfigError);
  CHECK(parse_countermeasure("approx_invert") == Countermeasure::ApproxInvert);
  CHECK(loss_variant_name(LossVariant::L2Consistent) == "l2_consistent");
  CHECK_THROWS_AS(parse_loss_variant("l3"), ConfigError);
}

TEST_CASE("every countermeasure and post-process runs") {
  const auto data = make_dataset(Task::Derain, 20, 2, 16);
  const auto victim = random_victim(16);
  auto dgs = config_for(victim);
  dgs.p = make_P(victim.wspec.w.size(), 1e-5, 1e-4, 1);
  dgs.nc_threshold = 0.0;
  AttackConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  for (auto counter : {Countermeasure::None, Countermeasure::SignFlip, Countermeasure::ApproxInvert}) {
    for (auto post : {PostProcessSpec{}, PostProcessSpec{PostProcess::Jpeg, 30}, PostProcessSpec{PostProcess::Noise, 10},
                      PostProcessSpec{PostProcess::Lattice, 2}}) {
      cfg.countermeasure = counter;
      cfg.post = post;
      const auto run = train_remover(victim, dgs, cfg, data.attacker);
      CHECK(run.steps == 3);
      CHECK(run.reoriented.front() == 1.0);
      CHECK(run.remover.all_finite());
    }
  }
}

TEST_CASE("jpeg proxy") {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto img = gen_base_image(s, 32);
    // Smallest quality-100 PSNR over 100 base images was measured at 59 dB.
    CHECK(psnr(jpeg_proxy(img, 100), img) > 40.0);
    CHECK(psnr(jpeg_proxy(img, 40), img) > psnr(jpeg_proxy(img, 10), img));
    CHECK(in_unit_range(jpeg_proxy(img, 5)));
  }
  const Tensor flat({1, 1, 16, 16}, 0.37f);
  const auto coded = jpeg_proxy(flat, 75);
  for (std::size_t i = 0; i < flat.size(); ++i) CHECK(std::abs(coded.data[i] - flat.data[i]) < 1.0 / 255.0);

  Tensor wild({2, 1, 20, 12}, 0.f);
  for (std::size_t i = 0; i < wild.size(); ++i) wild.data[i] = static_cast<float>(i % 7) * 0.3f - 0.4f;
  const auto out = jpeg_proxy(wild, 50);
  CHECK(out.shape == wild.shape);
  CHECK(in_unit_range(out));
  CHECK_THROWS_AS(jpeg_proxy(flat, 0), ShapeError);
  CHECK_THROWS_AS(jpeg_proxy(flat, 101), ShapeError);
}

TEST_CASE("additive noise") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    // Large images keep the sampled noise power close to its nominal value.
    const auto img = gen_base_image(s, 128);
    const double q = psnr(add_awgn(img, 20.0, s), img);
    CHECK(q >= 20.0);
    CHECK(q <= 24.0);
  }
  const auto img = gen_base_image(1, 32);
  const auto quiet = add_awgn(img, 80.0, 4);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(quiet.data[i] - img.data[i]) < 1e-3);
  CHECK(add_awgn(img, 10.0, 4) == add_awgn(img, 10.0, 4));
  CHECK_FALSE(add_awgn(img, 10.0, 4) == add_awgn(img, 10.0, 5));
  CHECK(in_unit_range(add_awgn(img, 0.0, 4)));
}

TEST_CASE("lattice attack") {
  const auto img = gen_base_image(2, 32);
  const auto out = lattice_attack(img, 2, 7);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (i % 3 == 0) {
      changed += out.data[i] != img.data[i];
    } else {
      CHECK(out.data[i] == img.data[i]);
    }
  }
  CHECK(changed == (img.size() + 2) / 3);
  CHECK(out == lattice_attack(img, 2, 7));
  CHECK(in_unit_range(lattice_attack(img, 1, 3)));
  CHECK_THROWS_AS(lattice_attack(img, 0, 1), ShapeError);
  const auto batch = lattice_attack(tile_batch(img, 2), 6, 1);
  CHECK(batch_item(batch, 1).data[7] != img.data[7]);
  CHECK(batch_item(batch, 1).data[8] == img.data[8]);
}
