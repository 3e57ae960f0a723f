#include <cmath>
#include <random>

#include "doctest.h"
#include "gradshield/gradcheck.hpp"
#include "gradshield/nn.hpp"

using namespace gradshield;

TEST_CASE("init is deterministic and bounded") {
  for (Arch arch : {Arch::Encoder, Arch::Decoder, Arch::Remover}) {
    CAPTURE(arch_name(arch));
    const auto a = init_params(arch, 7);
    CHECK(a == init_params(arch, 7));
    CHECK_FALSE(a == init_params(arch, 8));
    for (const auto& [name, t] : a.entries) {
      if (name.ends_with(".bias")) {
        for (float v : t.data) CHECK(v == 0.f);
      } else {
        const double bound = std::sqrt(6.0 / static_cast<double>(t.dim(1) * 9));
        for (float v : t.data) CHECK(std::abs(v) <= bound);
      }
    }
  }
}

TEST_CASE("architectures have the documented layer shapes") {
  const auto enc = init_params(Arch::Encoder, 1);
  CHECK(enc.at("conv1.weight").shape == Shape{16, 2, 3, 3});
  CHECK(enc.at("conv3.weight").shape == Shape{1, 16, 3, 3});
  const auto rem = init_params(Arch::Remover, 1);
  CHECK(rem.at("conv3.weight").shape == Shape{16, 17, 3, 3});
  CHECK(rem.size() == 8);
  CHECK(parse_arch("decoder") == Arch::Decoder);
  CHECK_THROWS_AS(parse_arch("unet"), ShapeError);
  CHECK_THROWS(enc.at("conv9.weight"));
}

TEST_CASE("forward shapes and output ranges") {
  Graph<float> g;
  const auto enc = bind<float>(g, init_params(Arch::Encoder, 1), false);
  const auto dec = bind<float>(g, init_params(Arch::Decoder, 2), false);
  const auto rem = bind<float>(g, init_params(Arch::Remover, 3), false);
  auto x = constant(g, Tensor({2, 1, 32, 32}, 0.5f));
  auto mark = constant(g, Tensor({2, 1, 32, 32}, 1.f));
  CHECK(encoder_forward(enc, x, mark).shape() == Shape{2, 1, 32, 32});
  const auto z = decoder_forward(dec, x).value();
  CHECK(z.shape == Shape{2, 1, 32, 32});
  for (float v : z.data) CHECK((v > 0.f && v < 1.f));
  CHECK(remover_forward(rem, x).shape() == Shape{2, 1, 32, 32});
}

TEST_CASE("remover starts as the identity map") {
  const auto rem = init_params(Arch::Remover, 3);
  for (float v : rem.at("conv4.weight").data) CHECK(v == 0.f);
  CHECK(rem.at("conv3.weight").data[0] != 0.f);
  Graph<float> g;
  const Tensor y = Tensor({1, 1, 8, 8}, 0.25f);
  CHECK(remover_forward(bind<float>(g, rem, false), constant(g, y)).value() == y);
}

TEST_CASE("network gradients match finite differences") {
  auto rem = init_params(Arch::Remover, 4);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // A trained-looking final conv so every layer sits on the gradient path.
  for (auto& [name, t] : rem.entries) {
    if (name == "conv4.weight") {
      for (auto& v : t.data) v = static_cast<float>(u(rng) - 0.5);
    }
  }
  TensorD y({1, 1, 8, 8});
  for (auto& v : y.data) v = u(rng);
  auto fn = [&](Graph<double>& g, Var<double> in) {
    const auto p = bind<double>(g, rem, false);
    return mean(square(remover_forward(p, in)));
  };
  CHECK(grad_check(fn, y) < 1e-4);
}

TEST_CASE("adam single scalar step matches hand evaluation") {
  ModelParams p;
  p.entries.emplace_back("p", Tensor({1}, {1.f}));
  AdamState s = AdamState::for_params(p, 0.1);
  const std::vector<Tensor> g{Tensor({1}, {1.f})};
  adam_step(p, g, s);
  // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
  CHECK(p.at("p")[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-7));
  CHECK(s.step == 1);

  // Second step with g = -1: m = 0.9*0.1 - 0.1 = -0.01, v = 0.999*0.001 + 0.001.
  const std::vector<Tensor> g2{Tensor({1}, {-1.f})};
  const double before = p.at("p")[0];
  adam_step(p, g2, s);
  const double m = 0.9 * 0.1 + 0.1 * -1.0, v = 0.999 * 0.001 + 0.001;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  CHECK(p.at("p")[0] == doctest::Approx(before - 0.1 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-6));
}

TEST_CASE("adam edge behaviour") {
  auto p = init_params(Arch::Decoder, 5);
  const auto original = p;
  std::vector<Tensor> zeros;
  for (const auto& e : p.entries) zeros.emplace_back(e.second.shape, 0.f);

  SUBCASE("zero gradients leave params and moments unchanged") {
    AdamState s = AdamState::for_params(p, 2e-4);
    adam_step(p, zeros, s);
    CHECK(p == original);
    for (const auto& m : s.m) for (float v : m) CHECK(v == 0.f);
  }
  SUBCASE("lr zero is bit-identical") {
    AdamState s = AdamState::for_params(p, 0.0);
    auto grads = zeros;
    for (auto& gr : grads) for (auto& v : gr.data) v = 0.3f;
    adam_step(p, grads, s);
    CHECK(p == original);
  }
  SUBCASE("non-finite gradient rejected without touching state") {
    AdamState s = AdamState::for_params(p, 2e-4);
    auto grads = zeros;
    grads.back().data[0] = std::nanf("");
    CHECK_THROWS_AS(adam_step(p, grads, s), NumericError);
    CHECK(s.step == 0);
    CHECK(p == original);
  }
  SUBCASE("shape mismatch rejected") {
    AdamState s = AdamState::for_params(p, 2e-4);
    auto grads = zeros;
    grads[0] = Tensor({3});
    CHECK_THROWS_AS(adam_step(p, grads, s), ShapeError);
  }
}

TEST_CASE("adam converges on a convex quadratic") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  for (int trial = 0; trial < 5; ++trial) {
    ModelParams p;
    Tensor start({6}), target({6});
    for (auto& v : start.data) v = u(rng);
    for (auto& v : target.data) v = u(rng);
    p.entries.emplace_back("p", start);
    AdamState s = AdamState::for_params(p, 0.01);
    for (int k = 0; k < 500; ++k) {
      Tensor g({6});
      for (std::size_t i = 0; i < 6; ++i) g.data[i] = 2.f * (p.at("p")[i] - target.data[i]);
      adam_step(p, std::vector<Tensor>{g}, s);
    }
    double dist = 0;
    for (std::size_t i = 0; i < 6; ++i) dist += std::pow(p.at("p")[i] - target.data[i], 2);
    CHECK(std::sqrt(dist) < 1e-2);
  }
}

TEST_CASE("identical runs give identical trajectories") {
  auto run = [] {
    auto p = init_params(Arch::Encoder, 9);
    AdamState s = AdamState::for_params(p, 2e-4);
    for (int k = 0; k < 3; ++k) {
      Graph<float> g;
      const auto b = bind<float>(g, p, true);
      auto x = constant(g, Tensor({1, 1, 16, 16}, 0.25f));
      auto loss = mean(square(encoder_forward(b, x, constant(g, Tensor({1, 1, 16, 16}, 1.f)))));
      const auto grads = g.backward(loss.id);
      adam_step(p, collect_grads(grads, b), s);
    }
    return p;
  };
  CHECK(run() == run());
}
