#include "gradshield/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace gradshield {

std::string_view arch_name(Arch arch) {
  switch (arch) {
    case Arch::Encoder: return "encoder";
    case Arch::Decoder: return "decoder";
    case Arch::Remover: return "remover";
  }
  return "unknown";
}

Arch parse_arch(std::string_view name) {
  if (name == "encoder") return Arch::Encoder;
  if (name == "decoder") return Arch::Decoder;
  if (name == "remover") return Arch::Remover;
  throw ShapeError("unknown architecture '" + std::string(name) + "'");
}

const Tensor& ModelParams::at(std::string_view name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return t;
  }
  throw ShapeError("no parameter named '" + std::string(name) + "'");
}

std::size_t ModelParams::count_values() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.second.size();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& e : entries) {
    if (!e.second.all_finite()) return false;
  }
  return true;
}

namespace {

struct ConvSpec {
  std::size_t in, out;
};

std::vector<ConvSpec> layout(Arch arch) {
  switch (arch) {
    case Arch::Encoder: return {{2, 16}, {16, 16}, {16, 1}};
    case Arch::Decoder: return {{1, 16}, {16, 16}, {16, 1}};
    case Arch::Remover: return {{1, 16}, {16, 16}, {17, 16}, {16, 1}};
  }
  throw ShapeError("unknown architecture");
}

}  // namespace

ModelParams init_params(Arch arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams params;
  std::size_t index = 1;
  const auto specs = layout(arch);
  for (const auto& spec : specs) {
    const std::size_t fan_in = spec.in * 9;
    const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    std::uniform_real_distribution<float> dist(-bound, bound);
    Tensor w({spec.out, spec.in, 3, 3});
    for (auto& v : w.data) v = dist(rng);
    // The remover starts as the identity map: its residual branch ends in a zero conv.
    if (arch == Arch::Remover && index == specs.size()) std::fill(w.data.begin(), w.data.end(), 0.f);
    w.requires_grad = true;
    Tensor b({spec.out});
    b.requires_grad = true;
    const std::string prefix = "conv" + std::to_string(index++);
    params.entries.emplace_back(prefix + ".weight", std::move(w));
    params.entries.emplace_back(prefix + ".bias", std::move(b));
  }
  return params;
}

AdamState AdamState::for_params(const ModelParams& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& e : params.entries) {
    s.m.emplace_back(e.second.size(), 0.f);
    s.v.emplace_back(e.second.size(), 0.f);
  }
  return s;
}

void adam_step(ModelParams& params, std::span<const Tensor> grads, AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adam_step: expected " + std::to_string(params.size()) + " gradients, got " +
                     std::to_string(grads.size()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& p = params.entries[i];
    if (grads[i].shape != p.second.shape) {
      throw ShapeError("adam_step: gradient for " + p.first + " has shape " + shape_str(grads[i].shape) +
                       ", parameter is " + shape_str(p.second.shape));
    }
    if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient for " + p.first);
  }

  const std::uint64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& values = params.entries[i].second.data;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i].data;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(state.beta1 * m[j] + (1.0 - state.beta1) * gj);
      v[j] = static_cast<float>(state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      values[j] = static_cast<float>(values[j] - state.lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

}  // namespace gradshield
