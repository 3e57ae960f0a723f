#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradshield/graph.hpp"

namespace gradshield {

enum class Arch { Encoder, Decoder, Remover };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);

// Named parameter tensors in a fixed order.
struct ModelParams {
  std::vector<std::pair<std::string, Tensor>> entries;

  std::size_t size() const noexcept { return entries.size(); }
  const Tensor& at(std::string_view name) const;
  std::size_t count_values() const;
  bool all_finite() const;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases; deterministic per seed.
ModelParams init_params(Arch arch, std::uint64_t seed);

// Parameters registered as graph leaves, in ModelParams order.
template <typename T>
struct BoundParams {
  std::vector<Var<T>> vars;
  const Var<T>& operator[](std::size_t i) const { return vars.at(i); }
};

template <typename T>
BoundParams<T> bind(Graph<T>& g, const ModelParams& params, bool trainable) {
  BoundParams<T> b;
  for (const auto& [name, t] : params.entries) {
    auto v = t.template cast<T>();
    b.vars.push_back(trainable ? parameter(g, std::move(v)) : constant(g, std::move(v)));
  }
  return b;
}

// Gradients of bound parameters in ModelParams order, converted back to 32-bit.
template <typename T>
std::vector<Tensor> collect_grads(const GradientMap<T>& grads, const BoundParams<T>& bound) {
  std::vector<Tensor> out;
  for (const auto& v : bound.vars) out.push_back(grads.at(v.id).template cast<float>());
  return out;
}

inline constexpr double kLeakySlope = 0.2;

// x: Nx1xHxW processed image, mark: Nx1xHxW watermark. Returns Y = x + residual.
template <typename T>
Var<T> encoder_forward(const BoundParams<T>& p, Var<T> x, Var<T> mark) {
  auto h = leaky_relu(conv2d(concat(x, mark, 1), p[0], p[1], 1, 1), kLeakySlope);
  h = leaky_relu(conv2d(h, p[2], p[3], 1, 1), kLeakySlope);
  return x + conv2d(h, p[4], p[5], 1, 1);
}

// Returns the extracted mark in (0, 1).
template <typename T>
Var<T> decoder_forward(const BoundParams<T>& p, Var<T> s) {
  auto h = leaky_relu(conv2d(s, p[0], p[1], 1, 1), kLeakySlope);
  h = leaky_relu(conv2d(h, p[2], p[3], 1, 1), kLeakySlope);
  return sigmoid(conv2d(h, p[4], p[5], 1, 1));
}

// One-level U-shape: stride-2 down, conv, upsample, skip concat, two convs. Returns y + residual.
template <typename T>
Var<T> remover_forward(const BoundParams<T>& p, Var<T> y) {
  auto down = leaky_relu(conv2d(y, p[0], p[1], 2, 1), kLeakySlope);
  auto mid = leaky_relu(conv2d(down, p[2], p[3], 1, 1), kLeakySlope);
  auto up = upsample2x(mid);
  auto h = leaky_relu(conv2d(concat(up, y, 1), p[4], p[5], 1, 1), kLeakySlope);
  return y + conv2d(h, p[6], p[7], 1, 1);
}

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t step = 0;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const ModelParams& params, double lr = 2e-4);
};

// Bias-corrected Adam update. A non-finite gradient throws and leaves params and state untouched.
void adam_step(ModelParams& params, std::span<const Tensor> grads, AdamState& state);

}  // namespace gradshield
