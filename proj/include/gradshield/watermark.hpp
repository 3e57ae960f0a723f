#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "gradshield/graph.hpp"
#include "gradshield/nn.hpp"
#include "gradshield/tasks.hpp"

namespace gradshield {

struct VictimTrainConfig {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  std::size_t steps = 3000;
  std::size_t batch = 8;
  double lr = 2e-4;
  std::uint64_t seed = 0;
  friend bool operator==(const VictimTrainConfig&, const VictimTrainConfig&) = default;
};

struct VictimModel {
  ModelParams encoder;
  ModelParams decoder;
  WatermarkSpec wspec;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double final_loss = 0.0;
  double final_embed = 0.0;
  double final_fidelity = 0.0;
};

struct VictimTrainResult {
  VictimModel model;
  std::vector<double> losses;  // total loss per step
};

// mean((D(Y) - W)^2) + mean((D(S) - W0)^2)
template <typename T>
Var<T> embed_loss(const BoundParams<T>& decoder, Var<T> y, Var<T> s, const WatermarkSpec& wspec) {
  if (y.shape().empty() || y.shape()[0] == 0 || s.shape().empty() || s.shape()[0] == 0) {
    throw ShapeError("embed_loss: empty batch");
  }
  Graph<T>& g = *y.graph;
  auto w = constant(g, tile_batch(wspec.w.template cast<T>(), y.shape()[0]));
  auto w0 = constant(g, tile_batch(wspec.w0.template cast<T>(), s.shape()[0]));
  return mean(square(decoder_forward(decoder, y) - w)) + mean(square(decoder_forward(decoder, s) - w0));
}

// Per-pixel mean squared error between watermarked and clean images.
template <typename T>
Var<T> fidelity_loss(Var<T> y, Var<T> x) {
  if (y.shape() != x.shape()) {
    throw ShapeError("fidelity_loss: shape mismatch " + shape_str(y.shape()) + " vs " + shape_str(x.shape()));
  }
  return mean(square(y - x));
}

using StepCallback = std::function<void(std::size_t step, double loss)>;

// Jointly trains encoder and decoder on the victim split with Adam.
// Throws NumericError carrying the step index if the loss becomes non-finite.
VictimTrainResult train_victim(const Dataset& data, const WatermarkSpec& wspec, const VictimTrainConfig& cfg,
                               const StepCallback& on_step = {});

// Y = E(concat(X, W)) for an Nx1xHxW batch of processed images.
Tensor embed(const ModelParams& encoder, const Tensor& x, const WatermarkSpec& wspec);

// Raw decoder output for an Nx1xHxW batch.
Tensor extract(const ModelParams& decoder, const Tensor& s);

// Stacks the chosen member (x0 or x) of each pair into a batch.
Tensor stack_x(const std::vector<ImagePair>& pairs);
Tensor stack_x0(const std::vector<ImagePair>& pairs);

}  // namespace gradshield
