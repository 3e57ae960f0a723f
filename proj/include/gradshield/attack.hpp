#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "gradshield/dgs.hpp"
#include "gradshield/graph.hpp"
#include "gradshield/nn.hpp"
#include "gradshield/tasks.hpp"
#include "gradshield/watermark.hpp"

namespace gradshield {

enum class LossVariant { L1, L2, L2Consistent };
enum class Countermeasure { None, SignFlip, ApproxInvert };
enum class PostProcess { None, Jpeg, Noise, Lattice };

std::string_view loss_variant_name(LossVariant v);
LossVariant parse_loss_variant(std::string_view name);
std::string_view countermeasure_name(Countermeasure c);
Countermeasure parse_countermeasure(std::string_view name);
std::string_view post_process_name(PostProcess p);
PostProcess parse_post_process(std::string_view name);

// Processing applied to every returned mark before the attacker's loss.
// param is the JPEG quality, the noise level in dB or the lattice step.
struct PostProcessSpec {
  PostProcess kind = PostProcess::None;
  double param = 0.0;
  friend bool operator==(const PostProcessSpec&, const PostProcessSpec&) = default;
};

struct AttackConfig {
  LossVariant loss_variant = LossVariant::L2;
  double beta1 = 1.0;
  double beta2 = 1.0;
  Countermeasure countermeasure = Countermeasure::None;
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 2e-4;
  std::uint64_t seed = 0;
  PostProcessSpec post;
  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

void validate(const AttackConfig& cfg);

struct AttackRun {
  ModelParams remover;
  std::vector<double> attacker_view;  // removal loss on what the API returned
  std::vector<double> defender_view;  // mean (Z - W0)^2 on the raw decoder output
  std::vector<double> reoriented;     // fraction of the batch the API reoriented
  std::size_t steps = 0;
};

template <typename T>
Var<T> removal_loss(LossVariant variant, Var<T> z, const Tensor& w0) {
  const Shape s = z.shape();
  if (s.empty() || s[0] == 0) throw ShapeError("removal_loss: empty batch");
  Graph<T>& g = *z.graph;
  auto diff = z - constant(g, tile_batch(w0.template cast<T>(), s[0]));
  switch (variant) {
    case LossVariant::L1: return mean(abs(diff));
    case LossVariant::L2: return mean(square(diff));
    case LossVariant::L2Consistent: {
      if (s[0] % 2 != 0) {
        throw ShapeError("removal_loss: consistent variant needs an even batch, got " + std::to_string(s[0]));
      }
      const std::size_t half = s[0] / 2;
      auto gap = slice(z, 0, half, 0) - slice(z, half, s[0], 0);
      return mean(square(diff)) + mean(square(gap));
    }
  }
  throw ShapeError("removal_loss: unknown variant");
}

template <typename T>
Var<T> attack_fidelity_loss(Var<T> ry, Var<T> y) {
  if (ry.shape() != y.shape()) {
    throw ShapeError("attack_fidelity_loss: shape mismatch " + shape_str(ry.shape()) + " vs " + shape_str(y.shape()));
  }
  return mean(square(ry - y));
}

// Watermarked outputs of the victim for the attacker's images.
Tensor watermarked_batch(const VictimModel& victim, const std::vector<ImagePair>& pairs);

using AttackStepCallback = std::function<void(std::size_t step, double attacker_view, double defender_view)>;

// Trains a fresh remover against the (possibly protected) decoder API. Victim weights stay frozen.
AttackRun train_remover(const VictimModel& victim, const DGSConfig& dgs, const AttackConfig& cfg,
                        const std::vector<ImagePair>& attacker_pairs, const AttackStepCallback& on_step = {});

// R(Y) for a batch.
Tensor apply_remover(const ModelParams& remover, const Tensor& y);

// 8x8 block DCT codec with the standard luminance table; quality in 1..100.
Tensor jpeg_proxy(const Tensor& image, int quality);

// Additive Gaussian noise with sigma = 10^(-level_db / 20), clipped to [0, 1].
Tensor add_awgn(const Tensor& image, double level_db, std::uint64_t seed);

// Replaces pixels whose row-major index within each image is a multiple of step + 1 by uniform values.
Tensor lattice_attack(const Tensor& image, std::size_t step, std::uint64_t seed);

// Dispatches on spec.kind; None returns the input.
Tensor apply_post_process(const PostProcessSpec& spec, const Tensor& image, std::uint64_t seed);

}  // namespace gradshield
