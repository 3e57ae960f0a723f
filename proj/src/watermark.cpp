#include "gradshield/watermark.hpp"

#include <cmath>
#include <random>

namespace gradshield {

namespace {

Tensor stack_member(const std::vector<ImagePair>& pairs, bool source) {
  std::vector<Tensor> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) items.push_back(source ? p.x0 : p.x);
  return stack_batch<float>(items);
}

void validate(const VictimTrainConfig& cfg) {
  if (!(cfg.alpha1 > 0) || !(cfg.alpha2 > 0)) throw ShapeError("train_victim: alpha1 and alpha2 must be positive");
  if (cfg.batch == 0) throw ShapeError("train_victim: batch must be positive");
  if (!(cfg.lr >= 0)) throw ShapeError("train_victim: lr must be non-negative");
}

}  // namespace

Tensor stack_x(const std::vector<ImagePair>& pairs) { return stack_member(pairs, false); }
Tensor stack_x0(const std::vector<ImagePair>& pairs) { return stack_member(pairs, true); }

Tensor embed(const ModelParams& encoder, const Tensor& x, const WatermarkSpec& wspec) {
  Graph<float> g;
  const auto enc = bind<float>(g, encoder, false);
  auto xv = constant(g, x);
  auto mark = constant(g, tile_batch(wspec.w, x.dim(0)));
  return encoder_forward(enc, xv, mark).value();
}

Tensor extract(const ModelParams& decoder, const Tensor& s) {
  if (s.rank() != 4 || s.dim(1) != 1) throw ShapeError("extract: expects Nx1xHxW, got " + shape_str(s.shape));
  Graph<float> g;
  const auto dec = bind<float>(g, decoder, false);
  return decoder_forward(dec, constant(g, s)).value();
}

VictimTrainResult train_victim(const Dataset& data, const WatermarkSpec& wspec, const VictimTrainConfig& cfg,
                               const StepCallback& on_step) {
  validate(cfg);
  if (data.victim.empty()) throw ShapeError("train_victim: victim split is empty");

  VictimTrainResult result;
  VictimModel& model = result.model;
  model.wspec = wspec;
  model.seed = cfg.seed;
  model.encoder = init_params(Arch::Encoder, mix_seed(cfg.seed, 1));
  model.decoder = init_params(Arch::Decoder, mix_seed(cfg.seed, 2));
  AdamState enc_opt = AdamState::for_params(model.encoder, cfg.lr);
  AdamState dec_opt = AdamState::for_params(model.decoder, cfg.lr);

  std::mt19937_64 rng(mix_seed(cfg.seed, 3));
  std::uniform_int_distribution<std::size_t> pick(0, data.victim.size() - 1);
  const Tensor marks = tile_batch(wspec.w, cfg.batch);
  result.losses.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> xs, ss;
    for (std::size_t i = 0; i < cfg.batch; ++i) xs.push_back(data.victim[pick(rng)].x);
    // Non-watermarked pool: sources, processed images and fresh base images in turn.
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const std::uint64_t draw = rng();
      switch (i % 3) {
        case 0: ss.push_back(data.victim[draw % data.victim.size()].x0); break;
        case 1: ss.push_back(data.victim[draw % data.victim.size()].x); break;
        default: ss.push_back(gen_base_image(draw, data.image_size)); break;
      }
    }

    double value = 0.0, embed_value = 0.0, fidelity_value = 0.0;
    try {
      Graph<float> g;
      const auto enc = bind<float>(g, model.encoder, true);
      const auto dec = bind<float>(g, model.decoder, true);
      auto x = constant(g, stack_batch<float>(xs));
      auto s = constant(g, stack_batch<float>(ss));
      auto y = encoder_forward(enc, x, constant(g, marks));
      auto le = embed_loss(dec, y, s, wspec);
      auto lf = fidelity_loss(y, x);
      auto loss = scale(le, cfg.alpha1) + scale(lf, cfg.alpha2);
      value = loss.value()[0];
      embed_value = le.value()[0];
      fidelity_value = lf.value()[0];
      if (!std::isfinite(value)) throw NumericError("train_victim: non-finite loss");

      const auto grads = g.backward(loss.id);
      adam_step(model.encoder, collect_grads(grads, enc), enc_opt);
      adam_step(model.decoder, collect_grads(grads, dec), dec_opt);
    } catch (const NumericError& e) {
      throw NumericError(e.what(), static_cast<long>(step));
    }

    result.losses.push_back(value);
    model.final_loss = value;
    model.final_embed = embed_value;
    model.final_fidelity = fidelity_value;
    if (on_step) on_step(step, value);
  }
  model.steps = cfg.steps;
  return result;
}

}  // namespace gradshield
