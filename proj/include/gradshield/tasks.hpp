#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "gradshield/tensor.hpp"

namespace gradshield {

enum class Task { Derain, Style };
enum class MarkPattern { Logo, Checker };

std::string_view task_name(Task t);
Task parse_task(std::string_view name);
std::string_view pattern_name(MarkPattern p);
MarkPattern parse_pattern(std::string_view name);

// Source image x0 and the host mapping's output x, both 1x1xHxW in [0,1].
struct ImagePair {
  Tensor x0;
  Tensor x;
  friend bool operator==(const ImagePair&, const ImagePair&) = default;
};

struct WatermarkSpec {
  Tensor w;   // binary mark
  Tensor w0;  // all-ones null mark
};

// Smooth random field: four random cosines plus two soft rectangles, min-max normalised.
Tensor gen_base_image(std::uint64_t seed, std::size_t size);

// x is a base image; x0 adds 8-16 one-pixel diagonal streaks of intensity 0.3-0.6.
ImagePair gen_rain_pair(std::uint64_t seed, std::size_t size);

// Streak mask of the rain pair with the same seed (1 where rain was added).
Tensor rain_support(std::uint64_t seed, std::size_t size);

// x0 is a base image; x = clamp(0.7 * x0^0.45 + 0.3 * normalised gradient magnitude).
ImagePair gen_style_pair(std::uint64_t seed, std::size_t size);

// Host mapping for the style task applied to an arbitrary image.
Tensor stylize(const Tensor& x0);

ImagePair gen_pair(Task task, std::uint64_t seed, std::size_t size);

WatermarkSpec gen_watermark(std::size_t size, MarkPattern pattern);

struct Dataset {
  Task task = Task::Derain;
  std::size_t image_size = 0;
  std::vector<ImagePair> victim;
  std::vector<ImagePair> attacker;
  std::vector<ImagePair> eval;
  std::vector<std::uint64_t> victim_seeds;
  std::vector<std::uint64_t> attacker_seeds;
  std::vector<std::uint64_t> eval_seeds;
};

// Splits count images 45% / 45% / rest with disjoint seed ranges.
Dataset make_dataset(Task task, std::size_t count, std::uint64_t seed, std::size_t size);

// Deterministic 64-bit mixer used to derive sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace gradshield
