#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "gradshield/errors.hpp"
#include "gradshield/nn.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

inline constexpr char kCheckpointMagic[] = "DGSW1\n";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic, u32 version, u32 count, then per tensor u32 name length, name bytes,
// u32 rank, u64 dims, float32 payload. All integers and floats little-endian.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(const std::string& bytes);

// Binary PGM (P5, maxval 255). Writes round(clamp(v, 0, 1) * 255); reads byte / 255 as 1x1xHxW.
void write_pgm(const Tensor& image, const std::filesystem::path& path);
Tensor read_pgm(const std::filesystem::path& path);

std::string encode_pgm(const Tensor& image);
Tensor decode_pgm(const std::string& bytes);

}  // namespace gradshield
