#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfq/model.hpp"

namespace dfq {

// Model container ("DFQM"), little-endian:
//   char[4] "DFQM" | u32 version | u32 x 8 config
//   (image_size, patch_size, embed_dim, num_layers, num_heads, mlp_ratio,
//   num_classes, channels) | f64 parameters in SegModel::parameters() order.
inline constexpr char kModelMagic[4] = {'D', 'F', 'Q', 'M'};
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::size_t kModelHeaderBytes = 4 + 4 + 8 * 4;

std::vector<std::uint8_t> encode_model(const SegModel& model);
// Decodes a model from the start of bytes; *consumed receives the number of
// bytes used. Without consumed, trailing bytes are a format error.
SegModel decode_model(const std::vector<std::uint8_t>& bytes, std::size_t* consumed = nullptr);

void save_model(const SegModel& model, const std::string& path);
SegModel load_model(const std::string& path);

std::size_t model_file_bytes(const ModelConfig& config);

}  // namespace dfq
