#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dfq/dataset.hpp"
#include "dfq/model.hpp"
#include "dfq/quant.hpp"

namespace dfq {

// |pred & gt| / |pred | gt| over boolean grids of equal size; 1 when both are
// empty.
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

enum class CalibSource : std::uint8_t { kNone = 0, kSynthesized, kGaussian, kReal };
const char* to_string(CalibSource s);
CalibSource calib_source_from_string(const std::string& s);

struct EvalReport {
  // One entry per (image, foreground class present in its labels). An image
  // without any foreground contributes one entry: the IoU of the predicted
  // foreground against the empty set.
  std::vector<double> ious;
  std::vector<std::size_t> mask_image;  // dataset index of each entry
  std::vector<int> mask_class;          // its class, 0 for the no-foreground entry
  double mean_iou = 0.0;
  std::uint64_t size_bytes = 0;
  std::uint64_t bops = 0;
  int w_bits = 32;
  int a_bits = 32;
  std::string weights = "fp";      // weight granularity
  std::string activations = "fp";  // activation granularity
  CalibSource source = CalibSource::kNone;
  std::uint64_t seed = 0;

  std::string precision() const;  // "W/A", e.g. "32/32"
};

// Per-labeled-mask IoU of argmax predictions. Empty datasets are rejected.
EvalReport evaluate(const SegModel& model, const Dataset& data);
EvalReport evaluate(const QuantizedModel& model, const Dataset& data);

// Multiply-accumulates of one forward pass, counted from the architecture:
// patch embedding, qkv, both attention products, projection, both MLP
// layers and the head.
std::uint64_t mac_count(const ModelConfig& config);

// Matmul weights and the position table stored at w_bits, plus an 8-byte
// scale and 4-byte zero point per output channel when w_bits < 32. Biases
// and LayerNorm parameters stay at 32 bits.
std::uint64_t model_size_bytes(const ModelConfig& config, int w_bits);

std::uint64_t bops(const ModelConfig& config, int w_bits, int a_bits);

struct CompareRow {
  std::string method;  // "fp" or "ptq"
  CalibSource source = CalibSource::kNone;
  int w_bits = 32;
  int a_bits = 32;
  std::uint64_t size_bytes = 0;
  std::uint64_t bops = 0;
  std::string dataset;
  double mean_iou = 0.0;
  std::uint64_t seed = 0;

  std::string precision() const;
};

struct CalibSet {
  CalibSource source;
  std::vector<Tensor> images;
};

struct CompareOptions {
  std::vector<int> bits{4};  // each entry is used for both weights and activations
  std::string dataset_name = "toy";
  std::uint64_t seed = 0;
  QuantizeOptions quant;
};

// The full-precision row followed by one row per (source, bits), sources in
// the given order and bits in the given order within each source.
std::vector<CompareRow> compare(const SegModel& model, const Dataset& data,
                                const std::vector<CalibSet>& calib, const CompareOptions& options);

// N(0, 1) images, the same distribution synthesis starts from.
std::vector<Tensor> gaussian_calibration(std::uint64_t seed, std::size_t n, const ModelConfig& config);
// Images from the procedural generator.
std::vector<Tensor> real_calibration(std::uint64_t seed, std::size_t n, const ModelConfig& config);

}  // namespace dfq
