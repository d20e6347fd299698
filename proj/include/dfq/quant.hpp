#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dfq/model.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

enum class Granularity : std::uint8_t { kPerLayer = 0, kPerChannel = 1 };

const char* to_string(Granularity g);

// Uniform affine quantizer parameters. Per-channel parameters index the
// trailing axis of the quantized tensor.
struct QuantParams {
  int bits = 8;
  std::vector<double> scale;             // > 0
  std::vector<std::int64_t> zero_point;  // round(-min / s); outside [0, 2^bits - 1] for one-signed ranges
  Granularity granularity = Granularity::kPerLayer;

  std::int64_t qmax() const { return (std::int64_t{1} << bits) - 1; }
  std::size_t channels() const { return scale.size(); }
  // Throws InvalidArgument on any broken invariant.
  void validate() const;
  bool operator==(const QuantParams&) const = default;
};

inline constexpr double kDegenerateScale = 1e-8;

// Round half away from zero; the single rounding rule used by quantization.
std::int64_t round_half_away(double x);

// Per-channel or global min/max calibration. Constant channels get scale 1e-8
// and zero point 0, with a warning.
QuantParams calibrate(const Tensor& samples, int bits, Granularity granularity);
QuantParams calibrate_from_range(std::span<const double> min, std::span<const double> max,
                                 int bits, Granularity granularity);

struct IntTensor {
  Shape shape;
  std::vector<std::int64_t> data;
};

IntTensor quantize(const Tensor& x, const QuantParams& p);
Tensor dequantize(const IntTensor& xq, const QuantParams& p);
// dequantize(quantize(x)), untracked by autodiff.
Tensor fake_quantize(const Tensor& x, const QuantParams& p);

// Result of folding per-channel activation parameters into a LayerNorm and
// the linear layer it feeds.
struct ReparamRecord {
  std::vector<double> r1;          // s / s~
  std::vector<std::int64_t> r2;    // z - z~
  double shared_scale = 0.0;       // s~ = mean(s)
  std::int64_t shared_zero = 0;    // z~ = round(mean(z))
};

// Rewrites norm (gamma, beta) and next (weight rows, bias) in place so that the
// full-precision output of next(norm(x)) is unchanged, and replaces the
// per-channel act parameters by the shared per-layer pair. The tensors are
// replaced, not mutated, so aliases of the old parameters are unaffected.
ReparamRecord reparameterize(Norm& norm, Linear& next, QuantParams& act);

// How post-LayerNorm activations are handled by quantize_model.
enum class NormActMode : std::uint8_t {
  kReparameterized = 0,  // per-channel calibration folded to per-layer
  kPerLayer = 1,         // calibrated per-layer directly
  kPerChannel = 2,       // kept per-channel (reference only)
};

struct QuantizeOptions {
  NormActMode norm_mode = NormActMode::kReparameterized;
};

struct QuantizedModel {
  int w_bits = 4;
  int a_bits = 4;
  SegModel reparameterized;  // full-precision parameters after folding
  SegModel simulated;        // same, with weights replaced by fake-quantized values
  std::map<SiteId, QuantParams> weights;
  std::map<SiteId, QuantParams> activations;
  std::vector<std::pair<SiteId, ReparamRecord>> reparam;

  // Human summary such as "W4/A4, weights per-channel, activations per-layer".
  std::string describe() const;
};

// Activation calibration sites feeding from LayerNorms, paired with the layer
// they feed.
bool is_norm_output(SiteKind kind);

QuantizedModel quantize_model(const SegModel& model, std::span<const Tensor> calib_images,
                              int w_bits, int a_bits, const QuantizeOptions& options = {});

// Fake-quantized inference.
ForwardResult forward(const QuantizedModel& qmodel, const Tensor& image);

// Quantized container: the reparameterized model in the DFQM layout followed by
// char[4] "QPRM" | u32 w_bits | u32 a_bits | u32 count | count records of
// (u32 site code | u8 granularity | u32 bits | u32 n | f64 s[n] | i64 z[n]).
std::vector<std::uint8_t> encode_quantized(const QuantizedModel& q);
QuantizedModel decode_quantized(const std::vector<std::uint8_t>& bytes);
void save_quantized(const QuantizedModel& q, const std::string& path);
QuantizedModel load_quantized(const std::string& path);

}  // namespace dfq
