#include "dfq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "binary.hpp"
#include "dfq/error.hpp"
#include "dfq/model_io.hpp"

namespace dfq {

const char* to_string(Granularity g) {
  return g == Granularity::kPerChannel ? "per-channel" : "per-layer";
}

void QuantParams::validate() const {
  if (bits < 2 || bits > 32) throw InvalidArgument("quant params: bits must be in [2, 32]");
  if (scale.empty() || scale.size() != zero_point.size())
    throw InvalidArgument("quant params: scale and zero point lengths differ");
  if (granularity == Granularity::kPerLayer && scale.size() != 1)
    throw InvalidArgument("quant params: per-layer parameters must be scalar");
  for (double s : scale)
    if (!(s > 0.0) || !std::isfinite(s)) throw InvalidArgument("quant params: scale must be positive");
}

std::int64_t round_half_away(double x) { return static_cast<std::int64_t>(std::round(x)); }

QuantParams calibrate_from_range(std::span<const double> min, std::span<const double> max,
                                 int bits, Granularity granularity) {
  if (bits < 2 || bits > 32) throw InvalidArgument("calibrate: bits must be in [2, 32]");
  if (min.empty() || min.size() != max.size()) throw InvalidArgument("calibrate: empty range");
  QuantParams p;
  p.bits = bits;
  p.granularity = granularity;
  const double levels = static_cast<double>(p.qmax());
  for (std::size_t c = 0; c < min.size(); ++c) {
    const double range = max[c] - min[c];
    if (!(range > 0.0)) {
      warn("calibrate: degenerate channel " + std::to_string(c) + " (min == max == " +
           std::to_string(min[c]) + "); using scale 1e-8");
      p.scale.push_back(kDegenerateScale);
      p.zero_point.push_back(0);
      continue;
    }
    const double s = range / levels;
    p.scale.push_back(s);
    // Not clamped: a one-signed range needs z outside [0, 2^b - 1] to keep
    // both of its ends representable.
    p.zero_point.push_back(round_half_away(-min[c] / s));
  }
  return p;
}

QuantParams calibrate(const Tensor& samples, int bits, Granularity granularity) {
  if (samples.size() == 0) throw InvalidArgument("calibrate: no samples");
  const std::size_t channels =
      granularity == Granularity::kPerChannel ? samples.shape().back() : 1;
  std::vector<double> mn(channels, std::numeric_limits<double>::infinity());
  std::vector<double> mx(channels, -std::numeric_limits<double>::infinity());
  const auto v = samples.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t c = i % channels;
    mn[c] = std::min(mn[c], v[i]);
    mx[c] = std::max(mx[c], v[i]);
  }
  return calibrate_from_range(mn, mx, bits, granularity);
}

namespace {

std::size_t channels_of(const Shape& shape, const QuantParams& p) {
  if (p.granularity == Granularity::kPerLayer) return 1;
  if (shape.empty() || shape.back() != p.channels())
    throw ShapeError("per-channel parameters with " + std::to_string(p.channels()) +
                     " channels applied to " + to_string(shape));
  return p.channels();
}

}  // namespace

IntTensor quantize(const Tensor& x, const QuantParams& p) {
  const std::size_t ch = channels_of(x.shape(), p);
  const auto v = x.data();
  IntTensor out{x.shape(), std::vector<std::int64_t>(v.size())};
  const std::int64_t qmax = p.qmax();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t c = i % ch;
    out.data[i] = std::clamp(round_half_away(v[i] / p.scale[c]) + p.zero_point[c],
                             std::int64_t{0}, qmax);
  }
  return out;
}

Tensor dequantize(const IntTensor& xq, const QuantParams& p) {
  const std::size_t ch = channels_of(xq.shape, p);
  std::vector<double> out(xq.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = i % ch;
    out[i] = p.scale[c] * static_cast<double>(xq.data[i] - p.zero_point[c]);
  }
  return Tensor(xq.shape, std::move(out));
}

Tensor fake_quantize(const Tensor& x, const QuantParams& p) {
  return dequantize(quantize(x, p), p);
}

ReparamRecord reparameterize(Norm& norm, Linear& next, QuantParams& act) {
  const std::size_t d = norm.gamma.size();
  if (act.granularity != Granularity::kPerChannel || act.channels() != d)
    throw InvalidArgument("reparameterize: expected per-channel parameters over " +
                          std::to_string(d) + " channels");
  if (next.weight.rank() != 2 || next.weight.dim(0) != d)
    throw ShapeError("reparameterize: next layer weight " + to_string(next.weight.shape()) +
                     " does not consume " + std::to_string(d) + " channels");
  ReparamRecord rec;
  double s_sum = 0.0, z_sum = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    s_sum += act.scale[c];
    z_sum += static_cast<double>(act.zero_point[c]);
  }
  rec.shared_scale = s_sum / static_cast<double>(d);
  rec.shared_zero = round_half_away(z_sum / static_cast<double>(d));
  rec.r1.resize(d);
  rec.r2.resize(d);
  for (std::size_t c = 0; c < d; ++c) {
    rec.r1[c] = act.scale[c] / rec.shared_scale;
    rec.r2[c] = act.zero_point[c] - rec.shared_zero;
    if (!(rec.r1[c] > 0.0)) throw InternalError("reparameterize: zero variation factor");
  }

  const std::size_t out = next.weight.dim(1);
  const auto gamma = norm.gamma.data();
  const auto beta = norm.beta.data();
  const auto w = next.weight.data();
  const auto b = next.bias.data();
  std::vector<double> new_gamma(d), new_beta(d), new_w(w.size()), new_b(b.begin(), b.end());
  for (std::size_t c = 0; c < d; ++c) {
    const double shift = act.scale[c] * static_cast<double>(rec.r2[c]);
    new_beta[c] = (beta[c] + shift) / rec.r1[c];
    new_gamma[c] = gamma[c] / rec.r1[c];
    for (std::size_t j = 0; j < out; ++j) {
      new_w[c * out + j] = rec.r1[c] * w[c * out + j];
      new_b[j] -= shift * w[c * out + j];
    }
  }
  norm.gamma = Tensor(norm.gamma.shape(), std::move(new_gamma));
  norm.beta = Tensor(norm.beta.shape(), std::move(new_beta));
  next.weight = Tensor(next.weight.shape(), std::move(new_w));
  next.bias = Tensor(next.bias.shape(), std::move(new_b));

  act.scale.assign(1, rec.shared_scale);
  act.zero_point.assign(1, rec.shared_zero);
  act.granularity = Granularity::kPerLayer;
  return rec;
}

bool is_norm_output(SiteKind kind) {
  return kind == SiteKind::kAttnNormOut || kind == SiteKind::kMlpNormOut ||
         kind == SiteKind::kFinalNormOut;
}

std::string QuantizedModel::describe() const {
  bool all_layer = true;
  for (const auto& [site, p] : activations) all_layer = all_layer && p.granularity == Granularity::kPerLayer;
  std::ostringstream os;
  os << 'W' << w_bits << "/A" << a_bits << ", weights per-channel, activations "
     << (all_layer ? "per-layer" : "mixed per-layer/per-channel");
  return os.str();
}

namespace {

struct RangeObserver {
  std::vector<double> min, max;
  void observe(const Tensor& t) {
    const std::size_t ch = t.shape().back();
    if (min.empty()) {
      min.assign(ch, std::numeric_limits<double>::infinity());
      max.assign(ch, -std::numeric_limits<double>::infinity());
    }
    if (min.size() != ch) throw ShapeError("calibration site changed channel count");
    const auto v = t.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t c = i % ch;
      min[c] = std::min(min[c], v[i]);
      max[c] = std::max(max[c], v[i]);
    }
  }
  double global_min() const { return *std::min_element(min.begin(), min.end()); }
  double global_max() const { return *std::max_element(max.begin(), max.end()); }
};

void build_simulated(QuantizedModel& q) {
  q.simulated = q.reparameterized.clone();
  for (const auto& [site, p] : q.weights)
    weight_for(q.simulated, site) = fake_quantize(weight_for(q.reparameterized, site), p);
}

std::pair<Norm*, Linear*> fold_target(SegModel& m, const SiteId& site) {
  switch (site.kind) {
    case SiteKind::kAttnNormOut: return {&m.blocks[site.block].ln1, &m.blocks[site.block].qkv};
    case SiteKind::kMlpNormOut: return {&m.blocks[site.block].ln2, &m.blocks[site.block].fc1};
    case SiteKind::kFinalNormOut: return {&m.ln_final, &m.head};
    default: throw InternalError("no fold target for " + site.name());
  }
}

}  // namespace

QuantizedModel quantize_model(const SegModel& model, std::span<const Tensor> calib_images,
                              int w_bits, int a_bits, const QuantizeOptions& options) {
  if (calib_images.empty()) throw InvalidArgument("quantize_model: no calibration images");
  QuantizedModel q;
  q.w_bits = w_bits;
  q.a_bits = a_bits;
  q.reparameterized = model.clone();

  std::map<SiteId, RangeObserver> ranges;
  {
    NoGradGuard no_grad;
    ActivationHook observe = [&ranges](const SiteId& site, const Tensor& t) {
      ranges[site].observe(t);
      return t;
    };
    for (const Tensor& img : calib_images) forward(q.reparameterized, img, observe);
  }

  for (const auto& [site, r] : ranges) {
    const bool per_channel =
        is_norm_output(site.kind) && options.norm_mode != NormActMode::kPerLayer;
    if (per_channel) {
      q.activations[site] = calibrate_from_range(r.min, r.max, a_bits, Granularity::kPerChannel);
    } else {
      const double mn = r.global_min(), mx = r.global_max();
      q.activations[site] = calibrate_from_range({&mn, 1}, {&mx, 1}, a_bits, Granularity::kPerLayer);
    }
  }

  if (options.norm_mode == NormActMode::kReparameterized) {
    for (auto& [site, p] : q.activations) {
      if (!is_norm_output(site.kind)) continue;
      auto [norm, next] = fold_target(q.reparameterized, site);
      q.reparam.emplace_back(site, reparameterize(*norm, *next, p));
    }
  }

  for (const SiteId& site : weight_sites(model.config))
    q.weights[site] = calibrate(weight_for(q.reparameterized, site), w_bits, Granularity::kPerChannel);
  build_simulated(q);
  return q;
}

ForwardResult forward(const QuantizedModel& qmodel, const Tensor& image) {
  NoGradGuard no_grad;
  ActivationHook hook = [&qmodel](const SiteId& site, const Tensor& t) {
    auto it = qmodel.activations.find(site);
    if (it == qmodel.activations.end())
      throw InternalError("quantized forward: no parameters for site " + site.name());
    return fake_quantize(t, it->second);
  };
  return forward(qmodel.simulated, image, hook);
}

// ---- container ------------------------------------------------------------

namespace {

constexpr char kQuantMagic[4] = {'Q', 'P', 'R', 'M'};

void write_params(binary::Writer& w, const SiteId& site, const QuantParams& p) {
  w.u32(site.code());
  w.u8(static_cast<std::uint8_t>(p.granularity));
  w.u32(static_cast<std::uint32_t>(p.bits));
  w.u32(static_cast<std::uint32_t>(p.channels()));
  for (double s : p.scale) w.f64(s);
  for (auto z : p.zero_point) w.u64(static_cast<std::uint64_t>(z));
}

}  // namespace

std::vector<std::uint8_t> encode_quantized(const QuantizedModel& q) {
  binary::Writer w;
  const auto base = encode_model(q.reparameterized);
  w.bytes(base.data(), base.size());
  w.bytes(kQuantMagic, 4);
  w.u32(static_cast<std::uint32_t>(q.w_bits));
  w.u32(static_cast<std::uint32_t>(q.a_bits));
  w.u32(static_cast<std::uint32_t>(q.weights.size() + q.activations.size()));
  for (const auto& [site, p] : q.weights) write_params(w, site, p);
  for (const auto& [site, p] : q.activations) write_params(w, site, p);
  return w.take();
}

QuantizedModel decode_quantized(const std::vector<std::uint8_t>& bytes) {
  QuantizedModel q;
  std::size_t used = 0;
  q.reparameterized = decode_model(bytes, &used);
  std::vector<std::uint8_t> rest(bytes.begin() + static_cast<std::ptrdiff_t>(used), bytes.end());
  binary::Reader r(rest, "quantized container");
  if (r.tag(4) != std::string(kQuantMagic, 4))
    throw FormatError("quantized container: missing QPRM section at offset " + std::to_string(used));
  q.w_bits = static_cast<int>(r.u32());
  q.a_bits = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = used + r.offset();
    const SiteId site = SiteId::from_code(r.u32());
    QuantParams p;
    const std::uint8_t g = r.u8();
    if (g > 1) throw FormatError("quantized container: bad granularity flag at offset " + std::to_string(at));
    p.granularity = static_cast<Granularity>(g);
    p.bits = static_cast<int>(r.u32());
    const std::uint32_t n = r.u32();
    r.expect(std::size_t{n} * 16);
    for (std::uint32_t c = 0; c < n; ++c) p.scale.push_back(r.f64());
    for (std::uint32_t c = 0; c < n; ++c) p.zero_point.push_back(static_cast<std::int64_t>(r.u64()));
    try {
      p.validate();
    } catch (const InvalidArgument& e) {
      throw FormatError("quantized container: record at offset " + std::to_string(at) + ": " + e.what());
    }
    (site.is_weight() ? q.weights : q.activations)[site] = std::move(p);
  }
  if (r.remaining() != 0)
    throw FormatError("quantized container: trailing data at offset " + std::to_string(used + r.offset()));
  build_simulated(q);
  return q;
}

void save_quantized(const QuantizedModel& q, const std::string& path) {
  binary::write_file(path, encode_quantized(q));
}

QuantizedModel load_quantized(const std::string& path) {
  return decode_quantized(binary::read_file(path));
}

}  // namespace dfq
