#include "dfq/eval.hpp"

#include <numeric>

#include "dfq/error.hpp"
#include "dfq/synth.hpp"

namespace dfq {

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw ShapeError("iou: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(gt.size()) + ")");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

const char* to_string(CalibSource s) {
  switch (s) {
    case CalibSource::kNone: return "none";
    case CalibSource::kSynthesized: return "synthesized";
    case CalibSource::kGaussian: return "gaussian";
    case CalibSource::kReal: return "real";
  }
  return "?";
}

CalibSource calib_source_from_string(const std::string& s) {
  for (auto c : {CalibSource::kNone, CalibSource::kSynthesized, CalibSource::kGaussian, CalibSource::kReal})
    if (s == to_string(c)) return c;
  throw InvalidArgument("unknown calibration source '" + s + "' (expected synthesized, gaussian or real)");
}

namespace {

std::string bits_pair(int w, int a) { return std::to_string(w) + "/" + std::to_string(a); }

template <class Predict>
void per_mask_iou(EvalReport& out, const Dataset& data, std::uint32_t num_classes, Predict predict) {
  if (data.empty()) throw InvalidArgument("evaluate: empty dataset");
  std::vector<std::uint8_t> p, g;
  for (std::size_t idx = 0; idx < data.size(); ++idx) {
    const Sample& sample = data[idx];
    const std::vector<int> pred = predict_labels(predict(sample.image));
    if (pred.size() != sample.labels.size())
      throw ShapeError("evaluate: label map has " + std::to_string(sample.labels.size()) +
                       " pixels, prediction has " + std::to_string(pred.size()));
    p.resize(pred.size());
    g.resize(pred.size());
    bool any_fg = false;
    for (std::uint32_t c = 1; c < num_classes; ++c) {
      bool present = false;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const int l = sample.labels[i];
        if (l < 0 || l >= static_cast<int>(num_classes))
          throw InvalidArgument("evaluate: label " + std::to_string(l) + " outside the model's classes");
        g[i] = l == static_cast<int>(c);
        p[i] = pred[i] == static_cast<int>(c);
        present = present || g[i];
      }
      if (!present) continue;
      any_fg = true;
      out.ious.push_back(iou(p, g));
      out.mask_image.push_back(idx);
      out.mask_class.push_back(static_cast<int>(c));
    }
    if (!any_fg) {
      for (std::size_t i = 0; i < pred.size(); ++i) {
        p[i] = pred[i] != 0;
        g[i] = 0;
      }
      out.ious.push_back(iou(p, g));
      out.mask_image.push_back(idx);
      out.mask_class.push_back(0);
    }
  }
  out.mean_iou = std::accumulate(out.ious.begin(), out.ious.end(), 0.0) / static_cast<double>(out.ious.size());
}

}  // namespace

std::string EvalReport::precision() const { return bits_pair(w_bits, a_bits); }
std::string CompareRow::precision() const { return bits_pair(w_bits, a_bits); }

EvalReport evaluate(const SegModel& model, const Dataset& data) {
  NoGradGuard no_grad;
  EvalReport r;
  per_mask_iou(r, data, model.config.num_classes,
               [&](const Tensor& img) { return forward(model, img).scores; });
  r.size_bytes = model_size_bytes(model.config, 32);
  r.bops = bops(model.config, 32, 32);
  return r;
}

EvalReport evaluate(const QuantizedModel& model, const Dataset& data) {
  EvalReport r;
  per_mask_iou(r, data, model.reparameterized.config.num_classes,
               [&](const Tensor& img) { return forward(model, img).scores; });
  r.w_bits = model.w_bits;
  r.a_bits = model.a_bits;
  r.size_bytes = model_size_bytes(model.reparameterized.config, model.w_bits);
  r.bops = bops(model.reparameterized.config, model.w_bits, model.a_bits);
  r.weights = "per-channel";
  bool all_layer = true;
  for (const auto& [site, p] : model.activations) all_layer = all_layer && p.granularity == Granularity::kPerLayer;
  r.activations = all_layer ? "per-layer" : "mixed";
  return r;
}

std::uint64_t mac_count(const ModelConfig& c) {
  c.validate();
  const std::uint64_t n = c.num_patches(), d = c.embed_dim, m = c.mlp_dim();
  const std::uint64_t per_block = n * d * 3 * d  // qkv
                                  + 2 * n * n * d  // scores and context over all heads
                                  + n * d * d      // projection
                                  + 2 * n * d * m;  // fc1, fc2
  const std::uint64_t head_out = std::uint64_t{c.num_classes} * c.patch_size * c.patch_size;
  return n * c.patch_dim() * d + c.num_layers * per_block + n * d * head_out;
}

std::uint64_t model_size_bytes(const ModelConfig& c, int w_bits) {
  if (w_bits < 1 || w_bits > 32) throw InvalidArgument("model_size_bytes: w_bits must lie in [1, 32]");
  c.validate();
  const std::uint64_t d = c.embed_dim, m = c.mlp_dim(), n = c.num_patches(), layers = c.num_layers;
  const std::uint64_t head_out = std::uint64_t{c.num_classes} * c.patch_size * c.patch_size;
  // Matmul weights plus the position table; biases and norms stay apart.
  const std::uint64_t matmul_out = d + layers * (3 * d + d + m + d) + head_out;
  const std::uint64_t weight_elems =
      c.patch_dim() * d + layers * (d * 3 * d + d * d + d * m + m * d) + d * head_out + n * d;
  const std::uint64_t channels = matmul_out + d;
  const std::uint64_t other = matmul_out                // one bias per output channel
                              + layers * 4 * d + 2 * d;  // LayerNorm gamma and beta
  const std::uint64_t overhead = w_bits < 32 ? channels * (8 + 4) : 0;
  return (weight_elems * static_cast<std::uint64_t>(w_bits) + 7) / 8 + overhead + 4 * other;
}

std::uint64_t bops(const ModelConfig& config, int w_bits, int a_bits) {
  if (w_bits < 1 || a_bits < 1) throw InvalidArgument("bops: bit widths must be positive");
  return mac_count(config) * static_cast<std::uint64_t>(w_bits) * static_cast<std::uint64_t>(a_bits);
}

std::vector<CompareRow> compare(const SegModel& model, const Dataset& data,
                                const std::vector<CalibSet>& calib, const CompareOptions& options) {
  std::vector<CompareRow> rows;
  const EvalReport fp = evaluate(model, data);
  rows.push_back({"fp", CalibSource::kNone, 32, 32, fp.size_bytes, fp.bops, options.dataset_name,
                  fp.mean_iou, options.seed});
  for (const auto& set : calib) {
    if (set.images.empty())
      throw InvalidArgument(std::string("compare: no calibration images for source ") + to_string(set.source));
    for (int b : options.bits) {
      const QuantizedModel q = quantize_model(model, set.images, b, b, options.quant);
      const EvalReport r = evaluate(q, data);
      rows.push_back({"ptq", set.source, b, b, r.size_bytes, r.bops, options.dataset_name, r.mean_iou,
                      options.seed});
    }
  }
  return rows;
}

std::vector<Tensor> gaussian_calibration(std::uint64_t seed, std::size_t n, const ModelConfig& config) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(init_image(seed + i, config).detach());
  return out;
}

std::vector<Tensor> real_calibration(std::uint64_t seed, std::size_t n, const ModelConfig& config) {
  std::vector<Tensor> out;
  for (auto& s : generate_dataset(seed, n, config)) out.push_back(s.image);
  return out;
}

}  // namespace dfq
