#include "dfq/model.hpp"

#include <cmath>
#include <random>

#include "dfq/error.hpp"

namespace dfq {

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw InvalidArgument("model config: image_size must be a positive multiple of patch_size");
  if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0)
    throw InvalidArgument("model config: embed_dim must be divisible by num_heads");
  if (num_classes < 2) throw InvalidArgument("model config: num_classes must be at least 2");
  if (num_layers == 0) throw InvalidArgument("model config: num_layers must be at least 1");
  if (mlp_ratio == 0) throw InvalidArgument("model config: mlp_ratio must be at least 1");
  if (channels != 1 && channels != 3) throw InvalidArgument("model config: channels must be 1 or 3");
}

std::vector<Tensor*> SegModel::parameters() {
  std::vector<Tensor*> out{&patch_embed.weight, &patch_embed.bias, &pos_embed};
  for (auto& b : blocks) {
    for (Tensor* t : {&b.ln1.gamma, &b.ln1.beta, &b.qkv.weight, &b.qkv.bias, &b.proj.weight,
                      &b.proj.bias, &b.ln2.gamma, &b.ln2.beta, &b.fc1.weight, &b.fc1.bias,
                      &b.fc2.weight, &b.fc2.bias})
      out.push_back(t);
  }
  for (Tensor* t : {&ln_final.gamma, &ln_final.beta, &head.weight, &head.bias}) out.push_back(t);
  return out;
}

std::vector<const Tensor*> SegModel::parameters() const {
  auto mut = const_cast<SegModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t SegModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

SegModel SegModel::clone() const {
  SegModel copy = *this;
  for (Tensor* t : copy.parameters()) *t = t->clone();
  return copy;
}

void SegModel::set_trainable(bool on) {
  for (Tensor* t : parameters()) {
    t->set_requires_grad(on);
    t->zero_grad();
  }
}

namespace {

Tensor random_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {random_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng),
          Tensor(Shape{out}, 0.0)};
}

Norm make_norm(std::size_t d) { return {Tensor(Shape{d}, 1.0), Tensor(Shape{d}, 0.0)}; }

// Index maps between the pixel grid and patch-major layouts.
std::vector<std::size_t> patchify_indices(const ModelConfig& c) {
  const std::size_t p = c.patch_size, g = c.grid(), w = c.image_size, ch = c.channels;
  std::vector<std::size_t> idx;
  idx.reserve(std::size_t{c.num_patches()} * c.patch_dim());
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t k = 0; k < ch; ++k)
            idx.push_back(((gy * p + py) * w + (gx * p + px)) * ch + k);
  return idx;
}

std::vector<std::size_t> unpatchify_indices(const ModelConfig& c) {
  const std::size_t p = c.patch_size, g = c.grid(), w = c.image_size, nc = c.num_classes;
  const std::size_t row = nc * p * p;
  std::vector<std::size_t> idx;
  idx.reserve(std::size_t{w} * w * nc);
  for (std::size_t h = 0; h < w; ++h)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t n = (h / p) * g + x / p;
      const std::size_t local = (h % p) * p + (x % p);
      for (std::size_t k = 0; k < nc; ++k) idx.push_back(n * row + local * nc + k);
    }
  return idx;
}

Tensor apply_hook(const ActivationHook& hook, std::uint16_t block, SiteKind kind, Tensor x) {
  if (!hook) return x;
  return hook(SiteId{block, kind}, x);
}

}  // namespace

SegModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.embed_dim;
  SegModel m;
  m.config = config;
  m.patch_embed = make_linear(config.patch_dim(), d, rng);
  m.pos_embed = random_tensor({config.num_patches(), d}, 0.02, rng);
  m.blocks.resize(config.num_layers);
  for (auto& b : m.blocks) {
    b.ln1 = make_norm(d);
    b.qkv = make_linear(d, 3 * d, rng);
    b.proj = make_linear(d, d, rng);
    b.ln2 = make_norm(d);
    b.fc1 = make_linear(d, config.mlp_dim(), rng);
    b.fc2 = make_linear(config.mlp_dim(), d, rng);
  }
  m.ln_final = make_norm(d);
  m.head = make_linear(d, std::size_t{config.num_classes} * config.patch_size * config.patch_size,
                       rng);
  return m;
}

SiteId SiteId::from_code(std::uint32_t code) {
  const auto kind = static_cast<std::uint8_t>(code & 0xFF);
  if (!(kind <= 8 || (kind >= 16 && kind <= 22)))
    throw FormatError("unknown quantization site kind " + std::to_string(kind));
  return SiteId{static_cast<std::uint16_t>(code >> 8), static_cast<SiteKind>(kind)};
}

std::string SiteId::name() const {
  static const char* const kActNames[] = {"ln1_out", "query", "key",  "value",  "attn_probs",
                                          "attn_ctx", "ln2_out", "mlp_hidden", "ln_final_out"};
  static const char* const kWeightNames[] = {"patch_embed.w", "qkv.w", "proj.w",
                                             "fc1.w", "fc2.w", "head.w", "pos_embed"};
  const auto k = static_cast<std::uint8_t>(kind);
  const std::string base = k >= 16 ? kWeightNames[k - 16] : kActNames[k];
  return "block" + std::to_string(block) + "." + base;
}

std::vector<SiteId> weight_sites(const ModelConfig& config) {
  const auto stem = static_cast<std::uint16_t>(config.num_layers);
  std::vector<SiteId> out{{stem, SiteKind::kWeightPatchEmbed}};
  for (std::uint16_t l = 0; l < config.num_layers; ++l) {
    for (auto k : {SiteKind::kWeightQkv, SiteKind::kWeightProj, SiteKind::kWeightFc1,
                   SiteKind::kWeightFc2})
      out.push_back({l, k});
  }
  out.push_back({stem, SiteKind::kWeightHead});
  out.push_back({stem, SiteKind::kWeightPosEmbed});
  return out;
}

Tensor& weight_for(SegModel& model, const SiteId& site) {
  switch (site.kind) {
    case SiteKind::kWeightPatchEmbed: return model.patch_embed.weight;
    case SiteKind::kWeightHead: return model.head.weight;
    case SiteKind::kWeightPosEmbed: return model.pos_embed;
    default: break;
  }
  if (site.block >= model.blocks.size()) throw InvalidArgument("weight site block out of range");
  auto& b = model.blocks[site.block];
  switch (site.kind) {
    case SiteKind::kWeightQkv: return b.qkv.weight;
    case SiteKind::kWeightProj: return b.proj.weight;
    case SiteKind::kWeightFc1: return b.fc1.weight;
    case SiteKind::kWeightFc2: return b.fc2.weight;
    default: throw InvalidArgument("not a weight site: " + site.name());
  }
}

const Tensor& weight_for(const SegModel& model, const SiteId& site) {
  return weight_for(const_cast<SegModel&>(model), site);
}

ForwardResult forward(const SegModel& model, const Tensor& image, const ActivationHook& hook) {
  const ModelConfig& c = model.config;
  const Shape expected{c.image_size, c.image_size, c.channels};
  if (image.shape() != expected) {
    throw ShapeError("forward: image shape " + to_string(image.shape()) + " does not match " +
                     to_string(expected));
  }
  // Index maps depend only on the config; cache per thread for the last config seen.
  thread_local ModelConfig cached_cfg{};
  thread_local std::vector<std::size_t> to_patches, to_pixels;
  if (to_patches.empty() || !(cached_cfg == c)) {
    to_patches = patchify_indices(c);
    to_pixels = unpatchify_indices(c);
    cached_cfg = c;
  }
  const std::size_t n = c.num_patches(), d = c.embed_dim, dh = c.head_dim();
  const auto stem = static_cast<std::uint16_t>(c.num_layers);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor patches = gather(image, to_patches, {n, c.patch_dim()});
  Tensor x = add(linear(patches, model.patch_embed.weight, model.patch_embed.bias), model.pos_embed);

  ForwardResult result;
  result.attn_outputs.reserve(c.num_layers);
  for (std::uint16_t l = 0; l < c.num_layers; ++l) {
    const EncoderBlock& b = model.blocks[l];
    Tensor h = layer_norm(x, b.ln1.gamma, b.ln1.beta);
    h = apply_hook(hook, l, SiteKind::kAttnNormOut, h);
    Tensor qkv = linear(h, b.qkv.weight, b.qkv.bias);
    Tensor q = apply_hook(hook, l, SiteKind::kQuery, slice_cols(qkv, 0, d));
    Tensor k = apply_hook(hook, l, SiteKind::kKey, slice_cols(qkv, d, d));
    Tensor v = apply_hook(hook, l, SiteKind::kValue, slice_cols(qkv, 2 * d, d));
    std::vector<Tensor> heads;
    heads.reserve(c.num_heads);
    for (std::size_t hd = 0; hd < c.num_heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, dh);
      Tensor kh = slice_cols(k, hd * dh, dh);
      Tensor vh = slice_cols(v, hd * dh, dh);
      Tensor probs = softmax(scale(matmul(qh, transpose(kh)), attn_scale), 1);
      probs = apply_hook(hook, l, SiteKind::kAttnProbs, probs);
      heads.push_back(matmul(probs, vh));
    }
    Tensor ctx = apply_hook(hook, l, SiteKind::kAttnContext, concat_cols(heads));
    Tensor attn_out = linear(ctx, b.proj.weight, b.proj.bias);
    result.attn_outputs.push_back(attn_out);
    x = add(x, attn_out);

    Tensor m = layer_norm(x, b.ln2.gamma, b.ln2.beta);
    m = apply_hook(hook, l, SiteKind::kMlpNormOut, m);
    m = gelu(linear(m, b.fc1.weight, b.fc1.bias));
    m = apply_hook(hook, l, SiteKind::kMlpHidden, m);
    x = add(x, linear(m, b.fc2.weight, b.fc2.bias));
  }
  Tensor f = layer_norm(x, model.ln_final.gamma, model.ln_final.beta);
  f = apply_hook(hook, stem, SiteKind::kFinalNormOut, f);
  Tensor patch_logits = linear(f, model.head.weight, model.head.bias);
  const std::size_t pixels = std::size_t{c.image_size} * c.image_size;
  result.logits = gather(patch_logits, to_pixels, {pixels, c.num_classes});
  result.scores = reshape(softmax(result.logits, 1), {c.image_size, c.image_size, c.num_classes});
  return result;
}

std::vector<int> predict_labels(const Tensor& scores) {
  if (scores.rank() != 3) throw ShapeError("predict_labels: expected [H x W x C] scores");
  const std::size_t classes = scores.dim(2);
  const std::size_t pixels = scores.dim(0) * scores.dim(1);
  const auto s = scores.data();
  std::vector<int> out(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k)
      if (s[i * classes + k] > s[i * classes + best]) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace dfq
