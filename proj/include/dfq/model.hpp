#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dfq/tensor.hpp"

namespace dfq {

struct ModelConfig {
  std::uint32_t image_size = 64;
  std::uint32_t patch_size = 8;
  std::uint32_t embed_dim = 64;
  std::uint32_t num_layers = 4;
  std::uint32_t num_heads = 4;
  std::uint32_t mlp_ratio = 2;
  std::uint32_t num_classes = 5;  // class 0 is background
  std::uint32_t channels = 1;

  std::uint32_t grid() const { return image_size / patch_size; }
  std::uint32_t num_patches() const { return grid() * grid(); }
  std::uint32_t patch_dim() const { return patch_size * patch_size * channels; }
  std::uint32_t mlp_dim() const { return embed_dim * mlp_ratio; }
  std::uint32_t head_dim() const { return embed_dim / num_heads; }

  // Throws InvalidArgument naming the violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct Linear {
  Tensor weight;  // [in x out]; used as x * weight
  Tensor bias;    // [out]
};

struct Norm {
  Tensor gamma;
  Tensor beta;
};

struct EncoderBlock {
  Norm ln1;
  Linear qkv;  // D -> 3D
  Linear proj;
  Norm ln2;
  Linear fc1;
  Linear fc2;
};

// Patch embedding, L pre-norm encoder blocks, final LayerNorm and a per-patch
// linear head emitting C logits for each of the P*P pixels of the patch.
struct SegModel {
  ModelConfig config;
  Linear patch_embed;
  Tensor pos_embed;  // [N x D]
  std::vector<EncoderBlock> blocks;
  Norm ln_final;
  Linear head;  // D -> C*P*P

  // Every parameter tensor, in serialization order.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;

  SegModel clone() const;
  void set_trainable(bool on);
};

SegModel init_model(const ModelConfig& config, std::uint64_t seed);

// Quantization sites. Activation sites are the inputs of every matmul except
// the raw pixels; weight sites are the matmul weight matrices and the
// position table.
enum class SiteKind : std::uint8_t {
  kAttnNormOut = 0,  // ln1 output, feeds qkv
  kQuery = 1,
  kKey = 2,
  kValue = 3,
  kAttnProbs = 4,
  kAttnContext = 5,  // feeds proj
  kMlpNormOut = 6,   // ln2 output, feeds fc1
  kMlpHidden = 7,    // gelu(fc1) output, feeds fc2
  kFinalNormOut = 8, // ln_final output, feeds head
  kWeightPatchEmbed = 16,
  kWeightQkv = 17,
  kWeightProj = 18,
  kWeightFc1 = 19,
  kWeightFc2 = 20,
  kWeightHead = 21,
  kWeightPosEmbed = 22,  // not a matmul weight, but stored quantized like one
};

struct SiteId {
  std::uint16_t block = 0;  // encoder block index; num_layers for stem/head sites
  SiteKind kind = SiteKind::kAttnNormOut;

  std::uint32_t code() const { return (std::uint32_t{block} << 8) | static_cast<std::uint8_t>(kind); }
  static SiteId from_code(std::uint32_t code);
  bool is_weight() const { return static_cast<std::uint8_t>(kind) >= 16; }
  std::string name() const;
  auto operator<=>(const SiteId&) const = default;
};

// Activation-site interceptor. Called with every matmul input (in execution
// order; the attention-probability site once per head) and returns the tensor
// to use in its place.
using ActivationHook = std::function<Tensor(const SiteId&, const Tensor&)>;

struct ForwardResult {
  Tensor scores;  // [H x W x C], softmax over C
  Tensor logits;  // [H*W x C]
  std::vector<Tensor> attn_outputs;  // L entries, each [N x D]
};

// image: [H x W x ch]
ForwardResult forward(const SegModel& model, const Tensor& image,
                      const ActivationHook& hook = nullptr);

// The weight matrix for a weight site and the list of all weight sites.
std::vector<SiteId> weight_sites(const ModelConfig& config);
Tensor& weight_for(SegModel& model, const SiteId& site);
const Tensor& weight_for(const SegModel& model, const SiteId& site);

// Per-pixel argmax of the class scores; ties resolve to the lowest class.
std::vector<int> predict_labels(const Tensor& scores);

}  // namespace dfq
