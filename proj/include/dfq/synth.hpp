#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfq/error.hpp"
#include "dfq/model.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

// A 4-connected region of one foreground category.
struct Mask {
  std::vector<std::uint32_t> pixels;  // row-major indices, ascending
  std::vector<double> scores;         // S[pixel, category], aligned with pixels
  int category = 1;
  double peak = 0.0;        // max of scores
  double mean_score = 0.0;  // mean of scores
  long birth = -1;          // iteration at which the mask entered the label set
  bool seeded = false;      // the random initial label, not produced by the filter

  std::size_t size() const { return pixels.size(); }
};

// The evolving pseudo ground truth: pixel-disjoint accepted masks.
struct PseudoLabelSet {
  std::size_t height = 0, width = 0;
  std::vector<Mask> masks;
  std::vector<std::uint8_t> occupied;  // H*W claim grid

  PseudoLabelSet() = default;
  PseudoLabelSet(std::size_t h, std::size_t w) : height(h), width(w), occupied(h * w, 0) {}
  std::size_t labeled_pixels() const;
  // Per-pixel category, 0 where unclaimed.
  std::vector<int> label_map() const;
};

// Argmax over classes, then 4-connected components per foreground class.
std::vector<Mask> extract_candidate_masks(const Tensor& scores);

// Highest mean in-mask score; ties go to the larger mask, then the lower
// category. Empty input gives nullopt.
std::optional<Mask> select_pseudo_positive(const std::vector<Mask>& candidates);

enum class EvolveOutcome { kAccepted, kLowConfidence, kTooSmall };

// Removes already-claimed pixels from m (keeping the largest remaining
// 4-connected piece), then accepts it iff peak > eps1 and size > eps2.
EvolveOutcome evolve_labels(PseudoLabelSet& labels, Mask m, double eps1, double eps2, long iteration);

// Soft-IoU mask term plus alpha times the mean in-mask negative log score.
// Returns an untracked zero when labels are empty.
Tensor semantic_loss(const Tensor& scores, const PseudoLabelSet& labels, double alpha);

struct SemanticTerms {
  Tensor mask;   // 1 - soft IoU
  Tensor klass;  // mean -log S over labeled pixels
};
SemanticTerms semantic_terms(const Tensor& scores, const PseudoLabelSet& labels);

inline constexpr double kLogFloor = 1e-12;

Tensor patch_similarity(const Tensor& attn_output);

enum class BandwidthRule { kSilverman };
enum class EntropyEstimator { kResubstitution, kLeaveOneOut };

struct KdeOptions {
  BandwidthRule bandwidth = BandwidthRule::kSilverman;
  EntropyEstimator estimator = EntropyEstimator::kResubstitution;
};

inline constexpr double kBandwidthStdFloor = 1e-4;

// Differential entropy of a 1-D sample under a Gaussian KDE; differentiable
// in the sample values, including through the bandwidth.
Tensor kde_entropy_of_points(const Tensor& points, const KdeOptions& options = {});
// Entropy of the strict upper triangle of a similarity matrix (N >= 2).
Tensor kde_entropy(const Tensor& gamma, const KdeOptions& options = {});
double silverman_bandwidth(std::span<const double> points);

// Sum over layers of the patch-similarity entropy.
Tensor distribution_loss(const std::vector<Tensor>& attn_outputs, const KdeOptions& options = {});

enum class EntropySign {
  kMaximize,  // minimize L_SM - beta * entropy
  kMinimize,  // minimize L_SM + beta * entropy
};

struct SynthesisConfig {
  double alpha = 0.5;
  double beta = 0.05;
  double eps1 = 0.8;
  double eps2 = -1.0;  // negative: max(1, 0.002 * H * W)
  long total_iters = 1500;
  long evolve_iters = 500;
  double lr = 0.1;
  double lr_min = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::uint64_t seed = 0;
  KdeOptions kde;
  EntropySign entropy_sign = EntropySign::kMaximize;

  double resolved_eps2(const ModelConfig& model) const;
  void validate() const;
};

struct TraceRow {
  long iteration = 0;
  double l_sm = 0.0;
  double l_dm = 0.0;
  double l_is = 0.0;
  std::size_t num_masks = 0;
};

struct SynthesisResult {
  Tensor image;
  PseudoLabelSet labels;
  std::vector<TraceRow> trace;
  std::size_t rejected = 0;  // candidates refused by the filter
};

class SynthesisError : public NumericError {
 public:
  SynthesisError(const std::string& what, long iteration, Tensor last_good)
      : NumericError(what), iteration_(iteration), last_good_(std::move(last_good)) {}
  long iteration() const { return iteration_; }
  const Tensor& last_good_image() const { return last_good_; }

 private:
  long iteration_;
  Tensor last_good_;
};

// i.i.d. N(0, 1) image with gradient tracking enabled.
Tensor init_image(std::uint64_t seed, const ModelConfig& config);
// One random rectangle of a random foreground category.
PseudoLabelSet init_labels(std::uint64_t seed, const ModelConfig& config, double eps2);

SynthesisResult synthesize(const SegModel& model, const SynthesisConfig& config);

}  // namespace dfq
