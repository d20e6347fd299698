#include "dfq/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "dfq/optim.hpp"
#include "kde_kernel.hpp"

namespace dfq {

// ---- semantic loss ----------------------------------------------------------

SemanticTerms semantic_terms(const Tensor& scores, const PseudoLabelSet& labels) {
  if (scores.rank() != 3) throw ShapeError("semantic_terms: expected [H x W x C] scores");
  const std::size_t h = scores.dim(0), w = scores.dim(1), c = scores.dim(2);
  if (h != labels.height || w != labels.width)
    throw ShapeError("semantic_terms: label grid " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " does not match scores " + to_string(scores.shape()));
  const std::size_t n_pix = h * w;
  const std::size_t labeled = labels.labeled_pixels();
  if (labeled == 0) return {Tensor::scalar(0.0), Tensor::scalar(0.0)};

  std::vector<std::size_t> bg_idx(n_pix);
  for (std::size_t i = 0; i < n_pix; ++i) bg_idx[i] = i * c;
  const Tensor fg = add_scalar(scale(gather(scores, std::move(bg_idx), {n_pix}), -1.0), 1.0);

  std::vector<double> g(n_pix, 0.0);
  std::vector<std::size_t> cls_idx;
  cls_idx.reserve(labeled);
  for (const auto& m : labels.masks)
    for (auto p : m.pixels) {
      if (m.category <= 0 || static_cast<std::size_t>(m.category) >= c)
        throw InvalidArgument("semantic_terms: mask category " + std::to_string(m.category) +
                              " outside [1, " + std::to_string(c - 1) + "]");
      g[p] = 1.0;
      cls_idx.push_back(p * c + static_cast<std::size_t>(m.category));
    }
  const Tensor gt({n_pix}, std::move(g));
  const Tensor inter = reduce_sum(minimum(fg, gt));
  const Tensor uni = reduce_sum(maximum(fg, gt));
  const Tensor mask = add_scalar(scale(div(inter, uni), -1.0), 1.0);

  const Tensor picked = gather(scores, std::move(cls_idx), {labeled});
  const Tensor klass = scale(reduce_mean(log(clip(picked, kLogFloor, 1.0))), -1.0);
  return {mask, klass};
}

Tensor semantic_loss(const Tensor& scores, const PseudoLabelSet& labels, double alpha) {
  auto t = semantic_terms(scores, labels);
  return add(t.mask, scale(t.klass, alpha));
}

// ---- patch-similarity entropy ----------------------------------------------

Tensor patch_similarity(const Tensor& attn_output) {
  if (attn_output.rank() != 2) throw ShapeError("patch_similarity: expected [N x D] input");
  return cosine_similarity_matrix(attn_output);
}

namespace {

struct SampleStats {
  double mean = 0.0;
  double sd = 0.0;  // unbiased
};

SampleStats stats(std::span<const double> x) {
  const double k = static_cast<double>(x.size());
  SampleStats s;
  for (double v : x) s.mean += v;
  s.mean /= k;
  double ss = 0.0;
  for (double v : x) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / (k - 1.0));
  return s;
}

constexpr double kSilvermanFactor = 1.06;
// Pairwise kernels are cached for the gradient pass below this many pairs.
constexpr std::size_t kMaxCachedPairs = std::size_t{8} << 20;

}  // namespace

double silverman_bandwidth(std::span<const double> points) {
  if (points.size() < 2) throw InvalidArgument("silverman_bandwidth: need at least 2 points");
  const double sd = std::max(stats(points).sd, kBandwidthStdFloor);
  return kSilvermanFactor * sd * std::pow(static_cast<double>(points.size()), -0.2);
}

Tensor kde_entropy_of_points(const Tensor& points, const KdeOptions& options) {
  if (points.rank() != 1) throw ShapeError("kde_entropy_of_points: expected a vector");
  const std::size_t k = points.size();
  if (k < 2) throw InvalidArgument("kde_entropy_of_points: need at least 2 points");
  const auto x = points.data();
  const bool loo = options.estimator == EntropyEstimator::kLeaveOneOut;

  const SampleStats st = stats(x);
  const bool floored = !(st.sd >= kBandwidthStdFloor);
  const double sd = floored ? kBandwidthStdFloor : st.sd;
  const double c0 = kSilvermanFactor * std::pow(static_cast<double>(k), -0.2);
  const double h = c0 * sd;
  const double inv2h2 = 1.0 / (2.0 * h * h);

  const bool want_grad = points.requires_grad() && Tape::current() != nullptr;
  const std::size_t pairs = k * (k - 1) / 2;
  const bool cached = want_grad && pairs <= kMaxCachedPairs;
  std::vector<double> cache(cached ? pairs : k);

  std::vector<double> s(k, loo ? 0.0 : 1.0);
  std::size_t row = 0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    const std::size_t n = k - i - 1;
    double* e = cached ? cache.data() + row : cache.data();
    s[i] += detail::kernel_row(x[i], x.data() + i + 1, n, inv2h2, e, s.data() + i + 1);
    row += n;
  }

  const double denom = static_cast<double>(loo ? k - 1 : k);
  double sum_log = 0.0;
  for (double v : s) sum_log += std::log(v);
  const double kd = static_cast<double>(k);
  const double value = -sum_log / kd + std::log(denom * h * std::sqrt(2.0 * std::numbers::pi));

  Tensor out = make_output({1}, {value}, {points}, "kde_entropy");
  if (!out.requires_grad()) return out;

  // dH/dx_i through the kernels, plus the bandwidth path.
  std::vector<double> grad(k, 0.0);
  std::vector<double> wgt(k);
  for (std::size_t i = 0; i < k; ++i) wgt[i] = -1.0 / (kd * s[i]);
  const double inv_h2 = 1.0 / (h * h);
  double dh = 1.0 / h;
  std::vector<double> scratch(cached ? 0 : k), sink(cached ? 0 : k);
  row = 0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    const std::size_t n = k - i - 1;
    const double* e = cached ? cache.data() + row : scratch.data();
    if (!cached) detail::kernel_row(x[i], x.data() + i + 1, n, inv2h2, scratch.data(), sink.data());
    grad[i] += detail::gradient_row(x[i], wgt[i], x.data() + i + 1, wgt.data() + i + 1, e, n, inv_h2,
                                    1.0 / h, grad.data() + i + 1, &dh);
    row += n;
  }
  if (!floored) {
    const double f = dh * c0 / ((kd - 1.0) * sd);
    for (std::size_t j = 0; j < k; ++j) grad[j] += f * (x[j] - st.mean);
  }

  auto on = out.node();
  auto pn = points.node();
  record_backward([on, pn, grad = std::move(grad)] {
    if (on->grad.empty()) return;
    const double g = on->grad[0];
    auto dst = accumulate_grad(pn);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g * grad[i];
  });
  return out;
}

Tensor kde_entropy(const Tensor& gamma, const KdeOptions& options) {
  if (gamma.rank() != 2 || gamma.dim(0) != gamma.dim(1))
    throw ShapeError("kde_entropy: expected a square matrix, got " + to_string(gamma.shape()));
  const std::size_t n = gamma.dim(0);
  if (n < 2) throw InvalidArgument("kde_entropy: need N >= 2 rows");
  std::vector<std::size_t> idx;
  idx.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) idx.push_back(i * n + j);
  const std::size_t k = idx.size();
  return kde_entropy_of_points(gather(gamma, std::move(idx), {k}), options);
}

Tensor distribution_loss(const std::vector<Tensor>& attn_outputs, const KdeOptions& options) {
  if (attn_outputs.empty()) throw InvalidArgument("distribution_loss: no layer outputs");
  Tensor total;
  for (const auto& o : attn_outputs) {
    Tensor h = kde_entropy(patch_similarity(o), options);
    total = total.defined() ? add(total, h) : h;
  }
  return total;
}

// ---- synthesis loop ---------------------------------------------------------

double SynthesisConfig::resolved_eps2(const ModelConfig& model) const {
  if (eps2 >= 0.0) return eps2;
  // Floored at one pixel so the rule stays a real filter on tiny images.
  return std::max(1.0, 0.002 * static_cast<double>(model.image_size) * static_cast<double>(model.image_size));
}

void SynthesisConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidArgument("synthesis config: " + what);
  };
  need(std::isfinite(alpha) && alpha >= 0.0, "alpha must be finite and >= 0");
  need(std::isfinite(beta) && beta >= 0.0, "beta must be finite and >= 0");
  need(std::isfinite(eps1) && eps1 > 0.0 && eps1 < 1.0, "eps1 must lie in (0, 1)");
  need(std::isfinite(eps2) && (eps2 < 0.0 || eps2 >= 1.0), "eps2 must be >= 1 (or negative for the default)");
  need(total_iters >= 0, "total_iters must be >= 0");
  need(evolve_iters >= 0 && evolve_iters <= total_iters, "evolve_iters must lie in [0, total_iters]");
  need(std::isfinite(lr) && lr > 0.0, "lr must be > 0");
  need(std::isfinite(lr_min) && lr_min >= 0.0 && lr_min <= lr, "lr_min must lie in [0, lr]");
  need(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
  need(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
}

Tensor init_image(std::uint64_t seed, const ModelConfig& config) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t side = config.image_size;
  std::vector<double> v(side * side * config.channels);
  for (auto& x : v) x = n01(rng);
  return Tensor({side, side, config.channels}, std::move(v), true);
}

namespace {

// Candidates large enough to pass the size filter. Without this the
// mean-score argmax is dominated by single-pixel speckle.
std::vector<Mask> salient_candidates(const Tensor& scores, double eps2) {
  std::vector<Mask> out;
  for (auto& m : extract_candidate_masks(scores))
    if (static_cast<double>(m.size()) > eps2) out.push_back(std::move(m));
  return out;
}

}  // namespace

SynthesisResult synthesize(const SegModel& model, const SynthesisConfig& config) {
  config.validate();
  model.config.validate();
  const double eps2 = config.resolved_eps2(model.config);
  const double sign = config.entropy_sign == EntropySign::kMaximize ? -1.0 : 1.0;

  SynthesisResult res;
  res.image = init_image(config.seed, model.config);
  if (config.total_iters == 0) {
    res.image = res.image.detach();
    res.labels = PseudoLabelSet(model.config.image_size, model.config.image_size);
    return res;
  }
  res.labels = init_labels(config.seed, model.config, eps2);
  Adam adam({res.image}, AdamOptions{config.adam_beta1, config.adam_beta2, 1e-8});
  res.trace.reserve(static_cast<std::size_t>(config.total_iters));

  Tensor last_good = res.image.detach();
  for (long t = 0; t < config.total_iters; ++t) {
    try {
      Tape tape;
      ForwardResult fr = forward(model, res.image);
      if (t < config.evolve_iters) {
        if (auto best = select_pseudo_positive(salient_candidates(fr.scores, eps2))) {
          if (evolve_labels(res.labels, std::move(*best), config.eps1, eps2, t) !=
              EvolveOutcome::kAccepted)
            ++res.rejected;
        }
      }
      const Tensor l_sm = semantic_loss(fr.scores, res.labels, config.alpha);
      const Tensor l_dm = distribution_loss(fr.attn_outputs, config.kde);
      const Tensor l_is = add(l_sm, scale(l_dm, sign * config.beta));
      tape.backward(l_is);
      res.trace.push_back({t, l_sm.item(), l_dm.item(), l_is.item(), res.labels.masks.size()});

      last_good = res.image.detach();
      adam.step(cosine_lr(t, config.total_iters, config.lr, config.lr_min));
      for (double v : res.image.data())
        if (!std::isfinite(v)) throw NumericError("image became non-finite after update");
    } catch (const NumericError& e) {
      throw SynthesisError("synthesis diverged at iteration " + std::to_string(t) + ": " + e.what(), t,
                           last_good);
    }
  }
  res.image = res.image.detach();
  return res;
}

}  // namespace dfq
