#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "dfq/dataset.hpp"
#include "dfq/error.hpp"
#include "dfq/synth.hpp"
#include "dfq/train.hpp"
#include "support.hpp"

using namespace dfq;

namespace {

// H x W x C scores where every pixel is background except those listed,
// which put all mass on category.
Tensor one_hot_scores(std::size_t h, std::size_t w, std::size_t c, const std::vector<std::size_t>& pixels,
                      int category) {
  std::vector<double> v(h * w * c, 0.0);
  for (std::size_t p = 0; p < h * w; ++p) v[p * c] = 1.0;
  for (std::size_t p : pixels) {
    v[p * c] = 0.0;
    v[p * c + static_cast<std::size_t>(category)] = 1.0;
  }
  return Tensor(Shape{h, w, c}, std::move(v));
}

std::vector<std::size_t> square(std::size_t w, std::size_t r0, std::size_t c0, std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t r = r0; r < r0 + n; ++r)
    for (std::size_t c = c0; c < c0 + n; ++c) out.push_back(r * w + c);
  return out;
}

Mask make_mask(std::uint32_t first, std::uint32_t count, double peak, double mean, int category = 1) {
  Mask m;
  for (std::uint32_t i = 0; i < count; ++i) m.pixels.push_back(first + i);
  m.scores.assign(count, mean);
  m.scores[0] = peak;
  m.category = category;
  m.peak = peak;
  m.mean_score = mean;
  return m;
}

PseudoLabelSet labels_on(std::size_t h, std::size_t w, const std::vector<std::uint32_t>& pixels, int category) {
  PseudoLabelSet set(h, w);
  Mask m;
  m.pixels = pixels;
  m.scores.assign(pixels.size(), 1.0);
  m.category = category;
  m.peak = m.mean_score = 1.0;
  for (auto p : pixels) set.occupied[p] = 1;
  set.masks.push_back(std::move(m));
  return set;
}

std::vector<std::uint32_t> range_u32(std::uint32_t a, std::uint32_t b) {
  std::vector<std::uint32_t> v;
  for (std::uint32_t i = a; i < b; ++i) v.push_back(i);
  return v;
}

// Two-class scores whose foreground probability is 1 on the given pixels.
Tensor binary_foreground(std::size_t h, std::size_t w, std::uint32_t a, std::uint32_t b) {
  std::vector<std::size_t> px;
  for (std::uint32_t i = a; i < b; ++i) px.push_back(i);
  return one_hot_scores(h, w, 2, px, 1);
}

// Straightforward resubstitution estimator written independently of the
// library: Silverman bandwidth with the n-1 standard deviation.
double naive_kde_entropy(const std::vector<double>& x) {
  const double k = static_cast<double>(x.size());
  double mean = 0.0, ss = 0.0;
  for (double v : x) mean += v / k;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(ss / (k - 1.0)), 1e-4);
  const double h = 1.06 * sd * std::pow(k, -0.2);
  double total = 0.0;
  for (double xi : x) {
    double f = 0.0;
    for (double xj : x) f += std::exp(-(xi - xj) * (xi - xj) / (2 * h * h));
    f /= k * h * std::sqrt(2 * std::numbers::pi);
    total -= std::log(f);
  }
  return total / k;
}

std::vector<double> upper_triangle(const Tensor& g) {
  const std::size_t n = g.shape()[0];
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out.push_back(g[i * n + j]);
  return out;
}

const SegModel& trained_tiny() {
  static const SegModel m = [] {
    const ModelConfig c = test::tiny_config();
    TrainOptions o;
    o.epochs = 6;
    return train(init_model(c, 3), generate_dataset(3, 48, c), o).model;
  }();
  return m;
}

SynthesisConfig short_run(std::uint64_t seed) {
  SynthesisConfig s;
  s.seed = seed;
  s.total_iters = 300;
  s.evolve_iters = 100;
  return s;
}

}  // namespace

TEST_CASE("candidate masks") {
  SUBCASE("uniform scores give no candidates") {
    const Tensor s(Shape{6, 6, 3}, std::vector<double>(108, 1.0 / 3.0));
    CHECK(extract_candidate_masks(s).empty());
  }
  SUBCASE("one square") {
    const auto px = square(12, 3, 4, 5);
    const auto masks = extract_candidate_masks(one_hot_scores(12, 12, 3, px, 2));
    REQUIRE(masks.size() == 1);
    CHECK(masks[0].size() == 25);
    CHECK(masks[0].category == 2);
    CHECK(masks[0].peak == 1.0);
    CHECK(masks[0].mean_score == 1.0);
  }
  SUBCASE("diagonally touching squares are separate components") {
    auto px = square(12, 0, 0, 3);
    const auto b = square(12, 3, 3, 3);
    px.insert(px.end(), b.begin(), b.end());
    const auto masks = extract_candidate_masks(one_hot_scores(12, 12, 3, px, 2));
    REQUIRE(masks.size() == 2);
    CHECK(masks[0].size() == 9);
    CHECK(masks[1].size() == 9);
  }
}

TEST_CASE("pseudo-positive selection") {
  CHECK_FALSE(select_pseudo_positive({}).has_value());
  const Mask only = make_mask(0, 5, 0.7, 0.6);
  CHECK(select_pseudo_positive({only})->pixels == only.pixels);
  const auto best = select_pseudo_positive({make_mask(0, 5, 0.95, 0.6), make_mask(10, 5, 0.95, 0.9)});
  CHECK(best->mean_score == 0.9);
  const auto larger = select_pseudo_positive({make_mask(0, 20, 0.9, 0.7), make_mask(40, 30, 0.9, 0.7)});
  CHECK(larger->size() == 30);
  const auto lower = select_pseudo_positive({make_mask(0, 20, 0.9, 0.7, 3), make_mask(40, 20, 0.9, 0.7, 2)});
  CHECK(lower->category == 2);
}

TEST_CASE("label evolution filters") {
  PseudoLabelSet labels(10, 10);
  CHECK(evolve_labels(labels, make_mask(0, 50, 0.9, 0.85), 0.8, 20, 3) == EvolveOutcome::kAccepted);
  REQUIRE(labels.masks.size() == 1);
  CHECK(labels.masks[0].birth == 3);
  CHECK(labels.labeled_pixels() == 50);

  CHECK(evolve_labels(labels, make_mask(50, 30, 0.5, 0.45), 0.8, 20, 4) == EvolveOutcome::kLowConfidence);
  CHECK(evolve_labels(labels, make_mask(10, 30, 0.95, 0.9), 0.8, 20, 5) == EvolveOutcome::kTooSmall);
  CHECK(labels.masks.size() == 1);

  // Overlap is trimmed, then the remainder is judged on its own size.
  CHECK(evolve_labels(labels, make_mask(40, 40, 0.95, 0.9), 0.8, 20, 6) == EvolveOutcome::kAccepted);
  REQUIRE(labels.masks.size() == 2);
  CHECK(labels.masks[1].size() == 30);
  CHECK(labels.masks[1].pixels.front() == 50);
}

TEST_CASE("semantic loss hand cases") {
  const std::size_t h = 5, w = 8;
  const PseudoLabelSet g = labels_on(h, w, range_u32(0, 20), 1);

  const SemanticTerms exact = semantic_terms(binary_foreground(h, w, 0, 20), g);
  CHECK(exact.mask.item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(exact.klass.item() == doctest::Approx(0.0).epsilon(1e-12));

  CHECK(semantic_terms(binary_foreground(h, w, 20, 40), g).mask.item() == doctest::Approx(1.0));
  CHECK(semantic_terms(binary_foreground(h, w, 10, 30), g).mask.item() == doctest::Approx(2.0 / 3.0));

  const Tensor l = semantic_loss(binary_foreground(h, w, 10, 30), g, 0.5);
  // Half the labeled pixels score 0 on their class, clamped at 1e-12.
  CHECK(l.item() == doctest::Approx(2.0 / 3.0 + 0.5 * 0.5 * -std::log(kLogFloor)));
  CHECK(semantic_loss(binary_foreground(h, w, 10, 30), PseudoLabelSet(h, w), 0.5).item() == 0.0);
}

TEST_CASE("patch similarity is a symmetric cosine matrix") {
  std::mt19937_64 rng(4);
  const Tensor g = patch_similarity(test::random_tensor({12, 6}, rng));
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(std::abs(g[i * 12 + i] - 1.0) <= 1e-12);
    for (std::size_t j = 0; j < 12; ++j) {
      CHECK(g[i * 12 + j] == g[j * 12 + i]);
      CHECK(std::abs(g[i * 12 + j]) <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("KDE entropy of a standard normal sample") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  std::vector<double> x(10000);
  for (auto& v : x) v = n01(rng);
  const double h = kde_entropy_of_points(Tensor::vector(x)).item();
  MESSAGE("entropy " << h);
  CHECK(std::abs(h - 0.5 * std::log(2 * std::numbers::pi * std::numbers::e)) < 0.1);
}

TEST_CASE("KDE entropy of identical points is finite and very negative") {
  const double h = kde_entropy_of_points(Tensor::vector(std::vector<double>(50, 0.3))).item();
  CHECK(std::isfinite(h));
  CHECK(h < -5);
}

TEST_CASE("KDE entropy grows when the spread doubles") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = test::random_tensor({200}, rng, -1.0, 1.0);
    for (auto est : {EntropyEstimator::kResubstitution, EntropyEstimator::kLeaveOneOut}) {
      KdeOptions o;
      o.estimator = est;
      CHECK(kde_entropy_of_points(scale(x, 2.0), o).item() > kde_entropy_of_points(x, o).item());
    }
  }
}

TEST_CASE("KDE entropy matches an independent implementation") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 5; ++t) {
    const Tensor x = test::random_tensor({300}, rng, -0.5, 0.9);
    const std::vector<double> v(x.data().begin(), x.data().end());
    CHECK(kde_entropy_of_points(x).item() == doctest::Approx(naive_kde_entropy(v)).epsilon(1e-9));
  }
  CHECK(silverman_bandwidth(std::vector<double>{0.0, 2.0}) ==
        doctest::Approx(1.06 * std::sqrt(2.0) * std::pow(2.0, -0.2)));
}

TEST_CASE("KDE entropy gradients") {
  std::mt19937_64 rng(5);
  for (auto est : {EntropyEstimator::kResubstitution, EntropyEstimator::kLeaveOneOut}) {
    KdeOptions o;
    o.estimator = est;
    for (int t = 0; t < 10; ++t) {
      const double err = test::gradient_error(
          [&](const std::vector<Tensor>& in) { return kde_entropy_of_points(in[0], o); },
          {test::random_tensor({25}, rng, -1.0, 1.0)});
      CHECK(err < 1e-4);
    }
  }
  const double err = test::gradient_error(
      [](const std::vector<Tensor>& in) { return distribution_loss({in[0], in[1]}); },
      {test::random_tensor({9, 5}, rng), test::random_tensor({9, 5}, rng)});
  CHECK(err < 1e-4);
}

TEST_CASE("distribution loss sums layers and ignores patch order") {
  std::mt19937_64 rng(6);
  const Tensor a = test::random_tensor({16, 8}, rng), b = test::random_tensor({16, 8}, rng);
  const double one = distribution_loss({a}).item();
  CHECK(one == doctest::Approx(naive_kde_entropy(upper_triangle(patch_similarity(a)))).epsilon(1e-9));
  CHECK(distribution_loss({a, a}).item() == doctest::Approx(2 * one).epsilon(1e-12));
  CHECK(distribution_loss({a, b}).item() ==
        doctest::Approx(one + distribution_loss({b}).item()).epsilon(1e-12));

  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> shuffled;
  for (std::size_t p : perm) shuffled.insert(shuffled.end(), a.data().begin() + p * 8, a.data().begin() + p * 8 + 8);
  CHECK(distribution_loss({Tensor(Shape{16, 8}, shuffled)}).item() == doctest::Approx(one).epsilon(1e-10));
}

TEST_CASE("initial image statistics") {
  const ModelConfig c;
  const Tensor a = init_image(7, c), b = init_image(7, c);
  CHECK(std::ranges::equal(a.data(), b.data()));
  CHECK(a.requires_grad());
  const double n = static_cast<double>(a.size());
  double mean = 0.0, var = 0.0;
  for (double v : a.data()) mean += v / n;
  for (double v : a.data()) var += (v - mean) * (v - mean) / (n - 1);
  CHECK(std::abs(mean) < 3 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("initial label is one seeded rectangle") {
  const ModelConfig c;
  const PseudoLabelSet l = init_labels(5, c, SynthesisConfig{}.resolved_eps2(c));
  REQUIRE(l.masks.size() == 1);
  CHECK(l.masks[0].seeded);
  CHECK(l.masks[0].category >= 1);
  CHECK(l.masks[0].category < static_cast<int>(c.num_classes));
  CHECK(l.labeled_pixels() == l.masks[0].size());
}

TEST_CASE("image synthesis loss gradient end to end") {
  const ModelConfig c = test::tiny_config();
  const SegModel& m = trained_tiny();
  const PseudoLabelSet labels = init_labels(1, c, 1.0);
  for (auto sign : {1.0, -1.0}) {
    const double err = test::gradient_error(
        [&](const std::vector<Tensor>& in) {
          const ForwardResult r = forward(m, in[0]);
          return add(semantic_loss(r.scores, labels, 0.5), scale(distribution_loss(r.attn_outputs), -sign * 0.05));
        },
        {init_image(2, c).detach()});
    CHECK(err < 1e-3);
  }
}

TEST_CASE("synthesis configuration validation") {
  SynthesisConfig s;
  CHECK_NOTHROW(s.validate());
  s.evolve_iters = 2000;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  s = SynthesisConfig{};
  s.eps1 = 1.0;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  s = SynthesisConfig{};
  s.eps2 = 0.5;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  s = SynthesisConfig{};
  s.alpha = -1;
  CHECK_THROWS_AS(s.validate(), InvalidArgument);
  CHECK(SynthesisConfig{}.resolved_eps2(ModelConfig{}) == doctest::Approx(0.002 * 64 * 64));
  CHECK(SynthesisConfig{}.resolved_eps2(test::tiny_config()) == 1.0);
}

TEST_CASE("zero iterations return the initial image and no labels") {
  SynthesisConfig s;
  s.seed = 4;
  s.total_iters = 0;
  s.evolve_iters = 0;
  const SynthesisResult r = synthesize(trained_tiny(), s);
  CHECK(std::ranges::equal(r.image.data(), init_image(4, test::tiny_config()).data()));
  CHECK(r.labels.masks.empty());
  CHECK(r.trace.empty());
}

TEST_CASE("synthesis descends, keeps labels sound and is reproducible") {
  const ModelConfig c = test::tiny_config();
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    CAPTURE(seed);
    const SynthesisConfig cfg = short_run(seed);
    const SynthesisResult r = synthesize(trained_tiny(), cfg);
    REQUIRE(r.trace.size() == 300);
    double lead = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 100; ++i) lead += r.trace[i].l_is, tail += r.trace[200 + i].l_is;
    CHECK(tail < lead);
    for (std::size_t i = 1; i < r.trace.size(); ++i) {
      CHECK(r.trace[i].num_masks >= r.trace[i - 1].num_masks);
      if (r.trace[i].iteration >= cfg.evolve_iters) CHECK(r.trace[i].num_masks == r.trace[i - 1].num_masks);
    }
    std::vector<int> owner(c.image_size * c.image_size, 0);
    for (const Mask& m : r.labels.masks) {
      if (!m.seeded) {
        CHECK(m.peak > cfg.eps1);
        CHECK(static_cast<double>(m.size()) > cfg.resolved_eps2(c));
        CHECK(m.birth < cfg.evolve_iters);
      }
      for (auto p : m.pixels) CHECK(owner[p]++ == 0);
    }
    const SynthesisResult again = synthesize(trained_tiny(), cfg);
    CHECK(std::ranges::equal(r.image.data(), again.image.data()));
  }
}
