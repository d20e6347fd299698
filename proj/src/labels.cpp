#include <algorithm>
#include <random>

#include "dfq/error.hpp"
#include "dfq/synth.hpp"

namespace dfq {

std::size_t PseudoLabelSet::labeled_pixels() const {
  std::size_t n = 0;
  for (const auto& m : masks) n += m.size();
  return n;
}

std::vector<int> PseudoLabelSet::label_map() const {
  std::vector<int> out(height * width, 0);
  for (const auto& m : masks)
    for (auto p : m.pixels) out[p] = m.category;
  return out;
}

namespace {

// 4-connected components of the pixels flagged in `member`, each returned in
// ascending pixel order. Components are discovered in scan order.
std::vector<std::vector<std::uint32_t>> components(const std::vector<std::uint8_t>& member,
                                                   std::size_t h, std::size_t w) {
  std::vector<std::vector<std::uint32_t>> out;
  std::vector<std::uint8_t> seen(member.size(), 0);
  std::vector<std::uint32_t> stack;
  for (std::size_t start = 0; start < member.size(); ++start) {
    if (!member[start] || seen[start]) continue;
    std::vector<std::uint32_t> comp;
    stack.assign(1, static_cast<std::uint32_t>(start));
    seen[start] = 1;
    while (!stack.empty()) {
      const std::uint32_t p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (member[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(static_cast<std::uint32_t>(q));
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
    std::sort(comp.begin(), comp.end());
    out.push_back(std::move(comp));
  }
  return out;
}

void refresh_stats(Mask& m) {
  m.peak = 0.0;
  double sum = 0.0;
  for (double s : m.scores) {
    m.peak = std::max(m.peak, s);
    sum += s;
  }
  m.mean_score = m.scores.empty() ? 0.0 : sum / static_cast<double>(m.scores.size());
}

}  // namespace

std::vector<Mask> extract_candidate_masks(const Tensor& scores) {
  if (scores.rank() != 3) throw ShapeError("extract_candidate_masks: expected [H x W x C] scores");
  const std::size_t h = scores.dim(0), w = scores.dim(1), c = scores.dim(2);
  const auto s = scores.data();
  const std::vector<int> arg = predict_labels(scores);
  std::vector<Mask> out;
  std::vector<std::uint8_t> member(h * w);
  for (std::size_t cls = 1; cls < c; ++cls) {
    bool any = false;
    for (std::size_t i = 0; i < h * w; ++i) {
      member[i] = arg[i] == static_cast<int>(cls);
      any = any || member[i];
    }
    if (!any) continue;
    for (auto& comp : components(member, h, w)) {
      Mask m;
      m.category = static_cast<int>(cls);
      m.scores.reserve(comp.size());
      for (auto p : comp) m.scores.push_back(s[p * c + cls]);
      m.pixels = std::move(comp);
      refresh_stats(m);
      out.push_back(std::move(m));
    }
  }
  return out;
}

std::optional<Mask> select_pseudo_positive(const std::vector<Mask>& candidates) {
  if (candidates.empty()) return std::nullopt;
  const Mask* best = &candidates.front();
  for (const auto& m : candidates) {
    if (m.mean_score > best->mean_score ||
        (m.mean_score == best->mean_score &&
         (m.size() > best->size() || (m.size() == best->size() && m.category < best->category))))
      best = &m;
  }
  return *best;
}

EvolveOutcome evolve_labels(PseudoLabelSet& labels, Mask m, double eps1, double eps2, long iteration) {
  const std::size_t h = labels.height, w = labels.width;
  std::vector<std::uint8_t> member(h * w, 0);
  for (auto p : m.pixels) {
    if (p >= member.size()) throw InvalidArgument("evolve_labels: mask pixel outside label grid");
    if (!labels.occupied[p]) member[p] = 1;
  }
  auto pieces = components(member, h, w);
  if (pieces.empty()) return EvolveOutcome::kTooSmall;
  const auto largest = std::max_element(pieces.begin(), pieces.end(),
                                        [](const auto& a, const auto& b) { return a.size() < b.size(); });

  Mask kept;
  kept.category = m.category;
  kept.birth = iteration;
  kept.pixels = *largest;
  kept.scores.reserve(kept.pixels.size());
  std::size_t k = 0;
  for (auto p : kept.pixels) {
    while (m.pixels[k] != p) ++k;
    kept.scores.push_back(m.scores[k]);
  }
  refresh_stats(kept);

  if (!(kept.peak > eps1)) return EvolveOutcome::kLowConfidence;
  if (!(static_cast<double>(kept.size()) > eps2)) return EvolveOutcome::kTooSmall;
  for (auto p : kept.pixels) labels.occupied[p] = 1;
  labels.masks.push_back(std::move(kept));
  return EvolveOutcome::kAccepted;
}

PseudoLabelSet init_labels(std::uint64_t seed, const ModelConfig& config, double eps2) {
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  const std::size_t side = config.image_size;
  PseudoLabelSet labels(side, side);
  const std::size_t lo = std::max<std::size_t>(2, side / 8), hi = std::max(lo, side / 4);
  std::uniform_int_distribution<std::size_t> extent(lo, hi);
  std::uniform_int_distribution<int> category(1, static_cast<int>(config.num_classes) - 1);
  std::size_t rh, rw;
  do {
    rh = extent(rng);
    rw = extent(rng);
  } while (!(static_cast<double>(rh * rw) > eps2) && rh * rw < side * side);
  std::uniform_int_distribution<std::size_t> top(0, side - rh), left(0, side - rw);
  const std::size_t y0 = top(rng), x0 = left(rng);

  Mask m;
  m.category = category(rng);
  m.seeded = true;
  m.birth = 0;
  for (std::size_t y = y0; y < y0 + rh; ++y)
    for (std::size_t x = x0; x < x0 + rw; ++x) {
      m.pixels.push_back(static_cast<std::uint32_t>(y * side + x));
      m.scores.push_back(1.0);
    }
  refresh_stats(m);
  for (auto p : m.pixels) labels.occupied[p] = 1;
  labels.masks.push_back(std::move(m));
  return labels;
}

}  // namespace dfq
