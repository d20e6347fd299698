#include "dfq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dfq/error.hpp"

namespace dfq {

namespace {

constexpr double kNoiseStd = 0.2;
constexpr double kMinBackground = 0.3;
constexpr double kMaxBackground = 0.95;
constexpr std::size_t kMinVisiblePixels = 12;

struct SizeRange {
  double lo, hi;  // semi-axis length as a fraction of the image side
};

SizeRange size_range(int cls) {
  switch (cls) {
    case 1: return {0.16, 0.25};
    case 2: return {0.11, 0.17};
    case 3: return {0.06, 0.11};
    case 4: return {0.06, 0.11};
    default: return {0.08, 0.14};
  }
}

struct Ellipse {
  int cls;
  double cy, cx, ry, rx, angle;
};

}  // namespace

double class_intensity(int cls, std::uint32_t ch, std::uint32_t channels) {
  static const double kGray[] = {-0.5, 1.0, 2.0, -1.6, 0.3};
  static const double kColor[][3] = {{-0.5, -0.5, -0.5}, {1.2, -0.2, -0.2}, {-0.2, 1.2, 0.0},
                                     {-0.3, -0.1, 1.4},  {1.0, 1.0, -0.6}};
  if (cls < 5) return channels == 1 ? kGray[cls] : kColor[cls][ch % 3];
  // Extra classes cycle through further bands.
  const double base = 2.6 + 0.7 * static_cast<double>(cls - 5);
  return channels == 1 ? base : base * (ch == static_cast<std::uint32_t>(cls % 3) ? 1.0 : 0.3);
}

Dataset generate_dataset(std::uint64_t seed, std::size_t n_images, const ModelConfig& config) {
  config.validate();
  if (n_images == 0) throw InvalidArgument("generate_dataset: n_images must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kNoiseStd);

  const int side = static_cast<int>(config.image_size);
  const std::size_t pixels = static_cast<std::size_t>(side) * side;
  const int fg_classes = static_cast<int>(config.num_classes) - 1;
  const double s = static_cast<double>(side);

  Dataset out;
  out.reserve(n_images);
  while (out.size() < n_images) {
    const int count = std::min(fg_classes, 1 + static_cast<int>(unit(rng) * 3.0));
    std::vector<int> classes(static_cast<std::size_t>(fg_classes));
    for (int i = 0; i < fg_classes; ++i) classes[static_cast<std::size_t>(i)] = i + 1;
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(static_cast<std::size_t>(count));
    const bool has3 = std::find(classes.begin(), classes.end(), 3) != classes.end();
    const bool has4 = std::find(classes.begin(), classes.end(), 4) != classes.end();

    std::vector<Ellipse> shapes;
    for (int cls : classes) {
      const SizeRange r = size_range(cls);
      Ellipse e{};
      e.cls = cls;
      e.ry = s * (r.lo + (r.hi - r.lo) * unit(rng));
      e.rx = s * (r.lo + (r.hi - r.lo) * unit(rng));
      const double margin = std::max(e.rx, e.ry);
      double xlo = margin, xhi = s - margin;
      if (has3 && has4 && cls == 3) xhi = std::max(xlo, s * 0.5 - margin * 0.5);
      if (has3 && has4 && cls == 4) xlo = std::min(xhi, s * 0.5 + margin * 0.5);
      e.cx = xlo + (xhi - xlo) * unit(rng);
      e.cy = margin + (s - 2.0 * margin) * unit(rng);
      e.angle = std::numbers::pi * unit(rng);
      shapes.push_back(e);
    }
    // Larger shapes first so small structures stay visible on top.
    std::stable_sort(shapes.begin(), shapes.end(), [](const Ellipse& a, const Ellipse& b) {
      return a.rx * a.ry > b.rx * b.ry;
    });

    std::vector<int> labels(pixels, 0);
    for (const auto& e : shapes) {
      const double ca = std::cos(e.angle), sa = std::sin(e.angle);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          const double dy = y + 0.5 - e.cy, dx = x + 0.5 - e.cx;
          const double u = (dx * ca + dy * sa) / e.rx;
          const double v = (-dx * sa + dy * ca) / e.ry;
          if (u * u + v * v <= 1.0) labels[static_cast<std::size_t>(y * side + x)] = e.cls;
        }
    }

    std::vector<std::size_t> hist(config.num_classes, 0);
    for (int l : labels) ++hist[static_cast<std::size_t>(l)];
    const double bg = static_cast<double>(hist[0]) / static_cast<double>(pixels);
    bool visible = true;
    for (int cls : classes) visible = visible && hist[static_cast<std::size_t>(cls)] >= kMinVisiblePixels;

    if (bg < kMinBackground || bg > kMaxBackground || !visible) continue;
    std::vector<double> img(pixels * config.channels);
    for (std::size_t i = 0; i < pixels; ++i)
      for (std::uint32_t ch = 0; ch < config.channels; ++ch)
        img[i * config.channels + ch] =
            class_intensity(labels[i], ch, config.channels) + noise(rng);
    out.push_back(Sample{Tensor(Shape{config.image_size, config.image_size, config.channels},
                                std::move(img)),
                         std::move(labels)});
  }
  return out;
}

}  // namespace dfq
