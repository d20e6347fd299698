#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dfq/model.hpp"
#include "dfq/tensor.hpp"

namespace dfq::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Relative discrepancy ||a - n|| / max(||a||, ||n||) between the analytic
// gradient of a scalar function and its central finite difference, taken
// over all inputs jointly.
inline double gradient_error(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                             std::vector<Tensor> inputs, double step = 1e-5) {
  for (auto& t : inputs) t.set_requires_grad(true);
  std::vector<double> analytic, numeric;
  {
    Tape tape;
    const Tensor loss = f(inputs);
    tape.backward(loss);
  }
  for (auto& t : inputs) {
    if (t.has_grad()) {
      for (double g : t.grad()) analytic.push_back(g);
    } else {
      analytic.insert(analytic.end(), t.size(), 0.0);
    }
  }
  NoGradGuard off;
  for (auto& t : inputs) {
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double keep = d[i];
      d[i] = keep + step;
      const double up = f(inputs).item();
      d[i] = keep - step;
      const double down = f(inputs).item();
      d[i] = keep;
      numeric.push_back((up - down) / (2.0 * step));
    }
  }
  std::vector<double> diff(analytic.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
  const double scale = std::max({l2(analytic), l2(numeric), 1e-300});
  return l2(diff) / scale;
}

// Reduces an op output to a scalar with fixed random weights so every output
// element contributes a distinct amount to the gradient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return reduce_sum(mul(y, random_tensor(y.shape(), rng, -1.0, 1.0)));
}

// The 16x16 configuration used for end-to-end gradient checks.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  c.channels = 1;
  return c;
}

}  // namespace dfq::test
