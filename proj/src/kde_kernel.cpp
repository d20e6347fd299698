#include "kde_kernel.hpp"

#include <cmath>

namespace dfq::detail {

__attribute__((target_clones("avx2", "default")))
double kernel_row(double xi, const double* xs, std::size_t n, double inv2h2, double* e, double* s) {
  double sum = 0.0;
#pragma omp simd reduction(+ : sum)
  for (std::size_t j = 0; j < n; ++j) {
    const double d = xi - xs[j];
    const double v = std::exp(-d * d * inv2h2);
    e[j] = v;
    s[j] += v;
    sum += v;
  }
  return sum;
}

__attribute__((target_clones("avx2", "default")))
double gradient_row(double xi, double wi, const double* xs, const double* w, const double* e,
                    std::size_t n, double inv_h2, double inv_h, double* grad, double* dh) {
  double gi = 0.0, bw = 0.0;
#pragma omp simd reduction(+ : gi, bw)
  for (std::size_t j = 0; j < n; ++j) {
    const double d = xi - xs[j];
    const double ew = e[j] * (wi + w[j]) * inv_h2;
    gi -= d * ew;
    grad[j] += d * ew;
    bw += ew * d * d;
  }
  *dh += bw * inv_h;
  return gi;
}

}  // namespace dfq::detail
