#pragma once

#include <cstddef>

namespace dfq::detail {

// Row i of the upper-triangular Gaussian kernel matrix against the n points
// xs. Writes e[j] = exp(-(xi - xs[j])^2 * inv2h2), adds e[j] into s[j] and
// returns the row sum.
double kernel_row(double xi, const double* xs, std::size_t n, double inv2h2, double* e, double* s);

// Gradient contribution of the same row. w holds the per-point weights of
// the points xs (wi is the weight of xi). Adds into grad[j], returns the
// contribution to the gradient of xi and adds the bandwidth term into *dh.
double gradient_row(double xi, double wi, const double* xs, const double* w, const double* e,
                    std::size_t n, double inv_h2, double inv_h, double* grad, double* dh);

}  // namespace dfq::detail
