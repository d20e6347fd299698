#pragma once

#include <vector>

#include "dfq/tensor.hpp"

namespace dfq {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment gradient descent over a fixed set of leaf tensors.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});

  // Applies one update with the given learning rate; parameters without a
  // gradient are left untouched. Gradients are cleared afterwards.
  void step(double lr);
  long steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions opt_;
  long t_ = 0;
};

// Cosine decay from lr_max at iteration 0 to lr_min at iteration total-1.
double cosine_lr(long iter, long total, double lr_max, double lr_min);

}  // namespace dfq
