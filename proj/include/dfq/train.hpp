#pragma once

#include <cstdint>
#include <vector>

#include "dfq/dataset.hpp"
#include "dfq/model.hpp"

namespace dfq {

struct TrainOptions {
  int epochs = 12;
  double lr = 3e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 42;  // minibatch shuffling
};

struct TrainResult {
  SegModel model;
  std::vector<double> epoch_loss;  // mean per-pixel cross entropy per epoch
};

// Minimizes per-pixel cross entropy with Adam (cosine-decayed rate). Works on
// a private copy; the input model is not modified. Throws NumericError naming
// the step index when the loss stops being finite.
TrainResult train(const SegModel& model, const Dataset& data, const TrainOptions& options);

}  // namespace dfq
