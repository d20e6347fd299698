#include "dfq/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dfq/error.hpp"
#include "dfq/optim.hpp"

namespace dfq {

TrainResult train(const SegModel& model, const Dataset& data, const TrainOptions& options) {
  if (data.empty()) throw InvalidArgument("train: dataset is empty");
  if (options.epochs < 0) throw InvalidArgument("train: epochs must be non-negative");
  if (options.batch_size == 0) throw InvalidArgument("train: batch_size must be positive");

  TrainResult result{model.clone(), {}};
  if (options.epochs == 0) return result;

  SegModel& m = result.model;
  m.set_trainable(true);
  std::vector<Tensor> params;
  for (Tensor* t : m.parameters()) params.push_back(*t);
  Adam adam(params);

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches = (data.size() + options.batch_size - 1) / options.batch_size;
  const long total_steps = static_cast<long>(batches) * options.epochs;

  long step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * options.batch_size;
      const std::size_t end = std::min(data.size(), begin + options.batch_size);
      double batch_loss = 0.0;
      try {
        Tape tape;
        Tensor loss;
        for (std::size_t i = begin; i < end; ++i) {
          const Sample& s = data[order[i]];
          Tensor ce = cross_entropy(forward(m, s.image).logits, s.labels);
          loss = loss.defined() ? add(loss, ce) : ce;
        }
        loss = scale(loss, 1.0 / static_cast<double>(end - begin));
        batch_loss = loss.item();
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("train: diverged at step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(batch_loss))
        throw NumericError("train: non-finite loss at step " + std::to_string(step));
      adam.step(cosine_lr(step, total_steps, options.lr, options.lr * 0.05));
      epoch_sum += batch_loss * static_cast<double>(end - begin);
      ++step;
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(data.size()));
  }
  m.set_trainable(false);
  return result;
}

}  // namespace dfq
