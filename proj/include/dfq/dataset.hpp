#pragma once

#include <cstdint>
#include <vector>

#include "dfq/model.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

struct Sample {
  Tensor image;             // [H x W x ch]
  std::vector<int> labels;  // H*W class indices, row-major
};

using Dataset = std::vector<Sample>;

// Procedural scenes: a noisy background with one to three ellipses of distinct
// foreground classes. Each class has its own intensity (or colour) band and
// size range; when classes 3 and 4 co-occur, class 3 sits in the left half and
// class 4 in the right. Scenes are resampled until the background covers
// between 30% and 95% of the image. Deterministic in (seed, config).
Dataset generate_dataset(std::uint64_t seed, std::size_t n_images, const ModelConfig& config);

// Mean intensity of a class on channel ch (the generator's palette).
double class_intensity(int cls, std::uint32_t ch, std::uint32_t channels);

}  // namespace dfq
