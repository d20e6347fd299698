#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "dfq/dataset.hpp"
#include "dfq/error.hpp"
#include "dfq/eval.hpp"
#include "dfq/model.hpp"
#include "dfq/model_io.hpp"
#include "dfq/train.hpp"
#include "support.hpp"

using namespace dfq;

namespace {

std::vector<double> flat_parameters(const SegModel& m) {
  std::vector<double> out;
  for (const Tensor* t : m.parameters()) out.insert(out.end(), t->data().begin(), t->data().end());
  return out;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("dfq_test_" + name)).string();
}

}  // namespace

TEST_CASE("config validation names the broken constraint") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.image_size = 60;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("patch_size"), InvalidArgument);
  c = ModelConfig{};
  c.num_heads = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("num_heads"), InvalidArgument);
  c = ModelConfig{};
  c.num_classes = 1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("forward on a zero image gives normalized scores and one output per layer") {
  const ModelConfig c;
  const SegModel m = init_model(c, 1);
  const ForwardResult r = forward(m, Tensor(Shape{c.image_size, c.image_size, c.channels}));
  CHECK(r.scores.shape() == Shape{c.image_size, c.image_size, c.num_classes});
  CHECK(r.attn_outputs.size() == c.num_layers);
  for (const auto& o : r.attn_outputs) CHECK(o.shape() == Shape{c.num_patches(), c.embed_dim});
  const auto s = r.scores.data();
  for (std::size_t p = 0; p < std::size_t{c.image_size} * c.image_size; ++p) {
    double sum = 0.0;
    for (std::size_t k = 0; k < c.num_classes; ++k) {
      CHECK(std::isfinite(s[p * c.num_classes + k]));
      sum += s[p * c.num_classes + k];
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("forward rejects images of the wrong shape") {
  const ModelConfig c;
  const SegModel m = init_model(c, 1);
  CHECK_THROWS_AS(forward(m, Tensor(Shape{32, 32, 1})), ShapeError);
  CHECK_THROWS_AS(forward(m, Tensor(Shape{64, 64, 3})), ShapeError);
}

TEST_CASE("class scores are differentiable in the image") {
  // The plain sum of S is identically H*W, so a randomly weighted sum is used.
  const ModelConfig c = test::tiny_config();
  const SegModel m = init_model(c, 3);
  std::mt19937_64 rng(11);
  const double err = test::gradient_error(
      [&](const std::vector<Tensor>& in) { return test::weighted_sum(forward(m, in[0]).scores); },
      {test::random_tensor({c.image_size, c.image_size, c.channels}, rng, -1.0, 1.0)});
  CHECK(err < 1e-3);
}

TEST_CASE("initialization is deterministic in the seed") {
  const ModelConfig c;
  CHECK(flat_parameters(init_model(c, 5)) == flat_parameters(init_model(c, 5)));
  CHECK(flat_parameters(init_model(c, 5)) != flat_parameters(init_model(c, 6)));
}

TEST_CASE("dataset generator is deterministic and respects its priors") {
  const ModelConfig c;
  const Dataset a = generate_dataset(3, 100, c), b = generate_dataset(3, 100, c);
  REQUIRE(a.size() == 100);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::equal(a[i].image.data().begin(), a[i].image.data().end(), b[i].image.data().begin()));
    CHECK(a[i].labels == b[i].labels);
    std::size_t background = 0;
    for (int l : a[i].labels) {
      CHECK(l >= 0);
      CHECK(l < static_cast<int>(c.num_classes));
      background += l == 0;
    }
    const double frac = static_cast<double>(background) / static_cast<double>(a[i].labels.size());
    CHECK(frac >= 0.3);
    CHECK(frac <= 0.95);
  }
}

TEST_CASE("class 3 sits left of class 4 when both appear") {
  const ModelConfig c;
  int both = 0;
  for (const Sample& s : generate_dataset(21, 300, c)) {
    double x3 = 0, x4 = 0, n3 = 0, n4 = 0;
    for (std::size_t p = 0; p < s.labels.size(); ++p) {
      const double x = static_cast<double>(p % c.image_size);
      if (s.labels[p] == 3) x3 += x, ++n3;
      if (s.labels[p] == 4) x4 += x, ++n4;
    }
    if (n3 > 0 && n4 > 0) {
      ++both;
      CHECK(x3 / n3 < x4 / n4);
    }
  }
  CHECK(both > 0);
}

TEST_CASE("zero epochs leave the parameters unchanged") {
  const ModelConfig c = test::tiny_config();
  const SegModel m = init_model(c, 2);
  TrainOptions o;
  o.epochs = 0;
  const TrainResult r = train(m, generate_dataset(1, 4, c), o);
  CHECK(flat_parameters(r.model) == flat_parameters(m));
  CHECK(r.epoch_loss.empty());
}

TEST_CASE("training lowers the loss and does not touch its input") {
  const ModelConfig c = test::tiny_config();
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const SegModel m = init_model(c, seed);
    const auto before = flat_parameters(m);
    TrainOptions o;
    o.epochs = 4;
    o.seed = seed;
    const TrainResult r = train(m, generate_dataset(seed, 32, c), o);
    REQUIRE(r.epoch_loss.size() == 4);
    CHECK(r.epoch_loss.back() <= r.epoch_loss.front());
    CHECK(flat_parameters(m) == before);
  }
}

TEST_CASE("default training reaches 0.6 held-out mean IoU") {
  const ModelConfig c;
  const TrainResult r = train(init_model(c, 42), generate_dataset(42, 200, c), TrainOptions{});
  const double miou = evaluate(r.model, generate_dataset(1000, 100, c)).mean_iou;
  MESSAGE("held-out mean IoU " << miou);
  CHECK(miou >= 0.6);
}

TEST_CASE("model files round-trip exactly") {
  const ModelConfig c = test::tiny_config();
  const SegModel m = init_model(c, 9);
  const auto bytes = encode_model(m);
  CHECK(bytes.size() == kModelHeaderBytes + 8 * m.parameter_count());
  CHECK(bytes.size() == model_file_bytes(c));
  const SegModel back = decode_model(bytes);
  CHECK(back.config == c);
  CHECK(flat_parameters(back) == flat_parameters(m));

  const std::string path = temp_path("roundtrip.dfqm");
  save_model(m, path);
  CHECK(std::filesystem::file_size(path) == bytes.size());
  CHECK(flat_parameters(load_model(path)) == flat_parameters(m));
  std::filesystem::remove(path);
}

TEST_CASE("damaged model files are format errors that name the offset") {
  const SegModel m = init_model(test::tiny_config(), 9);
  auto bytes = encode_model(m);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_model(bad), doctest::Contains("offset 0"), FormatError);
  bad = bytes;
  bad[4] = 99;
  CHECK_THROWS_WITH_AS(decode_model(bad), doctest::Contains("version"), FormatError);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  CHECK_THROWS_WITH_AS(decode_model(bad), doctest::Contains("truncated at offset"), FormatError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_WITH_AS(decode_model(bad), doctest::Contains("trailing"), FormatError);
  CHECK_THROWS_AS(load_model(temp_path("does_not_exist.dfqm")), IoError);
}

TEST_CASE("argmax ties resolve to the lowest class") {
  const Tensor s(Shape{1, 2, 3}, std::vector<double>{0.4, 0.4, 0.2, 0.1, 0.45, 0.45});
  CHECK(predict_labels(s) == std::vector<int>{0, 1});
}
