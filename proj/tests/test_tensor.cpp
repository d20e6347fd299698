#include <cmath>
#include <numbers>

#include "doctest.h"
#include "dfq/error.hpp"
#include "dfq/tensor.hpp"
#include "op_catalog.hpp"
#include "support.hpp"

using namespace dfq;
using dfq::test::gradient_error;
using dfq::test::random_tensor;
using dfq::test::weighted_sum;
using dfq::test::Fn;
using dfq::test::one;
using dfq::test::two;
using dfq::test::worst_error;

namespace {

void expect_close(const Tensor& t, std::initializer_list<double> want, double tol = 1e-12) {
  REQUIRE(t.size() == want.size());
  std::size_t i = 0;
  for (double w : want) CHECK(t[i++] == doctest::Approx(w).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul hand cases") {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor p = matmul(eye, eye);
  expect_close(p, {1, 0, 0, 1});
  const Tensor r = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1}, {1}}));
  CHECK(r.shape() == Shape{2, 1});
  expect_close(r, {3, 7});
  CHECK_THROWS_AS(matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), ShapeError);
}

TEST_CASE("matmul gradient on 4x3 times 3x5") {
  const double err = worst_error([](const auto& in) { return weighted_sum(matmul(in[0], in[1])); },
                                 two({4, 3}, {3, 5}));
  CHECK(err < 1e-4);
}

TEST_CASE("layer_norm hand cases and statistics") {
  const Tensor ones = Tensor::vector({1, 1, 1, 1});
  const Tensor zeros = Tensor::vector({0, 0, 0, 0});
  const Tensor constant = Tensor::matrix({{3, 3, 3, 3}, {-1, -1, -1, -1}});
  const Tensor y = layer_norm(constant, ones, zeros);
  for (double v : y.data()) CHECK(v == 0.0);

  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({2, 4}, rng);
  const Tensor c = layer_norm(x, zeros, Tensor::vector({0.5, 0.5, 0.5, 0.5}));
  for (double v : c.data()) CHECK(v == 0.5);

  const Tensor g8 = Tensor(Shape{8}, 1.0), b8 = Tensor(Shape{8}, 0.0);
  const Tensor r = layer_norm(random_tensor({3, 8}, rng), g8, b8);
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += r.at(i, j) / 8.0;
    for (std::size_t j = 0; j < 8; ++j) var += (r.at(i, j) - mean) * (r.at(i, j) - mean) / 8.0;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax hand cases and normalization") {
  expect_close(softmax(Tensor::vector({0, 0}), 0), {0.5, 0.5});
  const Tensor big = softmax(Tensor::vector({1000, 0}), 0);
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);
  CHECK(std::isfinite(big[0]));

  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const Tensor s = softmax(random_tensor({5}, rng, -10, 10), 0);
    double sum = 0.0;
    for (double v : s.data()) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
  const Tensor m = softmax(random_tensor({3, 4}, rng), 0);
  for (std::size_t j = 0; j < 4; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) sum += m.at(i, j);
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("cosine similarity matrix special cases and invariants") {
  const Tensor same = cosine_similarity_matrix(Tensor::matrix({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}));
  for (double v : same.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));

  const Tensor basis = cosine_similarity_matrix(Tensor::matrix({{1, 0, 0}, {0, 2, 0}, {0, 0, 3}}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(basis.at(i, j) == (i == j ? 1.0 : 0.0));

  const Tensor anti = cosine_similarity_matrix(Tensor::matrix({{1, -2}, {-1, 2}}));
  CHECK(anti.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-14));

  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const Tensor g = cosine_similarity_matrix(random_tensor({6, 4}, rng));
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(std::abs(g.at(i, i) - 1.0) <= 1e-12);
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(g.at(i, j) == g.at(j, i));
        CHECK(std::abs(g.at(i, j)) <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("cosine similarity clamps zero rows with a warning") {
  take_warnings();
  const Tensor g = cosine_similarity_matrix(Tensor::matrix({{0, 0}, {1, 0}}));
  for (double v : g.data()) CHECK(std::isfinite(v));
  CHECK(g.at(0, 0) == 1.0);
  CHECK(g.at(0, 1) == 0.0);
  CHECK_FALSE(take_warnings().empty());
}

TEST_CASE("elementwise hand cases") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(reduce_sum(Tensor(Shape{2, 3}, 1.0)).item() == 6.0);
  CHECK(reduce_mean(Tensor::vector({1, 2, 3, 6})).item() == 3.0);
  expect_close(relu(Tensor::vector({-1, 0.5})), {0, 0.5});
  expect_close(clip(Tensor::vector({-3, 0.25, 9}), -1, 1), {-1, 0.25, 1});
  const Tensor t = transpose(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  CHECK(t.shape() == Shape{3, 2});
  expect_close(t, {1, 4, 2, 5, 3, 6});
  CHECK_THROWS_AS(add(Tensor(Shape{2}), Tensor(Shape{3})), ShapeError);
  CHECK_THROWS_AS(reshape(Tensor(Shape{2, 3}), {4}), ShapeError);
}

TEST_CASE("log gradient at 2 is one half") {
  Tensor x = Tensor::scalar(2.0);
  x.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(log(x));
  }
  const double fd = (std::log(2.0 + 1e-5) - std::log(2.0 - 1e-5)) / 2e-5;
  CHECK(std::abs(x.grad()[0] - 0.5) < 1e-6);
  CHECK(std::abs(x.grad()[0] - fd) < 1e-6);
}

TEST_CASE("every differentiable op matches central finite differences") {
  for (const auto& c : dfq::test::op_cases()) {
    CAPTURE(c.name);
    CHECK(dfq::test::worst_error(c.f, c.inputs) < 1e-4);
  }
}

TEST_CASE("composed two-layer graph matches finite differences") {
  const std::vector<int> labels{1, 0, 2, 1};
  const Fn f = [&](const auto& in) {
    const Tensor h = gelu(linear(in[0], in[1], in[2]));
    const Tensor normed = layer_norm(h, in[3], in[4]);
    return cross_entropy(linear(normed, in[5], in[6]), labels);
  };
  const double err = worst_error(
      f,
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({4, 3}, rng), random_tensor({3, 5}, rng),
                                   random_tensor({5}, rng),    random_tensor({5}, rng),
                                   random_tensor({5}, rng),    random_tensor({5, 3}, rng),
                                   random_tensor({3}, rng)};
      },
      20);
  CHECK(err < 1e-4);
}

TEST_CASE("tape records only inside its scope and runs once") {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  {
    NoGradGuard off;
    Tape tape;
    (void)mul(x, x);
    CHECK(tape.size() == 0);
  }
  Tape tape;
  const Tensor y = reduce_sum(mul(x, x));
  CHECK(tape.size() > 0);
  tape.backward(y);
  CHECK(tape.consumed());
  CHECK(x.grad()[1] == 4.0);
  CHECK_THROWS(tape.backward(y));
}

TEST_CASE("non-finite results are rejected") {
  CHECK_THROWS_AS(log(Tensor::vector({-1.0})), NumericError);
  CHECK_THROWS_AS(exp(Tensor::vector({1e6})), NumericError);
}
