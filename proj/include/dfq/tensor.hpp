#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dfq {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float64 tensor. A Tensor is a reference-counted handle:
// copies alias the same storage (the autodiff graph depends on node identity).
// Use clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Mutable view for leaf tensors (initialization, optimizer steps).
  std::span<double> mutable_data();
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  Tensor clone() const;
  // Same values, fresh node without gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_output(Shape, std::vector<double>, std::span<const Tensor>, const char*);

  std::shared_ptr<detail::Node> node_;
};

// Records executed operations of one forward pass. The innermost live Tape on
// the current thread receives every op whose inputs require gradients; with no
// live Tape ops run untracked. Backward replays the records in reverse and may
// run once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* current();

  using BackwardFn = std::function<void()>;
  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }

 private:
  std::vector<BackwardFn> entries_;
  bool consumed_ = false;
  Tape* previous_ = nullptr;
};

// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Building blocks for custom differentiable ops.
//
// make_output allocates the result node, validates finiteness and decides
// whether it participates in the graph. When it does, the caller registers a
// backward closure with record_backward; the closure reads the output node's
// grad (empty when no gradient reached it) and accumulates into inputs via
// accumulate_grad.
Tensor make_output(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                   const char* op);
inline Tensor make_output(Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs, const char* op) {
  return make_output(std::move(shape), std::move(data),
                     std::span<const Tensor>(inputs.begin(), inputs.size()), op);
}
void record_backward(Tape::BackwardFn fn);
std::span<double> accumulate_grad(const std::shared_ptr<detail::Node>& node);

// ---- elementwise / structural -------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
// x: [..., D], bias: [D]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor clip(const Tensor& x, double lo, double hi);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // rank-2 only
// out[i] = x[indices[i]]; backward scatter-adds.
Tensor gather(const Tensor& x, std::vector<std::size_t> indices, Shape shape);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);

// ---- linear algebra / normalization -------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

constexpr double kLayerNormEps = 1e-8;
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kLayerNormEps);
Tensor softmax(const Tensor& x, std::size_t axis);

constexpr double kCosineNormFloor = 1e-12;
// Gram matrix of row-normalized u. Exactly symmetric with unit diagonal;
// zero-norm rows are normalized by kCosineNormFloor and raise a warning.
Tensor cosine_similarity_matrix(const Tensor& u);

// Mean per-row cross entropy of logits [M x C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace dfq
