#include "dfq/tensor.hpp"

#include <cmath>
#include <sstream>

#include "dfq/error.hpp"

namespace dfq {

namespace {
thread_local Tape* g_current_tape = nullptr;
thread_local bool g_grad_enabled = true;
thread_local std::vector<std::string> g_warnings;
}  // namespace

void warn(std::string message) { g_warnings.push_back(std::move(message)); }

std::vector<std::string> take_warnings() {
  std::vector<std::string> out;
  out.swap(g_warnings);
  return out;
}

std::size_t warning_count() { return g_warnings.size(); }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (!std::isfinite(fill)) throw NumericError("tensor fill value is not finite");
  node_->data.assign(numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("tensor constructed with non-finite value");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

const Shape& Tensor::shape() const {
  if (!node_) throw InvalidArgument("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw InvalidArgument("use of undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw InvalidArgument("use of undefined tensor");
  return node_->data;
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at(row, col) requires a rank-2 tensor");
  return node_->data[row * node_->shape[1] + col];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " +
                                    to_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool on) {
  if (!node_) throw InvalidArgument("use of undefined tensor");
  node_->requires_grad = on;
}
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw InvalidArgument("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::clone() const {
  auto n = std::make_shared<detail::Node>(*node_);
  return Tensor(std::move(n));
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() : previous_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw InvalidArgument("backward called twice on the same tape");
  if (loss.size() != 1) throw ShapeError("backward requires a scalar loss, got " +
                                         to_string(loss.shape()));
  consumed_ = true;
  if (!loss.requires_grad()) return;
  auto g = accumulate_grad(loss.node());
  g[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- op plumbing ----------------------------------------------------------

Tensor make_output(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                   const char* op) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape* tape = g_current_tape;
  if (g_grad_enabled && tape && !tape->consumed()) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  return Tensor(std::move(node));
}

void record_backward(Tape::BackwardFn fn) {
  if (!g_current_tape) throw InternalError("record_backward without an active tape");
  g_current_tape->record(std::move(fn));
}

std::span<double> accumulate_grad(const std::shared_ptr<detail::Node>& node) {
  if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
  return node->grad;
}

}  // namespace dfq
