#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfq/error.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + to_string(t.shape()));
  }
}

// Elementwise binary op with per-element partials da = fa(x, y), db = fb(x, y).
template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da da, Db db) {
  require_same_shape(a, b, op);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  Tensor r = make_output(a.shape(), std::move(out), {a, b}, op);
  if (r.requires_grad()) {
    record_backward([an = a.node(), bn = b.node(), rn = r.node(), da, db] {
      if (rn->grad.empty()) return;
      const auto& g = rn->grad;
      if (an->requires_grad) {
        auto ga = accumulate_grad(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(an->data[i], bn->data[i]);
      }
      if (bn->requires_grad) {
        auto gb = accumulate_grad(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(an->data[i], bn->data[i]);
      }
    });
  }
  return r;
}

// Elementwise unary op; dfdx receives (input, output).
template <typename Fwd, typename Dfdx>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Dfdx dfdx) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tensor r = make_output(a.shape(), std::move(out), {a}, op);
  if (r.requires_grad()) {
    record_backward([an = a.node(), rn = r.node(), dfdx] {
      if (rn->grad.empty() || !an->requires_grad) return;
      auto ga = accumulate_grad(an);
      const auto& g = rn->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(an->data[i], rn->data[i]);
    });
  }
  return r;
}

// C[MxN] (+)= A[MxK] * B[KxN]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[MxK] += A[MxN] * B[KxN]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[KxN] += A[MxK]^T * B[MxN]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return std::max(x, y); },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      a, "add_scalar", [offset](double x) { return x + offset; },
      [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor clip(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw InvalidArgument("clip: lo > hi");
  return unary(
      x, "clip", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: " + to_string(x.shape()) + " + " + to_string(bias.shape()));
  }
  const std::size_t d = bias.dim(0);
  const auto xv = x.data();
  const auto bv = bias.data();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % d];
  Tensor r = make_output(x.shape(), std::move(out), {x, bias}, "add_bias");
  if (r.requires_grad()) {
    record_backward([xn = x.node(), bn = bias.node(), rn = r.node(), d] {
      if (rn->grad.empty()) return;
      const auto& g = rn->grad;
      if (xn->requires_grad) {
        auto gx = accumulate_grad(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bn->requires_grad) {
        auto gb = accumulate_grad(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      }
    });
  }
  return r;
}

// ---- structural -----------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  const auto xv = x.data();
  Tensor r = make_output(std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                         "reshape");
  if (r.requires_grad()) {
    record_backward([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      auto gx = accumulate_grad(xn);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += rn->grad[i];
    });
  }
  return r;
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto xv = x.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  Tensor r = make_output(Shape{n, m}, std::move(out), {x}, "transpose");
  if (r.requires_grad()) {
    record_backward([xn = x.node(), rn = r.node(), m, n] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      auto gx = accumulate_grad(xn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += rn->grad[j * m + i];
    });
  }
  return r;
}

Tensor gather(const Tensor& x, std::vector<std::size_t> indices, Shape shape) {
  if (numel(shape) != indices.size()) throw ShapeError("gather: index count does not match shape");
  const auto xv = x.data();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.size()) throw ShapeError("gather: index out of range");
    out[i] = xv[indices[i]];
  }
  Tensor r = make_output(std::move(shape), std::move(out), {x}, "gather");
  if (r.requires_grad()) {
    record_backward([xn = x.node(), rn = r.node(), idx = std::move(indices)] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      auto gx = accumulate_grad(xn);
      for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += rn->grad[i];
    });
  }
  return r;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin + count > n) throw ShapeError("slice_cols: range exceeds " + to_string(x.shape()));
  const auto xv = x.data();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * n + begin), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  Tensor r = make_output(Shape{m, count}, std::move(out), {x}, "slice_cols");
  if (r.requires_grad()) {
    record_backward([xn = x.node(), rn = r.node(), m, n, begin, count] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      auto gx = accumulate_grad(xn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += rn->grad[i * count + j];
    });
  }
  return r;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  for (const auto& p : parts) require_rank2(p, "concat_cols");
  const std::size_t m = parts[0].dim(0);
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != m) throw ShapeError("concat_cols: row count mismatch");
    n += p.dim(1);
  }
  std::vector<double> out(m * n);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    const auto pv = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(i * n + offset));
    offset += w;
  }
  Tensor r = make_output(Shape{m, n}, std::move(out), parts, "concat_cols");
  if (r.requires_grad()) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    record_backward([nodes = std::move(nodes), rn = r.node(), m, n] {
      if (rn->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        const std::size_t w = pn->shape[1];
        if (pn->requires_grad) {
          auto gp = accumulate_grad(pn);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += rn->grad[i * n + off + j];
        }
        off += w;
      }
    });
  }
  return r;
}

Tensor reduce_sum(const Tensor& x) {
  const auto xv = x.data();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  Tensor r = make_output(Shape{1}, {s}, {x}, "reduce_sum");
  if (r.requires_grad()) {
    record_backward([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      auto gx = accumulate_grad(xn);
      for (auto& g : gx) g += rn->grad[0];
    });
  }
  return r;
}

Tensor reduce_mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("reduce_mean of an empty tensor");
  return scale(reduce_sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " * " +
                     to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor r = make_output(Shape{m, n}, std::move(out), {a, b}, "matmul");
  if (r.requires_grad()) {
    record_backward([an = a.node(), bn = b.node(), rn = r.node(), m, k, n] {
      if (rn->grad.empty()) return;
      if (an->requires_grad)
        gemm_nt(rn->grad.data(), bn->data.data(), accumulate_grad(an).data(), m, n, k);
      if (bn->requires_grad)
        gemm_tn(an->data.data(), rn->grad.data(), accumulate_grad(bn).data(), m, k, n);
    });
  }
  return r;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank2(x, "linear");
  require_rank2(weight, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (weight.dim(0) != k || bias.rank() != 1 || bias.dim(0) != n) {
    throw ShapeError("linear: " + to_string(x.shape()) + " * " + to_string(weight.shape()) +
                     " + " + to_string(bias.shape()));
  }
  std::vector<double> out(m * n);
  const auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * n);
  gemm_nn(x.data().data(), weight.data().data(), out.data(), m, k, n);
  Tensor r = make_output(Shape{m, n}, std::move(out), {x, weight, bias}, "linear");
  if (r.requires_grad()) {
    record_backward([xn = x.node(), wn = weight.node(), bn = bias.node(), rn = r.node(), m, k, n] {
      if (rn->grad.empty()) return;
      const auto& g = rn->grad;
      if (xn->requires_grad) gemm_nt(g.data(), wn->data.data(), accumulate_grad(xn).data(), m, n, k);
      if (wn->requires_grad) gemm_tn(xn->data.data(), g.data(), accumulate_grad(wn).data(), m, k, n);
      if (bn->requires_grad) {
        auto gb = accumulate_grad(bn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return r;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != x.shape().back() || beta.dim(0) != x.shape().back()) {
    throw ShapeError("layer_norm: " + to_string(x.shape()) + " with affine " +
                     to_string(gamma.shape()) + "/" + to_string(beta.shape()));
  }
  if (!(eps > 0.0)) throw InvalidArgument("layer_norm: eps must be positive");
  const std::size_t d = gamma.dim(0);
  const std::size_t rows = x.size() / d;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  Tensor y = make_output(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm");
  if (y.requires_grad()) {
    record_backward([xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node(),
                     xhat = std::move(xhat), rstd = std::move(rstd), d, rows] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (gn->requires_grad || bn->requires_grad) {
        auto gg = gn->requires_grad ? accumulate_grad(gn) : std::span<double>{};
        auto gb = bn->requires_grad ? accumulate_grad(bn) : std::span<double>{};
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) {
            if (!gg.empty()) gg[j] += g[r * d + j] * xhat[r * d + j];
            if (!gb.empty()) gb[j] += g[r * d + j];
          }
      }
      if (xn->requires_grad) {
        auto gx = accumulate_grad(xn);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gn->data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gn->data[j];
            gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return y;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto xv = x.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double sum = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= sum;
    }
  }
  Tensor y = make_output(s, std::move(out), {x}, "softmax");
  if (y.requires_grad()) {
    record_backward([xn = x.node(), yn = y.node(), outer, inner, len] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      auto gx = accumulate_grad(xn);
      const auto& g = yn->grad;
      const auto& yv = yn->data;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * yv[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += yv[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor cosine_similarity_matrix(const Tensor& u) {
  require_rank2(u, "cosine_similarity_matrix");
  const std::size_t n = u.dim(0), d = u.dim(1);
  const auto uv = u.data();
  std::vector<double> norms(n);
  std::vector<double> unit(n * d);
  std::vector<bool> clamped(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += uv[i * d + j] * uv[i * d + j];
    double nrm = std::sqrt(ss);
    if (nrm < kCosineNormFloor) {
      warn("cosine_similarity_matrix: row " + std::to_string(i) +
           " has zero norm; normalizing by 1e-12");
      nrm = kCosineNormFloor;
      clamped[i] = true;
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = uv[i * d + j] / nrm;
  }
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += unit[i * d + k] * unit[j * d + k];
      out[i * n + j] = dot;
      out[j * n + i] = dot;
    }
  }
  Tensor r = make_output(Shape{n, n}, std::move(out), {u}, "cosine_similarity_matrix");
  if (r.requires_grad()) {
    record_backward([un = u.node(), rn = r.node(), unit = std::move(unit),
                     norms = std::move(norms), clamped = std::move(clamped), n, d] {
      if (rn->grad.empty() || !un->requires_grad) return;
      const auto& g = rn->grad;
      // dL/dunit_i = sum_{j != i} (G_ij + G_ji) unit_j; the diagonal is constant.
      std::vector<double> dunit(n * d, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
          const double w = g[i * n + j] + g[j * n + i];
          if (w == 0.0) continue;
          for (std::size_t k = 0; k < d; ++k) {
            dunit[i * d + k] += w * unit[j * d + k];
            dunit[j * d + k] += w * unit[i * d + k];
          }
        }
      }
      auto gu = accumulate_grad(un);
      for (std::size_t i = 0; i < n; ++i) {
        const double inv = 1.0 / norms[i];
        if (clamped[i]) {
          for (std::size_t k = 0; k < d; ++k) gu[i * d + k] += dunit[i * d + k] * inv;
          continue;
        }
        double proj = 0.0;
        for (std::size_t k = 0; k < d; ++k) proj += dunit[i * d + k] * unit[i * d + k];
        for (std::size_t k = 0; k < d; ++k)
          gu[i * d + k] += (dunit[i * d + k] - proj * unit[i * d + k]) * inv;
      }
    });
  }
  return r;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.dim(0), c = logits.dim(1);
  if (labels.size() != m) throw ShapeError("cross_entropy: label count does not match rows");
  const auto z = logits.data();
  std::vector<double> prob(m * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw InvalidArgument("cross_entropy: label out of range");
    const double* row = z.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      prob[i * c + j] = std::exp(row[j] - mx);
      sum += prob[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= sum;
    loss += (std::log(sum) + mx) - row[y];
  }
  loss /= static_cast<double>(m);
  Tensor r = make_output(Shape{1}, {loss}, {logits}, "cross_entropy");
  if (r.requires_grad()) {
    std::vector<int> lab(labels.begin(), labels.end());
    record_backward([zn = logits.node(), rn = r.node(), prob = std::move(prob),
                     lab = std::move(lab), m, c] {
      if (rn->grad.empty() || !zn->requires_grad) return;
      auto gz = accumulate_grad(zn);
      const double s = rn->grad[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += s * prob[i * c + j];
        gz[i * c + static_cast<std::size_t>(lab[i])] -= s;
      }
    });
  }
  return r;
}

}  // namespace dfq
