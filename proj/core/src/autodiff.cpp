#include "hm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_set>

#include <Eigen/Core>

#include "hm/rng.hpp"

namespace hm::ad {

namespace {

using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;

thread_local bool t_grad_enabled = true;
bool g_check_finite = false;

MapM map(std::vector<Real>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MapM(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
CMapM cmap(const std::vector<Real>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return CMapM(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

/// True if `b` equals `a` or is a right-aligned suffix of it.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

std::string mismatch(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

}  // namespace

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

std::span<Real> Node::grad_span() {
  if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  return grad;
}

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void set_check_finite(bool on) { g_check_finite = on; }
bool check_finite() { return g_check_finite; }

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real v, bool requires_grad) {
  const std::size_t n = numel(shape);
  return from(std::move(shape), std::vector<Real>(n, v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  require(values.size() == numel(shape), "tensor: data length " + std::to_string(values.size()) +
                                             " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(Real v, bool requires_grad) { return from({}, {v}, requires_grad); }

Tensor Tensor::make(Shape shape, std::vector<Real> values, std::vector<Tensor> parents,
                    std::function<void(Node&)> backward, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = op;
  if (g_check_finite) {
    for (Real v : n->value) {
      if (!std::isfinite(v)) throw Error(std::string("non-finite value produced by ") + op);
    }
  }
  if (t_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.defined() && p.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node_ptr());
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

std::size_t Tensor::dim(int i) const {
  const int r = static_cast<int>(rank());
  const int k = i < 0 ? r + i : i;
  require(k >= 0 && k < r, "dim: axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(k)];
}

Real Tensor::item() const {
  require(size() == 1, "item: tensor is not a scalar " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

Tensor Tensor::clone() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  require(size() == 1, "backward: loss must be a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_span()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    for (auto& p : n->parents) {
      if (p->requires_grad) p->grad_span();
    }
    n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

namespace {

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  require(is_suffix(a.shape(), b.shape()), mismatch(name, a.shape(), b.shape()));
  const std::size_t n = a.size();
  const std::size_t inner = b.size();
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = av[i], y = bv[i % inner];
    out[i] = op == BinOp::Add ? x + y : (op == BinOp::Sub ? x - y : x * y);
  }
  return Tensor::make(a.shape(), std::move(out), {a, b}, [op, n, inner](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    for (std::size_t i = 0; i < n; ++i) {
      const Real g = o.grad[i];
      if (pa.requires_grad) pa.grad[i] += op == BinOp::Mul ? g * pb.value[i % inner] : g;
      if (pb.requires_grad) {
        const Real gb = op == BinOp::Add ? g : (op == BinOp::Sub ? -g : g * pa.value[i]);
        pb.grad[i % inner] += gb;
      }
    }
  }, name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& a, Real c) {
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return Tensor::make(a.shape(), std::move(out), {a}, [c](Node& o) {
    auto& g = o.parents[0]->grad;
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += c * o.grad[i];
  }, "scale");
}

Tensor gelu(const Tensor& x) {
  const auto& xv = x.node()->value;
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const Real v = xv[i];
    out[i] = Real(0.5) * v * (Real(1) + std::erf(v * Real(std::numbers::sqrt2 / 2)));
  }
  return Tensor::make(x.shape(), std::move(out), {x}, [](Node& o) {
    Node& p = *o.parents[0];
    const Real inv_sqrt_2pi = Real(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const Real v = p.value[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(v * Real(std::numbers::sqrt2 / 2)));
      const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * v * v);
      p.grad[i] += o.grad[i] * (cdf + v * pdf);
    }
  }, "gelu");
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 2 && b.rank() >= 2, mismatch("matmul", a.shape(), b.shape()));
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  require(b.dim(-2) == k, mismatch("matmul", a.shape(), b.shape()));
  const std::size_t n = b.dim(-1);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  if (b.rank() == 2) {
    // Shared right operand: one (rows x k) * (k x n) product.
    const std::size_t rows = a.size() / k;
    std::vector<Real> out(rows * n);
    map(out, 0, rows, n).noalias() = cmap(a.node()->value, 0, rows, k) * cmap(b.node()->value, 0, k, n);
    return Tensor::make(std::move(out_shape), std::move(out), {a, b}, [rows, k, n](Node& o) {
      Node& pa = *o.parents[0];
      Node& pb = *o.parents[1];
      const auto g = cmap(o.grad, 0, rows, n);
      if (pa.requires_grad) map(pa.grad, 0, rows, k).noalias() += g * cmap(pb.value, 0, k, n).transpose();
      if (pb.requires_grad) map(pb.grad, 0, k, n).noalias() += cmap(pa.value, 0, rows, k).transpose() * g;
    }, "matmul");
  }

  require(a.rank() == b.rank() &&
              std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
          mismatch("matmul", a.shape(), b.shape()));
  const std::size_t batch = a.size() / (m * k);
  std::vector<Real> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    map(out, i * m * n, m, n).noalias() =
        cmap(a.node()->value, i * m * k, m, k) * cmap(b.node()->value, i * k * n, k, n);
  }
  return Tensor::make(std::move(out_shape), std::move(out), {a, b}, [batch, m, k, n](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      const auto g = cmap(o.grad, i * m * n, m, n);
      if (pa.requires_grad) {
        map(pa.grad, i * m * k, m, k).noalias() += g * cmap(pb.value, i * k * n, k, n).transpose();
      }
      if (pb.requires_grad) {
        map(pb.grad, i * k * n, k, n).noalias() += cmap(pa.value, i * m * k, m, k).transpose() * g;
      }
    }
  }, "bmm");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(w.rank() == 2 && bias.rank() == 1 && bias.dim(0) == w.dim(1),
          mismatch("linear", w.shape(), bias.shape()));
  return add(matmul(x, w), bias);
}

// ---------------------------------------------------------------- layout

Tensor transpose_last2(const Tensor& x) {
  require(x.rank() >= 2, "transpose_last2: rank must be >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  require(axes.size() == r, "permute: axes do not match rank of " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    require(a < r && !seen[a], "permute: invalid axis permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[axes[i]];
  std::vector<std::size_t> out_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) out_stride[i - 1] = out_stride[i] * out_shape[i];
  // Output stride of each input axis.
  std::vector<std::size_t> stride_of_in(r);
  for (std::size_t i = 0; i < r; ++i) stride_of_in[axes[i]] = out_stride[i];

  const Shape in_shape = x.shape();
  // Walks the input in order and yields the output offset of each element.
  auto for_each = [in_shape, stride_of_in, r](auto&& fn) {
    const std::size_t n = numel(in_shape);
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      fn(i, off);
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += stride_of_in[d];
        if (idx[d] < in_shape[d]) break;
        off -= stride_of_in[d] * in_shape[d];
        idx[d] = 0;
      }
    }
  };
  const auto& xv = x.node()->value;
  std::vector<Real> out(xv.size());
  for_each([&](std::size_t i, std::size_t o) { out[o] = xv[i]; });
  return Tensor::make(std::move(out_shape), std::move(out), {x}, [for_each](Node& o) {
    auto& g = o.parents[0]->grad;
    for_each([&](std::size_t i, std::size_t off) { g[i] += o.grad[off]; });
  }, "permute");
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), mismatch("reshape", x.shape(), shape));
  return Tensor::make(std::move(shape), x.node()->value, {x}, [](Node& o) {
    auto& g = o.parents[0]->grad;
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  }, "reshape");
}

// ---------------------------------------------------------------- normalization

Tensor softmax_last(const Tensor& x) {
  require(x.rank() >= 1, "softmax_last: rank must be >= 1");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.size() / n;
  const auto& xv = x.node()->value;
  std::vector<Real> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * n;
    Real* y = out.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  return Tensor::make(x.shape(), std::move(out), {x}, [rows, n](Node& o) {
    auto& g = o.parents[0]->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = o.value.data() + r * n;
      const Real* dy = o.grad.data() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  }, "softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  const std::size_t c = x.dim(-1);
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, mismatch("layer_norm", x.shape(), gamma.shape()));
  const std::size_t rows = x.size() / c;
  const auto& xv = x.node()->value;
  const auto& gv = gamma.node()->value;
  const auto& bv = beta.node()->value;
  auto xhat = std::make_shared<std::vector<Real>>(xv.size());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  std::vector<Real> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * c;
    Real mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += in[j];
    mean /= static_cast<Real>(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<Real>(c);
    const Real rs = Real(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const Real h = (in[j] - mean) * rs;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor::make(x.shape(), std::move(out), {x, gamma, beta}, [rows, c, xhat, rstd](Node& o) {
    Node& px = *o.parents[0];
    Node& pg = *o.parents[1];
    Node& pb = *o.parents[2];
    std::vector<Real> dh(c);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* h = xhat->data() + r * c;
      const Real* dy = o.grad.data() + r * c;
      Real mean_dh = 0, mean_dh_h = 0;
      for (std::size_t j = 0; j < c; ++j) {
        if (pg.requires_grad) pg.grad[j] += dy[j] * h[j];
        if (pb.requires_grad) pb.grad[j] += dy[j];
        dh[j] = dy[j] * pg.value[j];
        mean_dh += dh[j];
        mean_dh_h += dh[j] * h[j];
      }
      if (!px.requires_grad) continue;
      mean_dh /= static_cast<Real>(c);
      mean_dh_h /= static_cast<Real>(c);
      for (std::size_t j = 0; j < c; ++j) {
        px.grad[r * c + j] += (*rstd)[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
      }
    }
  }, "layer_norm");
}

Tensor dropout(const Tensor& x, double p, std::span<const std::uint64_t> row_keys) {
  if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  require(x.rank() >= 1 && row_keys.size() == x.dim(0),
          "dropout: need one stream key per leading row, shape " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0);
  const std::size_t inner = x.size() / rows;
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<Real>>(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const CounterRng rng(row_keys[r]);
    for (std::size_t i = 0; i < inner; ++i) {
      (*mask)[r * inner + i] = rng.uniform_at(i) >= p ? keep_scale : Real(0);
    }
  }
  const auto& xv = x.node()->value;
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*mask)[i];
  return Tensor::make(x.shape(), std::move(out), {x}, [mask](Node& o) {
    auto& g = o.parents[0]->grad;
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
  }, "dropout");
}

// ---------------------------------------------------------------- convolution

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(x.rank() == 3 && w.rank() == 2 && w.dim(0) == x.dim(2) && bias.shape() == Shape{x.dim(2)},
          mismatch("depthwise_conv1d", x.shape(), w.shape()));
  const std::size_t kernel = w.dim(1);
  require(kernel % 2 == 1, "depthwise_conv1d: kernel size must be odd");
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
  const auto pad = static_cast<long>(kernel / 2);
  const auto& xv = x.node()->value;
  const auto& wv = w.node()->value;
  const auto& bv = bias.node()->value;
  std::vector<Real> out(xv.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      Real* y = out.data() + (b * T + t) * C;
      for (std::size_t c = 0; c < C; ++c) y[c] = bv[c];
      for (std::size_t k = 0; k < kernel; ++k) {
        const long s = static_cast<long>(t) + static_cast<long>(k) - pad;
        if (s < 0 || s >= static_cast<long>(T)) continue;
        const Real* in = xv.data() + (b * T + static_cast<std::size_t>(s)) * C;
        for (std::size_t c = 0; c < C; ++c) y[c] += wv[c * kernel + k] * in[c];
      }
    }
  }
  return Tensor::make(x.shape(), std::move(out), {x, w, bias}, [B, T, C, kernel, pad](Node& o) {
    Node& px = *o.parents[0];
    Node& pw = *o.parents[1];
    Node& pb = *o.parents[2];
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < T; ++t) {
        const Real* dy = o.grad.data() + (b * T + t) * C;
        if (pb.requires_grad) {
          for (std::size_t c = 0; c < C; ++c) pb.grad[c] += dy[c];
        }
        for (std::size_t k = 0; k < kernel; ++k) {
          const long s = static_cast<long>(t) + static_cast<long>(k) - pad;
          if (s < 0 || s >= static_cast<long>(T)) continue;
          const std::size_t off = (b * T + static_cast<std::size_t>(s)) * C;
          for (std::size_t c = 0; c < C; ++c) {
            if (pw.requires_grad) pw.grad[c * kernel + k] += dy[c] * px.value[off + c];
            if (px.requires_grad) px.grad[off + c] += dy[c] * pw.value[c * kernel + k];
          }
        }
      }
    }
  }, "depthwise_conv1d");
}

namespace {

struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  std::size_t col_rows() const { return cin * k * k; }
  std::size_t col_cols() const { return ho * wo; }
};

void im2col(const Real* x, const ConvGeom& g, Real* col) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        Real* row = col + ((c * g.k + ki) * g.k + kj) * g.col_cols();
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) && jj < static_cast<long>(g.w);
            row[oi * g.wo + oj] = inside ? x[(c * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)] : Real(0);
          }
        }
      }
    }
  }
}

void col2im_add(const Real* col, const ConvGeom& g, Real* dx) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const Real* row = col + ((c * g.k + ki) * g.k + kj) * g.col_cols();
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)] += row[oi * g.wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  require(x.rank() == 4 && w.rank() == 4 && w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3) &&
              bias.shape() == Shape{w.dim(0)},
          mismatch("conv2d", x.shape(), w.shape()));
  require(stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t B = x.dim(0), cout = w.dim(0);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
  require(g.h + 2 * pad >= g.k && g.w + 2 * pad >= g.k, mismatch("conv2d", x.shape(), w.shape()));
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  const std::size_t in_size = g.cin * g.h * g.w;
  const std::size_t out_size = cout * g.col_cols();

  const auto& xv = x.node()->value;
  std::vector<Real> out(B * out_size);
  std::vector<Real> col(g.col_rows() * g.col_cols());
  const auto wm = cmap(w.node()->value, 0, cout, g.col_rows());
  const auto& bv = bias.node()->value;
  for (std::size_t b = 0; b < B; ++b) {
    im2col(xv.data() + b * in_size, g, col.data());
    auto y = map(out, b * out_size, cout, g.col_cols());
    y.noalias() = wm * cmap(col, 0, g.col_rows(), g.col_cols());
    for (std::size_t c = 0; c < cout; ++c) y.row(static_cast<Eigen::Index>(c)).array() += bv[c];
  }
  Shape out_shape{B, cout, g.ho, g.wo};
  return Tensor::make(std::move(out_shape), std::move(out), {x, w, bias}, [B, g, cout, in_size, out_size](Node& o) {
    Node& px = *o.parents[0];
    Node& pw = *o.parents[1];
    Node& pb = *o.parents[2];
    std::vector<Real> col(g.col_rows() * g.col_cols());
    std::vector<Real> dcol(col.size());
    const auto wm = cmap(pw.value, 0, cout, g.col_rows());
    for (std::size_t b = 0; b < B; ++b) {
      const auto dy = cmap(o.grad, b * out_size, cout, g.col_cols());
      if (pb.requires_grad) {
        for (std::size_t c = 0; c < cout; ++c) pb.grad[c] += dy.row(static_cast<Eigen::Index>(c)).sum();
      }
      if (pw.requires_grad) {
        im2col(px.value.data() + b * in_size, g, col.data());
        map(pw.grad, 0, cout, g.col_rows()).noalias() += dy * cmap(col, 0, g.col_rows(), g.col_cols()).transpose();
      }
      if (px.requires_grad) {
        map(dcol, 0, g.col_rows(), g.col_cols()).noalias() = wm.transpose() * dy;
        col2im_add(dcol.data(), g, px.grad.data() + b * in_size);
      }
    }
  }, "conv2d");
}

// ---------------------------------------------------------------- reductions

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "mean_axis: axis out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t n = s[axis];
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto& xv = x.node()->value;
  std::vector<Real> out(outer * inner, Real(0));
  const Real inv = Real(1) / static_cast<Real>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const Real* in = xv.data() + (o * n + k) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += in[i];
    }
  }
  for (auto& v : out) v *= inv;
  return Tensor::make(std::move(out_shape), std::move(out), {x}, [outer, n, inner, inv](Node& o) {
    auto& g = o.parents[0]->grad;
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < inner; ++i) g[(a * n + k) * inner + i] += inv * o.grad[a * inner + i];
      }
    }
  }, "mean_axis");
}

Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real v : x.data()) s += v;
  return Tensor::make({}, {s}, {x}, [](Node& o) {
    auto& g = o.parents[0]->grad;
    for (auto& v : g) v += o.grad[0];
  }, "sum");
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  require(a.rank() == b.rank() && a.rank() >= 1 &&
              std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()),
          mismatch("concat_last", a.shape(), b.shape()));
  const std::size_t ca = a.dim(-1), cb = b.dim(-1), rows = a.size() / ca;
  Shape out_shape = a.shape();
  out_shape.back() = ca + cb;
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  std::vector<Real> out(rows * (ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  return Tensor::make(std::move(out_shape), std::move(out), {a, b}, [rows, ca, cb](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* g = o.grad.data() + r * (ca + cb);
      if (pa.requires_grad) {
        for (std::size_t j = 0; j < ca; ++j) pa.grad[r * ca + j] += g[j];
      }
      if (pb.requires_grad) {
        for (std::size_t j = 0; j < cb; ++j) pb.grad[r * cb + j] += g[ca + j];
      }
    }
  }, "concat_last");
}

Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len) {
  const std::size_t c = x.dim(-1);
  require(start + len <= c && len > 0, "slice_last: range out of bounds for " + shape_str(x.shape()));
  const std::size_t rows = x.size() / c;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  const auto& xv = x.node()->value;
  std::vector<Real> out(rows * len);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * c + start, len, out.data() + r * len);
  return Tensor::make(std::move(out_shape), std::move(out), {x}, [rows, c, start, len](Node& o) {
    auto& g = o.parents[0]->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) g[r * c + start + j] += o.grad[r * len + j];
    }
  }, "slice_last");
}

Tensor relative_position_bias(const Tensor& table, std::size_t length, std::size_t clip) {
  require(table.rank() == 2 && table.dim(1) == 2 * clip + 1,
          "relative_position_bias: table must be [H, 2*clip+1], got " + shape_str(table.shape()));
  const std::size_t H = table.dim(0), width = 2 * clip + 1;
  auto index = [clip](std::size_t i, std::size_t j) {
    const long d = std::clamp(static_cast<long>(j) - static_cast<long>(i), -static_cast<long>(clip),
                              static_cast<long>(clip));
    return static_cast<std::size_t>(d + static_cast<long>(clip));
  };
  const auto& tv = table.node()->value;
  std::vector<Real> out(H * length * length);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t j = 0; j < length; ++j) out[(h * length + i) * length + j] = tv[h * width + index(i, j)];
    }
  }
  return Tensor::make({H, length, length}, std::move(out), {table}, [H, length, width, index](Node& o) {
    auto& g = o.parents[0]->grad;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < length; ++i) {
        for (std::size_t j = 0; j < length; ++j) g[h * width + index(i, j)] += o.grad[(h * length + i) * length + j];
      }
    }
  }, "relative_position_bias");
}

// ---------------------------------------------------------------- grad check

namespace {
constexpr double kGradCheckFloor = 1e-4;
}  // namespace

double grad_check(const std::function<Tensor()>& loss, std::span<Parameter> params, double h,
                  std::size_t coords_per_param, std::uint64_t seed) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  loss().backward();

  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : params) {
    const auto grad = p.tensor.grad();
    const std::size_t n = p.tensor.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > coords_per_param) {
      CounterRng rng(derive_seed(seed, p.name));
      for (std::size_t i = 0; i < coords_per_param; ++i) std::swap(coords[i], coords[i + rng.uniform_int(n - i)]);
      coords.resize(coords_per_param);
    }
    auto values = p.tensor.mutable_data();
    for (std::size_t idx : coords) {
      const Real orig = values[idx];
      values[idx] = static_cast<Real>(orig + h);
      const double up = loss().item();
      values[idx] = static_cast<Real>(orig - h);
      const double down = loss().item();
      values[idx] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grad.empty() ? 0.0 : static_cast<double>(grad[idx]);
      const double diff = std::abs(analytic - numeric);
      const double err = diff / std::max(std::abs(analytic) + std::abs(numeric), kGradCheckFloor);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace hm::ad
