#include "coiba/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "coiba/errors.hpp"

namespace coiba {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    fail(ErrorKind::Dimension,
         "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Result node; records parents and the backward closure only when a parent
// needs a gradient.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool tracked = std::any_of(parents.begin(), parents.end(),
                                   [](const NodePtr& p) { return p->requires_grad; });
  if (tracked) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail(ErrorKind::Dimension,
           "cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Element strides of `in` when read at indices of `out` (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = element_count(out);
  if (total == 0) return;
  if (out.empty()) {
    f(0, 0, 0);
    return;
  }
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) {
      f(base + j, ia + j * ia_step, ib + j * ib_step);
    }
    // Advance the outer counters.
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      counter[d] = 0;
    }
  }
}

enum class BinaryOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinaryOp op) {
  const NodePtr na = a.node();
  const NodePtr nb = b.node();
  const bool same = na->shape == nb->shape;
  Shape out_shape = same ? na->shape : broadcast_shape(na->shape, nb->shape);
  std::vector<double> out(element_count(out_shape));
  const double* av = na->value.data();
  const double* bv = nb->value.data();
  auto apply = [op](double x, double y) {
    switch (op) {
      case BinaryOp::Add: return x + y;
      case BinaryOp::Sub: return x - y;
      case BinaryOp::Mul: return x * y;
      case BinaryOp::Div: return x / y;
    }
    return 0.0;
  };
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
  } else {
    sa = broadcast_strides(na->shape, out_shape);
    sb = broadcast_strides(nb->shape, out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      out[i] = apply(av[ia], bv[ib]);
    });
  }
  return make_result(
      out_shape, std::move(out), {na, nb},
      [op, same, sa, sb](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double* g = self.grad.data();
        const double* x = pa.value.data();
        const double* y = pb.value.data();
        auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
          const double gi = g[i];
          if (pa.requires_grad) {
            double da = gi;
            if (op == BinaryOp::Sub || op == BinaryOp::Add) da = gi;
            else if (op == BinaryOp::Mul) da = gi * y[ib];
            else da = gi / y[ib];
            pa.grad[ia] += da;
          }
          if (pb.requires_grad) {
            double db = gi;
            if (op == BinaryOp::Sub) db = -gi;
            else if (op == BinaryOp::Mul) db = gi * x[ia];
            else if (op == BinaryOp::Div) db = -gi * x[ia] / (y[ib] * y[ib]);
            pb.grad[ib] += db;
          }
        };
        if (same) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) step(i, i, i);
        } else {
          for_each_broadcast(self.shape, sa, sb, step);
        }
      });
}

// Elementwise map; `derivative(x, y)` gives dy/dx.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd forward, Deriv derivative) {
  const NodePtr nx = x.node();
  std::vector<double> out(nx->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(nx->value[i]);
  return make_result(nx->shape, std::move(out), {nx}, [derivative](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * derivative(p.value[i], self.value[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->value = {0.0}; }

Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = element_count(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (element_count(shape) != data.size()) {
    fail(ErrorKind::Dimension, "shape " + shape_string(shape) + " needs " +
                                   std::to_string(element_count(shape)) + " values, got " +
                                   std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::size(int axis) const {
  return node_->shape[normalize_axis(axis, node_->shape.size())];
}

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) fail(ErrorKind::Contract, "mutable_data() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (node_->value.size() != 1) {
    fail(ErrorKind::Contract, "item() on tensor of shape " + shape_string(node_->shape));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!node_->leaf) fail(ErrorKind::Contract, "set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return node_->leaf; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return from_data(node_->shape, node_->value); }

void Tensor::backward() const {
  if (node_->value.size() != 1) {
    fail(ErrorKind::Contract,
         "backward() needs a scalar root, got " + shape_string(node_->shape));
  }
  if (!node_->requires_grad) {
    fail(ErrorKind::Contract, "backward() root does not depend on any tracked tensor");
  }
  // Iterative post-order DFS over tracked nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->leaf) {
      n->grad.assign(n->value.size(), 0.0);
    } else if (n->grad.size() != n->value.size()) {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (!n->leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryOp::Div); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const NodePtr nx = x.node();
  double total = 0.0;
  for (double v : nx->value) total += v;
  return make_result({}, {total}, {nx}, [](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0];
    for (double& gi : p.grad) gi += g;
  });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) fail(ErrorKind::Dimension, "mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Matrix product

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const NodePtr na = a.node();
  const NodePtr nb = b.node();
  const Shape& sa = na->shape;
  const Shape& sb = nb->shape;
  if (sa.size() < 2 || sb.size() < 2) {
    fail(ErrorKind::Dimension, "matmul needs rank >= 2 operands, got " + shape_string(sa) +
                                   " and " + shape_string(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t bk = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != bk) {
    fail(ErrorKind::Dimension, "matmul inner dimensions differ: " + shape_string(sa) +
                                   " vs " + shape_string(sb));
  }
  const bool shared_b = sb.size() == 2;
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  if (!shared_b) {
    if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
      fail(ErrorKind::Dimension, "matmul batch dimensions differ: " + shape_string(sa) +
                                     " vs " + shape_string(sb));
    }
  }
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n);
  const std::size_t b_rows = transpose_b ? n : k;
  const std::size_t b_cols = transpose_b ? k : n;

  if (shared_b) {
    // Fold the batch into the row dimension: one GEMM.
    ConstMap A(na->value.data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(k));
    ConstMap B(nb->value.data(), static_cast<Eigen::Index>(b_rows), static_cast<Eigen::Index>(b_cols));
    MutMap C(out.data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(n));
    if (transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A * B;
  } else {
    for (std::size_t t = 0; t < batch; ++t) {
      ConstMap A(na->value.data() + t * m * k, m, k);
      ConstMap B(nb->value.data() + t * k * n, b_rows, b_cols);
      MutMap C(out.data() + t * m * n, m, n);
      if (transpose_b) C.noalias() = A * B.transpose();
      else C.noalias() = A * B;
    }
  }

  return make_result(
      std::move(out_shape), std::move(out), {na, nb},
      [=](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const std::size_t groups = shared_b ? 1 : batch;
        const std::size_t rows = shared_b ? batch * m : m;
        for (std::size_t t = 0; t < groups; ++t) {
          ConstMap G(self.grad.data() + t * rows * n, rows, n);
          ConstMap A(pa.value.data() + t * rows * k, rows, k);
          ConstMap B(pb.value.data() + t * k * n, b_rows, b_cols);
          if (pa.requires_grad) {
            MutMap GA(pa.grad.data() + t * rows * k, rows, k);
            if (transpose_b) GA.noalias() += G * B;
            else GA.noalias() += G * B.transpose();
          }
          if (pb.requires_grad) {
            MutMap GB(pb.grad.data() + t * k * n, b_rows, b_cols);
            if (transpose_b) GB.noalias() += G.transpose() * A;
            else GB.noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, int axis) {
  const NodePtr nx = x.node();
  const Shape& shape = nx->shape;
  if (shape.empty()) fail(ErrorKind::Dimension, "softmax of a scalar");
  const std::size_t ax = normalize_axis(axis, shape.size());
  const std::size_t len = shape[ax];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= shape[i];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= shape[i];

  std::vector<double> out(nx->value.size());
  const double* v = nx->value.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) peak = std::max(peak, v[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(v[base + j * inner] - peak);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result(shape, std::move(out), {nx}, [outer, inner, len](Node& self) {
    Node& p = *self.parents[0];
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          p.grad[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& shift, double eps) {
  const NodePtr nx = x.node();
  const NodePtr ng = gamma.node();
  const NodePtr ns = shift.node();
  if (nx->shape.empty() || nx->shape.back() == 0) {
    fail(ErrorKind::Dimension, "layer_norm needs a non-empty last dimension");
  }
  if (!(eps > 0.0)) fail(ErrorKind::Config, "layer_norm eps must be positive");
  const std::size_t d = nx->shape.back();
  if (ng->shape != Shape{d} || ns->shape != Shape{d}) {
    fail(ErrorKind::Dimension, "layer_norm affine parameters must have shape [" +
                                   std::to_string(d) + "]");
  }
  const std::size_t rows = nx->value.size() / d;
  std::vector<double> out(nx->value.size());
  std::vector<double> normalized(nx->value.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* v = nx->value.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += v[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (v[j] - mu) * (v[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (v[j] - mu) * inv;
      normalized[r * d + j] = xh;
      out[r * d + j] = xh * ng->value[j] + ns->value[j];
    }
  }
  return make_result(
      nx->shape, std::move(out), {nx, ng, ns},
      [d, rows, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& ps = *self.parents[2];
        const double dd = static_cast<double>(d);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * d;
          const double* xh = normalized.data() + r * d;
          if (pg.requires_grad) {
            for (std::size_t j = 0; j < d; ++j) pg.grad[j] += g[j] * xh[j];
          }
          if (ps.requires_grad) {
            for (std::size_t j = 0; j < d; ++j) ps.grad[j] += g[j];
          }
          if (px.requires_grad) {
            double sum_dxhat = 0.0;
            double sum_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g[j] * pg.value[j];
              sum_dxhat += dxhat[j];
              sum_dxhat_xhat += dxhat[j] * xh[j];
            }
            const double c = inv_std[r] / dd;
            for (std::size_t j = 0; j < d; ++j) {
              px.grad[r * d + j] += c * (dd * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const NodePtr nl = logits.node();
  const Shape& shape = nl->shape;
  if (shape.empty() || shape.size() > 2) {
    fail(ErrorKind::Dimension, "cross_entropy expects [C] or [B, C] logits, got " +
                                   shape_string(shape));
  }
  const std::size_t classes = shape.back();
  const std::size_t rows = shape.size() == 1 ? 1 : shape[0];
  if (targets.size() != rows) {
    fail(ErrorKind::Dimension, "cross_entropy got " + std::to_string(targets.size()) +
                                   " targets for " + std::to_string(rows) + " rows");
  }
  std::vector<double> probs(nl->value.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= classes) {
      fail(ErrorKind::Index, "target class " + std::to_string(targets[r]) +
                                 " out of range for " + std::to_string(classes) + " classes");
    }
    const double* v = nl->value.data() + r * classes;
    const double peak = *std::max_element(v, v + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(v[c] - peak);
    const double log_norm = peak + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(v[c] - log_norm);
    loss += log_norm - v[targets[r]];
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> owned(targets.begin(), targets.end());
  return make_result({}, {loss}, {nl},
                     [rows, classes, probs = std::move(probs), owned = std::move(owned)](Node& self) {
                       Node& p = *self.parents[0];
                       const double g = self.grad[0] / static_cast<double>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < classes; ++c) {
                           const double onehot = c == owned[r] ? 1.0 : 0.0;
                           p.grad[r * classes + c] += g * (probs[r * classes + c] - onehot);
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t targets[] = {target};
  return cross_entropy(logits, std::span<const std::size_t>(targets));
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  const NodePtr nx = x.node();
  if (element_count(shape) != nx->value.size()) {
    fail(ErrorKind::Dimension,
         "cannot reshape " + shape_string(nx->shape) + " to " + shape_string(shape));
  }
  return make_result(std::move(shape), nx->value, {nx}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const NodePtr nx = x.node();
  const Shape& in = nx->shape;
  const std::size_t rank = in.size();
  if (order.size() != rank) fail(ErrorKind::Dimension, "permute order has wrong length");
  std::vector<bool> used(rank, false);
  for (std::size_t axis : order) {
    if (axis >= rank || used[axis]) fail(ErrorKind::Dimension, "permute order is not a permutation");
    used[axis] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(rank);
  std::vector<std::size_t> gather(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[order[i]];
    gather[i] = in_strides[order[i]];
  }
  // Source index for each output element.
  std::vector<std::size_t> source(nx->value.size());
  std::vector<std::size_t> zero(rank, 0);
  for_each_broadcast(out_shape, gather, zero,
                     [&](std::size_t i, std::size_t src, std::size_t) { source[i] = src; });
  std::vector<double> out(source.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = nx->value[source[i]];
  return make_result(std::move(out_shape), std::move(out), {nx},
                     [source = std::move(source)](Node& self) {
                       Node& p = *self.parents[0];
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         p.grad[source[i]] += self.grad[i];
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const NodePtr nx = x.node();
  const Shape& in = nx->shape;
  const std::size_t ax = normalize_axis(axis, in.size());
  if (start + length > in[ax]) {
    fail(ErrorKind::Index, "slice [" + std::to_string(start) + ", " +
                               std::to_string(start + length) + ") exceeds axis size " +
                               std::to_string(in[ax]));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[ax] = length;
  const std::size_t full_len = in[ax];
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(nx->value.data() + (o * full_len + start) * inner, length * inner,
                out.data() + o * length * inner);
  }
  return make_result(std::move(out_shape), std::move(out), {nx},
                     [outer, inner, full_len, start, length](Node& self) {
                       Node& p = *self.parents[0];
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* g = self.grad.data() + o * length * inner;
                         double* dst = p.grad.data() + (o * full_len + start) * inner;
                         for (std::size_t i = 0; i < length * inner; ++i) dst[i] += g[i];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat of zero tensors");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> lengths;
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    bool compatible = s.size() == first.size();
    for (std::size_t i = 0; compatible && i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) compatible = false;
    }
    if (!compatible) {
      fail(ErrorKind::Dimension,
           "concat shape mismatch: " + shape_string(first) + " vs " + shape_string(s));
    }
    nodes.push_back(t.node());
    lengths.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t total_len = out_shape[ax];
  std::vector<double> out(element_count(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < nodes.size(); ++p) {
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(nodes[p]->value.data() + o * lengths[p] * inner, lengths[p] * inner,
                  out.data() + (o * total_len + offset) * inner);
    }
    offset += lengths[p];
  }
  return make_result(std::move(out_shape), std::move(out), nodes,
                     [outer, inner, total_len, lengths](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         Node& parent = *self.parents[p];
                         if (parent.requires_grad) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* g = self.grad.data() + (o * total_len + off) * inner;
                             double* dst = parent.grad.data() + o * lengths[p] * inner;
                             for (std::size_t i = 0; i < lengths[p] * inner; ++i) dst[i] += g[i];
                           }
                         }
                         off += lengths[p];
                       }
                     });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  const NodePtr nx = x.node();
  if (broadcast_shape(nx->shape, shape) != shape) {
    fail(ErrorKind::Dimension,
         "cannot expand " + shape_string(nx->shape) + " to " + shape_string(shape));
  }
  const auto strides = broadcast_strides(nx->shape, shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  std::vector<double> out(element_count(shape));
  for_each_broadcast(shape, strides, zero, [&](std::size_t i, std::size_t src, std::size_t) {
    out[i] = nx->value[src];
  });
  return make_result(shape, std::move(out), {nx}, [strides, zero](Node& self) {
    Node& p = *self.parents[0];
    for_each_broadcast(self.shape, strides, zero, [&](std::size_t i, std::size_t src, std::size_t) {
      p.grad[src] += self.grad[i];
    });
  });
}

}  // namespace coiba
