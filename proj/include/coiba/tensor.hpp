#pragma once

// Dense row-major tensors of doubles with tape-free reverse-mode
// differentiation. Every op result keeps references to its parents only when
// some parent requires a gradient, so inference builds no graph.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace coiba {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Negative axes count from the end.
  std::size_t size(int axis) const;

  std::span<const double> data() const;
  // Writable view of a leaf's values. Mutating a tensor that already feeds a
  // recorded graph invalidates that graph.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Copy of the values with no graph attached.
  Tensor detach() const;

  // Accumulates d(this)/d(leaf) into every reachable leaf with
  // requires_grad. Calling it twice without zero_grad() adds twice.
  void backward() const;

  explicit Tensor(std::shared_ptr<detail::Node> node);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Broadcasting elementwise arithmetic (numpy rules, right-aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// NaN inputs propagate; log of a negative value is NaN and log(0) is -inf.
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
// Exact erf form: x * Phi(x).
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// a: [..., m, k]. b: [k, n] shared across the leading dims of a, or
// [..., k, n] with leading dims equal to a's. With transpose_b, b holds the
// transposed operand ([n, k] or [..., n, k]).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& shift,
                  double eps);

// Mean over rows of -log softmax(logits)[target]. logits is [C] (one target)
// or [B, C].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
Tensor cross_entropy(const Tensor& logits, std::size_t target);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor expand(const Tensor& x, const Shape& shape);

}  // namespace coiba
