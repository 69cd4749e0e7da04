#pragma once

// Dense row-major float64 arrays with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations create new nodes
// that remember their parents together with a forward rule (used to replay
// the computation) and a backward rule (used to propagate gradients). Leaves
// created with requires_grad=true accumulate gradients across backward calls
// until zero_grad() is called.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pnp/errors.hpp"

namespace pnp {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> forward;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  /// An undefined tensor. Only defined() and assignment are valid on it.
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor vector(std::vector<double> v, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view of the values. Intended for leaves (parameter updates,
  /// finite-difference probes); writing into an interior node desynchronizes
  /// it from its parents until the graph is replayed.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  /// Accumulated gradient; all zeros when nothing has flowed in yet.
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// New leaf holding a copy of the values.
  Tensor detach() const;
  std::vector<double> to_vector() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  detail::Node& checked() const;
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of every node reachable from an output.
class Graph {
 public:
  static Graph record(const Tensor& output);

  std::size_t size() const { return order_.size(); }
  const Tensor& output() const { return output_; }
  /// Recompute every interior node from the current leaf values, in order.
  void replay() const;
  /// Seed d(output)/d(output) = 1 and propagate. Interior gradient buffers
  /// are reset first; leaf buffers accumulate.
  void backward() const;

 private:
  Tensor output_;
  std::vector<std::shared_ptr<detail::Node>> order_;
};

/// Reverse pass from a scalar loss. Throws ContractError on non-scalar input.
void backward(const Tensor& loss);

// -- elementwise ------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);
/// Replace entries where mask is true by a constant; no gradient there.
Tensor fill_masked(const Tensor& a, const std::vector<bool>& mask, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// -- broadcasting over the leading dimension ---------------------------------
/// a[m x n] + b[n] for every row.
Tensor add_rowwise(const Tensor& a, const Tensor& b);
/// a[m x n] * b[n] for every row.
Tensor mul_rowwise(const Tensor& a, const Tensor& b);
/// a[m x n] * s[m], each row scaled by its own scalar.
Tensor scale_rows(const Tensor& a, const Tensor& s);

// -- linear algebra ------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// -- reductions and normalization --------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor softmax(const Tensor& x, std::size_t axis);
/// Row softmax of x[q x k] where masked columns get probability 0.
/// Throws ContractError when every column is masked.
Tensor masked_softmax_rows(const Tensor& x, const std::vector<bool>& column_mask);
/// (x - mean) / sqrt(var + eps) over the last axis, biased variance.
Tensor layer_norm_noaffine(const Tensor& x, double eps = 1e-5);
/// Per-row -log softmax(logits)[label]; returns a vector with one entry per row.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels);

// -- indexing and layout ------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
/// Select slices along the first axis.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
/// Inverse of gather_rows into a zero tensor with `count` leading slices.
Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> rows, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
/// Throws EvaluationError if f returns a non-finite value.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h = 1e-5);

}  // namespace pnp
