#include "pnp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace pnp {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) return;  // scalar
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_to_string(shape));
  }
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) +
                       " and " + shape_to_string(b.shape()));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_to_string(a.shape()));
  }
}

Tensor make_op(Shape shape, std::vector<NodePtr> parents, std::function<void(Node&)> forward,
               std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  n->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  n->parents = std::move(parents);
  n->forward = std::move(forward);
  n->forward(*n);
  if (n->requires_grad) n->backward = std::move(backward);
  return Tensor(std::move(n));
}

// Gradient sink for parent i, or nullptr when that parent does not need one.
double* grad_sink(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

const double* val(const Node& self, std::size_t i) { return self.parents[i]->value.data(); }

std::size_t last_dim(const Tensor& a) { return a.rank() == 0 ? 1 : a.shape().back(); }

}  // namespace

// -- Tensor -------------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  check_shape(shape);
  node_ = std::make_shared<Node>();
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  if (requires_grad) node_->ensure_grad();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
  if (requires_grad) node_->ensure_grad();
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor(Shape{}, {v}, requires_grad); }

Tensor Tensor::vector(std::vector<double> v, bool requires_grad) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), cols}, std::move(data), requires_grad);
}

Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().value.size(); }
std::span<const double> Tensor::data() const { return checked().value; }
std::span<double> Tensor::mutable_data() { return checked().value; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return data()[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_rank("at", *this, 2);
  return data()[row * shape()[1] + col];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  auto& n = checked();
  n.requires_grad = on;
  if (on) n.ensure_grad();
}

std::span<const double> Tensor::grad() const {
  auto& n = checked();
  n.ensure_grad();
  return n.grad;
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return Tensor(shape(), std::vector<double>(g.begin(), g.end()));
}

void Tensor::zero_grad() {
  auto& n = checked();
  n.grad.assign(n.value.size(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), to_vector()); }

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

// -- Graph --------------------------------------------------------------------

Graph Graph::record(const Tensor& output) {
  Graph g;
  g.output_ = output;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS so deep graphs cannot overflow the stack.
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(output.node(), 0);
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr p = node->parents[next++];
      if (seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      g.order_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

void Graph::replay() const {
  for (const auto& n : order_) {
    if (n->forward) n->forward(*n);
  }
}

void Graph::backward() const {
  for (const auto& n : order_) {
    if (!n->requires_grad) continue;
    if (n->parents.empty()) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  auto& out = *output_.node();
  if (!out.requires_grad) return;
  for (auto& g : out.grad) g += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node& n = **it;
    if (n.requires_grad && n.backward) n.backward(n);
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_to_string(loss.shape()));
  }
  Graph::record(loss).backward();
}

// -- elementwise ----------------------------------------------------------------

namespace {

template <typename Fwd, typename Dx>
Tensor unary(const Tensor& a, Fwd fwd, Dx dx) {
  return make_op(
      a.shape(), {a.node()},
      [fwd](Node& self) {
        const double* x = val(self, 0);
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = fwd(x[i]);
      },
      [dx](Node& self) {
        double* gx = grad_sink(self, 0);
        const double* x = val(self, 0);
        for (std::size_t i = 0; i < self.value.size(); ++i) {
          gx[i] += self.grad[i] * dx(x[i], self.value[i]);
        }
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("add", a, b);
  return make_op(
      a.shape(), {a.node(), b.node()},
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = x[i] + y[i];
      },
      [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
          if (double* g = grad_sink(self, k)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
          }
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("sub", a, b);
  return make_op(
      a.shape(), {a.node(), b.node()},
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = x[i] - y[i];
      },
      [](Node& self) {
        if (double* g = grad_sink(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_sink(self, 1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("mul", a, b);
  return make_op(
      a.shape(), {a.node(), b.node()},
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = x[i] * y[i];
      },
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        if (double* g = grad_sink(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
        }
        if (double* g = grad_sink(self, 1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
        }
      });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor fill_masked(const Tensor& a, const std::vector<bool>& mask, double value) {
  if (mask.size() != a.numel()) {
    throw DimensionError("fill_masked: mask of length " + std::to_string(mask.size()) +
                         " for shape " + shape_to_string(a.shape()));
  }
  return make_op(
      a.shape(), {a.node()},
      [mask, value](Node& self) {
        const double* x = val(self, 0);
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = mask[i] ? value : x[i];
      },
      [mask](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (!mask[i]) g[i] += self.grad[i];
        }
      });
}

// -- leading-dimension broadcasting -----------------------------------------------

Tensor add_rowwise(const Tensor& a, const Tensor& b) {
  if (b.numel() != last_dim(a) || b.rank() != 1) mismatch("add_rowwise", a, b);
  return make_op(
      a.shape(), {a.node(), b.node()},
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        std::size_t n = self.parents[1]->value.size();
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = x[i] + y[i % n];
      },
      [](Node& self) {
        std::size_t n = self.parents[1]->value.size();
        if (double* g = grad_sink(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_sink(self, 1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        }
      });
}

Tensor mul_rowwise(const Tensor& a, const Tensor& b) {
  if (b.numel() != last_dim(a) || b.rank() != 1) mismatch("mul_rowwise", a, b);
  return make_op(
      a.shape(), {a.node(), b.node()},
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        std::size_t n = self.parents[1]->value.size();
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = x[i] * y[i % n];
      },
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        std::size_t n = self.parents[1]->value.size();
        if (double* g = grad_sink(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i % n];
        }
        if (double* g = grad_sink(self, 1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * x[i];
        }
      });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  if (a.rank() == 0 || s.rank() != 1 || s.numel() != a.dim(0)) mismatch("scale_rows", a, s);
  return make_op(
      a.shape(), {a.node(), s.node()},
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        std::size_t row = self.value.size() / self.shape[0];
        for (std::size_t i = 0; i < self.value.size(); ++i) self.value[i] = x[i] * y[i / row];
      },
      [](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        std::size_t row = self.value.size() / self.shape[0];
        if (double* g = grad_sink(self, 0)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i / row];
        }
        if (double* g = grad_sink(self, 1)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i / row] += self.grad[i] * x[i];
        }
      });
}

// -- linear algebra -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) mismatch("matmul", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return make_op(
      Shape{m, n}, {a.node(), b.node()},
      [m, k, n](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        std::fill(self.value.begin(), self.value.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          double* out = self.value.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double xip = x[i * k + p];
            const double* yrow = y + p * n;
            for (std::size_t j = 0; j < n; ++j) out[j] += xip * yrow[j];
          }
        }
      },
      [m, k, n](Node& self) {
        const double *x = val(self, 0), *y = val(self, 1);
        const double* gy = self.grad.data();
        if (double* gx = grad_sink(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double* yrow = y + p * n;
              const double* grow = gy + i * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yrow[j];
              gx[i * k + p] += acc;
            }
          }
        }
        if (double* gb = grad_sink(self, 1)) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = gy + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double xip = x[i * k + p];
              double* brow = gb + p * n;
              for (std::size_t j = 0; j < n; ++j) brow[j] += xip * grow[j];
            }
          }
        }
      });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  return make_op(
      Shape{n, m}, {a.node()},
      [m, n](Node& self) {
        const double* x = val(self, 0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) self.value[j * m + i] = x[i * n + j];
      },
      [m, n](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
      });
}

// -- reductions -----------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  return make_op(
      Shape{}, {a.node()},
      [](Node& self) {
        const auto& x = self.parents[0]->value;
        self.value[0] = std::accumulate(x.begin(), x.end(), 0.0);
      },
      [](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += self.grad[0];
      });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1, len = s[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return make_op(
      s, {x.node()},
      [outer, inner, len](Node& self) {
        const double* in = val(self, 0);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t c = 0; c < inner; ++c) {
            const std::size_t base = o * len * inner + c;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
              double e = std::exp(in[base + k * inner] - mx);
              self.value[base + k * inner] = e;
              z += e;
            }
            for (std::size_t k = 0; k < len; ++k) self.value[base + k * inner] /= z;
          }
        }
      },
      [outer, inner, len](Node& self) {
        double* g = grad_sink(self, 0);
        const double* y = self.value.data();
        const double* gy = self.grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t c = 0; c < inner; ++c) {
            const std::size_t base = o * len * inner + c;
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k) dot += gy[base + k * inner] * y[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t i = base + k * inner;
              g[i] += y[i] * (gy[i] - dot);
            }
          }
        }
      });
}

Tensor masked_softmax_rows(const Tensor& x, const std::vector<bool>& column_mask) {
  require_rank("masked_softmax_rows", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (column_mask.size() != cols) {
    throw DimensionError("masked_softmax_rows: mask of length " +
                         std::to_string(column_mask.size()) + " for shape " +
                         shape_to_string(x.shape()));
  }
  if (std::all_of(column_mask.begin(), column_mask.end(), [](bool m) { return m; })) {
    throw ContractError("masked_softmax_rows: every key is masked");
  }
  return make_op(
      x.shape(), {x.node()},
      [rows, cols, column_mask](Node& self) {
        const double* in = val(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = in + r * cols;
          double* yr = self.value.data() + r * cols;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t c = 0; c < cols; ++c)
            if (!column_mask[c]) mx = std::max(mx, xr[c]);
          double z = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = column_mask[c] ? 0.0 : std::exp(xr[c] - mx);
            z += yr[c];
          }
          for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
        }
      },
      [rows, cols](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = self.value.data() + r * cols;
          const double* gr = self.grad.data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += yr[c] * (gr[c] - dot);
        }
      });
}

Tensor layer_norm_noaffine(const Tensor& x, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm_noaffine: scalar input");
  if (!(eps > 0.0)) throw ContractError("layer_norm_noaffine: eps must be positive");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  // Per-row reciprocal standard deviation, shared between forward and backward.
  auto rstd = std::make_shared<std::vector<double>>(rows);
  return make_op(
      x.shape(), {x.node()},
      [rows, width, eps, rstd](Node& self) {
        const double* in = val(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = in + r * width;
          double* yr = self.value.data() + r * width;
          double mu = 0.0;
          for (std::size_t c = 0; c < width; ++c) mu += xr[c];
          mu /= static_cast<double>(width);
          // Center twice: with a large common offset, mu itself is only good
          // to an ulp of the offset, and the division by a tiny deviation
          // would amplify what is left. The second mean is taken over the
          // already small centered values, where it is exact enough.
          double residual = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            yr[c] = xr[c] - mu;
            residual += yr[c];
          }
          residual /= static_cast<double>(width);
          double var = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            yr[c] -= residual;
            var += yr[c] * yr[c];
          }
          var /= static_cast<double>(width);
          const double inv = 1.0 / std::sqrt(var + eps);
          (*rstd)[r] = inv;
          for (std::size_t c = 0; c < width; ++c) yr[c] *= inv;
        }
      },
      [rows, width, rstd](Node& self) {
        double* g = grad_sink(self, 0);
        const double n = static_cast<double>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = self.value.data() + r * width;
          const double* gr = self.grad.data() + r * width;
          double mg = 0.0, mgy = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            mg += gr[c];
            mgy += gr[c] * yr[c];
          }
          mg /= n;
          mgy /= n;
          for (std::size_t c = 0; c < width; ++c) {
            g[r * width + c] += (*rstd)[r] * (gr[c] - mg - yr[c] * mgy);
          }
        }
      });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels) {
  require_rank("cross_entropy_rows", logits, 2);
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_to_string(logits.shape()));
  }
  for (auto l : labels) {
    if (l >= k) throw DimensionError("cross_entropy_rows: label " + std::to_string(l) + " >= " +
                                     std::to_string(k));
  }
  auto lse = [k](const double* xr) {
    double mx = *std::max_element(xr, xr + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(xr[c] - mx);
    return mx + std::log(z);
  };
  return make_op(
      Shape{rows}, {logits.node()},
      [rows, k, labels, lse](Node& self) {
        const double* in = val(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          self.value[r] = lse(in + r * k) - in[r * k + labels[r]];
        }
      },
      [rows, k, labels, lse](Node& self) {
        double* g = grad_sink(self, 0);
        const double* in = val(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = in + r * k;
          const double z = lse(xr);
          for (std::size_t c = 0; c < k; ++c) {
            double p = std::exp(xr[c] - z);
            g[r * k + c] += self.grad[r] * (p - (c == labels[r] ? 1.0 : 0.0));
          }
        }
      });
}

// -- indexing and layout ---------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(shape));
  }
  return make_op(
      std::move(shape), {a.node()},
      [](Node& self) { self.value = self.parents[0]->value; },
      [](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() == 0) throw DimensionError("gather_rows: scalar input");
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t count = a.dim(0);
  const std::size_t width = a.numel() / count;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (auto r : idx) {
    if (r >= count) {
      throw DimensionError("gather_rows: index " + std::to_string(r) + " out of range for shape " +
                           shape_to_string(a.shape()));
    }
  }
  Shape out = a.shape();
  out[0] = idx.size();
  return make_op(
      std::move(out), {a.node()},
      [idx, width](Node& self) {
        const double* x = val(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          std::copy_n(x + idx[i] * width, width, self.value.data() + i * width);
        }
      },
      [idx, width](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < width; ++c) g[idx[i] * width + c] += self.grad[i * width + c];
        }
      });
}

Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> rows, std::size_t count) {
  if (a.rank() == 0 || a.dim(0) != rows.size()) {
    throw DimensionError("scatter_rows: " + std::to_string(rows.size()) +
                         " indices for shape " + shape_to_string(a.shape()));
  }
  const std::size_t width = a.numel() / a.dim(0);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (auto r : idx) {
    if (r >= count) {
      throw DimensionError("scatter_rows: index " + std::to_string(r) + " >= " +
                           std::to_string(count));
    }
  }
  Shape out = a.shape();
  out[0] = count;
  return make_op(
      std::move(out), {a.node()},
      [idx, width](Node& self) {
        const double* x = val(self, 0);
        std::fill(self.value.begin(), self.value.end(), 0.0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < width; ++c) self.value[idx[i] * width + c] += x[i * width + c];
        }
      },
      [idx, width](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < width; ++c) g[i * width + c] += self.grad[idx[i] * width + c];
        }
      });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape out = parts.front().shape();
  if (out.empty()) throw DimensionError("concat_rows: scalar input");
  out[0] = 0;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out.size() || !std::equal(s.begin() + 1, s.end(), out.begin() + 1)) {
      mismatch("concat_rows", parts.front(), p);
    }
    out[0] += s[0];
    nodes.push_back(p.node());
  }
  return make_op(
      std::move(out), std::move(nodes),
      [](Node& self) {
        std::size_t offset = 0;
        for (const auto& p : self.parents) {
          std::copy(p->value.begin(), p->value.end(), self.value.begin() + offset);
          offset += p->value.size();
        }
      },
      [](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          const std::size_t n = self.parents[k]->value.size();
          if (double* g = grad_sink(self, k)) {
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
          }
          offset += n;
        }
      });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", a, 2);
  if (begin >= end || end > a.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for shape " + shape_to_string(a.shape()));
  }
  const std::size_t rows = a.dim(0), cols = a.dim(1), w = end - begin;
  return make_op(
      Shape{rows, w}, {a.node()},
      [rows, cols, w, begin](Node& self) {
        const double* x = val(self, 0);
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(x + r * cols + begin, w, self.value.data() + r * w);
      },
      [rows, cols, w, begin](Node& self) {
        double* g = grad_sink(self, 0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += self.grad[r * w + c];
      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.dim(0) != rows) mismatch("concat_cols", parts.front(), p);
    widths.push_back(p.dim(1));
    cols += p.dim(1);
    nodes.push_back(p.node());
  }
  return make_op(
      Shape{rows, cols}, std::move(nodes),
      [rows, cols, widths](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const double* x = val(self, k);
          for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(x + r * widths[k], widths[k], self.value.data() + r * cols + offset);
          offset += widths[k];
        }
      },
      [rows, cols, widths](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (double* g = grad_sink(self, k)) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c)
                g[r * widths[k] + c] += self.grad[r * cols + offset + c];
          }
          offset += widths[k];
        }
      });
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h) {
  Tensor probe = x.detach();
  Tensor out(x.shape(), 0.0);
  auto values = probe.mutable_data();
  auto grad = out.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = f(probe);
    values[i] = orig - h;
    const double fm = f(probe);
    values[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw EvaluationError("finite_diff_gradient: non-finite function value at coordinate " +
                            std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

}  // namespace pnp
