#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// Every operation on tensors that require gradients records a node holding
// its inputs and a backward closure; backward() walks those nodes in reverse
// topological order. Tensor is a shared handle: copies alias the same node.
//
// Axis conventions: reductions, softmax, normalisation and concat take an
// explicit axis. Binary elementwise ops broadcast the right operand when its
// shape is a trailing suffix of the left operand's shape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#ifdef __AVX2__
#include <immintrin.h>
#endif
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "sgm/errors.hpp"

namespace sgm {

using Shape = std::vector<std::size_t>;

// Training allocates and frees multi-megabyte activations every step. With
// glibc defaults those go through mmap/munmap and the kernel re-zeroes pages
// each time; keeping them on the heap cuts system time to almost nothing.
// Call once at program start. No effect on results.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily; empty means "all zero"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording() { return detail::no_grad_depth == 0; }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                       " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  // Builds the result of a custom differentiable operation. `backward` reads
  // the result node's grad and accumulates into its parents' grads. When no
  // parent needs gradients (or recording is off) the graph is dropped.
  static Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!grad_recording()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct value access for leaves (parameters, finite differences).
  std::span<double> mutable_data() { return node_->value; }

  // Empty span when nothing has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  std::vector<double> grad_or_zero() const {
    return node_->grad.empty() ? std::vector<double>(numel(), 0.0) : node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const { return node_->value[i * node_->shape.back() + j]; }

  // Same values, no graph history, no gradient.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// backward

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; Sinkhorn chains are deep.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node().ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Shape helpers

namespace detail {

// Splits `shape` around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// c[n x m] += a[n x k] * b[k x m]; row-major. Every c[i][j] is accumulated
// as c + a[i][0] b[0][j] + a[i][1] b[1][j] + ... in that order, so a row's
// result depends only on that row of a, never on blocking or on other rows.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  std::size_t i = 0;
#ifdef __AVX2__
  const std::size_t m8 = m - m % 8;
  const std::size_t n4 = n - n % 4;
  // Panels of b sized to stay cache resident; c carries the partial sums
  // between panels, which leaves the accumulation order unchanged.
  const std::size_t kc = std::max<std::size_t>(16, 16384 / std::max<std::size_t>(m, 1));
  for (std::size_t p0 = 0; p0 < k; p0 += kc) {
    const std::size_t p1 = std::min(k, p0 + kc);
    for (std::size_t i0 = 0; i0 < n4; i0 += 4) {
      const double* a0 = a + i0 * k;
      const double* a1 = a0 + k;
      const double* a2 = a1 + k;
      const double* a3 = a2 + k;
      for (std::size_t j = 0; j < m8; j += 8) {
        double* c0 = c + i0 * m + j;
        double* c1 = c0 + m;
        double* c2 = c1 + m;
        double* c3 = c2 + m;
        __m256d x0 = _mm256_loadu_pd(c0), y0 = _mm256_loadu_pd(c0 + 4);
        __m256d x1 = _mm256_loadu_pd(c1), y1 = _mm256_loadu_pd(c1 + 4);
        __m256d x2 = _mm256_loadu_pd(c2), y2 = _mm256_loadu_pd(c2 + 4);
        __m256d x3 = _mm256_loadu_pd(c3), y3 = _mm256_loadu_pd(c3 + 4);
        const double* bp = b + p0 * m + j;
        for (std::size_t p = p0; p < p1; ++p, bp += m) {
          const __m256d b0 = _mm256_loadu_pd(bp);
          const __m256d b1 = _mm256_loadu_pd(bp + 4);
          __m256d av = _mm256_broadcast_sd(a0 + p);
          x0 = _mm256_add_pd(x0, _mm256_mul_pd(av, b0));
          y0 = _mm256_add_pd(y0, _mm256_mul_pd(av, b1));
          av = _mm256_broadcast_sd(a1 + p);
          x1 = _mm256_add_pd(x1, _mm256_mul_pd(av, b0));
          y1 = _mm256_add_pd(y1, _mm256_mul_pd(av, b1));
          av = _mm256_broadcast_sd(a2 + p);
          x2 = _mm256_add_pd(x2, _mm256_mul_pd(av, b0));
          y2 = _mm256_add_pd(y2, _mm256_mul_pd(av, b1));
          av = _mm256_broadcast_sd(a3 + p);
          x3 = _mm256_add_pd(x3, _mm256_mul_pd(av, b0));
          y3 = _mm256_add_pd(y3, _mm256_mul_pd(av, b1));
        }
        _mm256_storeu_pd(c0, x0), _mm256_storeu_pd(c0 + 4, y0);
        _mm256_storeu_pd(c1, x1), _mm256_storeu_pd(c1 + 4, y1);
        _mm256_storeu_pd(c2, x2), _mm256_storeu_pd(c2 + 4, y2);
        _mm256_storeu_pd(c3, x3), _mm256_storeu_pd(c3 + 4, y3);
      }
    }
  }
  for (; i < n4; ++i) {
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * m;
      double* ci = c + i * m;
      for (std::size_t j = m8; j < m; ++j) ci[j] += av * bp[j];
    }
  }
#endif
  for (; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

inline std::vector<double> transpose_block(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

template <class Fwd, class Bwd>
Tensor unary_map(const Tensor& x, Fwd fwd, Bwd dfdx) {
  std::vector<double> v(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(xv[i]);
  return Tensor::make_result(x.shape(), std::move(v), {x}, [dfdx](Node& self) {
    Node& in = *self.parents[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(in.value[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                             [](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                             });
}

// Swaps the last two axes (rank 2 or 3).
inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("transpose: needs rank 2 or 3, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  const std::size_t batch = x.numel() / (r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> v(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto t = detail::transpose_block(x.data().data() + b * r * c, r, c);
    std::copy(t.begin(), t.end(), v.begin() + static_cast<std::ptrdiff_t>(b * r * c));
  }
  return Tensor::make_result(std::move(shape), std::move(v), {x}, [r, c, batch](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b) {
      const auto t = detail::transpose_block(self.grad.data() + b * r * c, c, r);
      for (std::size_t i = 0; i < r * c; ++i) g[b * r * c + i] += t[i];
    }
  });
}

// Selects rows (entries along axis 0) in the given order; repeats allowed.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  if (x.rank() == 0) throw ShapeError("gather_rows: scalar input");
  const std::size_t rows = x.dim(0), width = x.numel() / std::max<std::size_t>(rows, 1);
  Shape shape = x.shape();
  shape[0] = index.size();
  std::vector<double> v(index.size() * width);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(index[r]) + " out of range for shape " +
                       shape_str(x.shape()));
    }
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(index[r] * width), width,
                v.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tensor::make_result(std::move(shape), std::move(v), {x}, [idx, width](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < width; ++c) g[idx[r] * width + c] += self.grad[r * width + c];
  });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = xs[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for shape " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = ref;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(ref));
    shape[axis] += x.dim(axis);
  }
  const auto split = detail::split_axis(shape, axis, "concat");
  std::vector<std::size_t> widths;  // per input: n_i * inner
  for (const auto& x : xs) widths.push_back(x.dim(axis) * split.inner);
  const std::size_t total = split.n * split.inner;
  std::vector<double> v(shape_numel(shape));
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::size_t off = 0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
      std::copy_n(xs[t].data().begin() + static_cast<std::ptrdiff_t>(o * widths[t]), widths[t],
                  v.begin() + static_cast<std::ptrdiff_t>(o * total + off));
      off += widths[t];
    }
  }
  return Tensor::make_result(std::move(shape), std::move(v), xs, [widths, total, outer = split.outer](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t t = 0; t < self.parents.size(); ++t) {
      detail::Node& p = *self.parents[t];
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[t]; ++i) g[o * widths[t] + i] += self.grad[o * total + off + i];
      }
      off += widths[t];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// a[..., n, k] x b[k, m] -> [..., n, m]   (leading axes of a broadcast)
// a[B, n, k]   x b[B, k, m] -> [B, n, m]  (batched)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto fail = [&] {
    return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || (b.rank() != 2 && b.rank() != 3)) throw fail();
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t n = a.dim(a.rank() - 2);
  const std::size_t m = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != k) throw fail();
  std::size_t batch = 1;
  std::size_t rows = a.numel() / std::max<std::size_t>(k, 1);
  if (b.rank() == 3) {
    if (a.rank() != 3 || a.dim(0) != b.dim(0)) throw fail();
    batch = b.dim(0);
    rows = n;
  }
  Shape shape = a.shape();
  shape.back() = m;
  std::vector<double> v(shape_numel(shape), 0.0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::gemm_acc(a.data().data() + bi * rows * k, b.data().data() + bi * k * m, v.data() + bi * rows * m, rows,
                     k, m);
  }
  return Tensor::make_result(std::move(shape), std::move(v), {a, b}, [batch, rows, k, m](detail::Node& self) {
    detail::Node& an = *self.parents[0];
    detail::Node& bn = *self.parents[1];
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const double* gc = self.grad.data() + bi * rows * m;
      if (an.requires_grad) {
        const auto bt = detail::transpose_block(bn.value.data() + bi * k * m, k, m);
        detail::gemm_acc(gc, bt.data(), an.ensure_grad().data() + bi * rows * k, rows, m, k);
      }
      if (bn.requires_grad) {
        const auto at = detail::transpose_block(an.value.data() + bi * rows * k, rows, k);
        detail::gemm_acc(at.data(), gc, bn.ensure_grad().data() + bi * k * m, k, rows, m);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-suffix broadcasting of the right operand

namespace detail {

template <class F, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, Da da, Db db) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  const std::size_t nb = b.numel();
  const std::size_t blocks = nb ? a.numel() / nb : 0;
  std::vector<double> v(a.numel());
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t o = 0; o < blocks; ++o)
    for (std::size_t j = 0; j < nb; ++j) v[o * nb + j] = f(av[o * nb + j], bv[j]);
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [nb, blocks, da, db](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    const double* gy = self.grad.data();
    const double* x = an.value.data();
    const double* y = bn.value.data();
    if (an.requires_grad) {
      double* g = an.ensure_grad().data();
      for (std::size_t o = 0; o < blocks; ++o)
        for (std::size_t j = 0; j < nb; ++j) g[o * nb + j] += gy[o * nb + j] * da(x[o * nb + j], y[j]);
    }
    if (bn.requires_grad) {
      double* g = bn.ensure_grad().data();
      for (std::size_t o = 0; o < blocks; ++o)
        for (std::size_t j = 0; j < nb; ++j) g[j] += gy[o * nb + j] * db(x[o * nb + j], y[j]);
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

// x @ w + bias, with w [in, out] and bias [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) { return add(matmul(x, w), bias); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_map(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_constant(const Tensor& x, double c) {
  return detail::unary_map(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_map(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_map(x, [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_map(x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "sum");
  std::vector<double> v(s.outer * s.inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.n; ++a)
      for (std::size_t i = 0; i < s.inner; ++i) v[o * s.inner + i] += xv[(o * s.n + a) * s.inner + i];
  return Tensor::make_result(detail::drop_axis(x.shape(), axis), std::move(v), {x}, [s](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t a = 0; a < s.n; ++a)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.n + a) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

inline Tensor mean(const Tensor& x, std::size_t axis) {
  const auto n = x.shape().at(axis);
  if (n == 0) throw ShapeError("mean: empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

// Sum of all entries, shape [].
inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor::make_result({}, {acc}, {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

struct MaxPoolResult {
  Tensor values;
  std::vector<std::size_t> argmax;  // position along the pooled axis, one per output entry
};

inline MaxPoolResult max_pool_with_indices(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "max_pool");
  if (s.n == 0) throw ShapeError("max_pool: empty axis");
  std::vector<double> v(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner, 0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double best = xv[o * s.n * s.inner + i];
      std::size_t besta = 0;
      for (std::size_t a = 1; a < s.n; ++a) {
        const double c = xv[(o * s.n + a) * s.inner + i];
        if (c > best) {
          best = c;
          besta = a;
        }
      }
      v[o * s.inner + i] = best;
      arg[o * s.inner + i] = besta;
    }
  Tensor out = Tensor::make_result(detail::drop_axis(x.shape(), axis), std::move(v), {x}, [s, arg](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i)
        g[(o * s.n + arg[o * s.inner + i]) * s.inner + i] += self.grad[o * s.inner + i];
  });
  return {out, std::move(arg)};
}

inline Tensor max_pool(const Tensor& x, std::size_t axis) { return max_pool_with_indices(x, axis).values; }

// ---------------------------------------------------------------------------
// Normalisations

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "softmax");
  std::vector<double> v(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.n; ++a) mx = std::max(mx, xv[at(a)]);
      double z = 0.0;
      for (std::size_t a = 0; a < s.n; ++a) z += (v[at(a)] = std::exp(xv[at(a)] - mx));
      for (std::size_t a = 0; a < s.n; ++a) v[at(a)] /= z;
    }
  return Tensor::make_result(x.shape(), std::move(v), {x}, [s](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t a = 0; a < s.n; ++a) dot += self.grad[at(a)] * self.value[at(a)];
        for (std::size_t a = 0; a < s.n; ++a) g[at(a)] += self.value[at(a)] * (self.grad[at(a)] - dot);
      }
  });
}

// x - log(sum(exp(x), axis)), evaluated with the per-slice max factored out.
inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "log_softmax");
  std::vector<double> v(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.n; ++a) mx = std::max(mx, xv[at(a)]);
      double z = 0.0;
      for (std::size_t a = 0; a < s.n; ++a) z += std::exp(xv[at(a)] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t a = 0; a < s.n; ++a) v[at(a)] = xv[at(a)] - lse;
    }
  return Tensor::make_result(x.shape(), std::move(v), {x}, [s](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
        double total = 0.0;
        for (std::size_t a = 0; a < s.n; ++a) total += self.grad[at(a)];
        for (std::size_t a = 0; a < s.n; ++a) g[at(a)] += self.grad[at(a)] - std::exp(self.value[at(a)]) * total;
      }
  });
}

// y = x / sum(x, axis), the sum broadcast back along `axis`. Entries must be positive.
inline Tensor normalize_sum(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "normalize_sum");
  std::vector<double> v(x.numel());
  std::vector<double> sums(s.outer * s.inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double z = 0.0;
      for (std::size_t a = 0; a < s.n; ++a) z += xv[(o * s.n + a) * s.inner + i];
      sums[o * s.inner + i] = z;
      for (std::size_t a = 0; a < s.n; ++a) v[(o * s.n + a) * s.inner + i] = xv[(o * s.n + a) * s.inner + i] / z;
    }
  return Tensor::make_result(x.shape(), std::move(v), {x}, [s, sums](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t a = 0; a < s.n; ++a) dot += self.grad[at(a)] * self.value[at(a)];
        const double z = sums[o * s.inner + i];
        for (std::size_t a = 0; a < s.n; ++a) g[at(a)] += (self.grad[at(a)] - dot) / z;
      }
  });
}

// Per-feature standardisation over `axis` followed by a learned affine map:
//   y = gain * (x - mean) / sqrt(var + eps) + bias
// Features are the entries of the last axis; gain and bias have shape [C].
// Statistics are biased and recomputed on every call.
inline Tensor feature_normalize(const Tensor& x, std::size_t axis, const Tensor& gain, const Tensor& bias,
                                double eps = 1e-5) {
  if (x.rank() < 2 || axis + 1 >= x.rank()) {
    throw ShapeError("feature_normalize: axis must precede the feature axis, shape " + shape_str(x.shape()));
  }
  const std::size_t c = x.shape().back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw ShapeError("feature_normalize: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match features of " + shape_str(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis, "feature_normalize");
  const std::size_t groups = s.outer * s.inner;
  std::vector<double> xhat(x.numel()), inv_std(groups), v(x.numel());
  const double* xv = x.data().data();
  const double* gv = gain.data().data();
  const double* bv = bias.data().data();
  const double nn = static_cast<double>(s.n);
  std::vector<double> mu(s.inner), var(s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const std::size_t base = o * s.n * s.inner;
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (std::size_t a = 0; a < s.n; ++a) {
      const double* row = xv + base + a * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) mu[i] += row[i];
    }
    for (std::size_t i = 0; i < s.inner; ++i) mu[i] /= nn;
    for (std::size_t a = 0; a < s.n; ++a) {
      const double* row = xv + base + a * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double d = row[i] - mu[i];
        var[i] += d * d;
      }
    }
    double* is = inv_std.data() + o * s.inner;
    for (std::size_t i = 0; i < s.inner; ++i) is[i] = 1.0 / std::sqrt(var[i] / nn + eps);
    for (std::size_t a = 0; a < s.n; ++a) {
      const std::size_t off = base + a * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) xhat[off + i] = (xv[off + i] - mu[i]) * is[i];
      for (std::size_t i0 = 0; i0 < s.inner; i0 += c)
        for (std::size_t f = 0; f < c; ++f) v[off + i0 + f] = gv[f] * xhat[off + i0 + f] + bv[f];
    }
  }
  return Tensor::make_result(x.shape(), std::move(v), {x, gain, bias}, [s, c, xhat = std::move(xhat),
                                                                         inv_std = std::move(inv_std)](
                                                                            detail::Node& self) {
    detail::Node& xn = *self.parents[0];
    detail::Node& gn = *self.parents[1];
    detail::Node& bn = *self.parents[2];
    const double nn = static_cast<double>(s.n);
    const double* gy = self.grad.data();
    std::vector<double> sum_g(s.inner), sum_gx(s.inner), scale_k(s.inner), mean_g(s.inner), mean_gx(s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t base = o * s.n * s.inner;
      std::fill(sum_g.begin(), sum_g.end(), 0.0);
      std::fill(sum_gx.begin(), sum_gx.end(), 0.0);
      for (std::size_t a = 0; a < s.n; ++a) {
        const std::size_t off = base + a * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) {
          sum_g[i] += gy[off + i];
          sum_gx[i] += gy[off + i] * xhat[off + i];
        }
      }
      for (std::size_t i = 0; i < s.inner; ++i) {
        if (gn.requires_grad) gn.ensure_grad()[i % c] += sum_gx[i];
        if (bn.requires_grad) bn.ensure_grad()[i % c] += sum_g[i];
      }
      if (!xn.requires_grad) continue;
      double* gx = xn.ensure_grad().data();
      const double* is = inv_std.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        scale_k[i] = gn.value[i % c] * is[i];
        mean_g[i] = sum_g[i] / nn;
        mean_gx[i] = sum_gx[i] / nn;
      }
      for (std::size_t a = 0; a < s.n; ++a) {
        const std::size_t off = base + a * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) {
          gx[off + i] += scale_k[i] * (gy[off + i] - mean_g[i] - xhat[off + i] * mean_gx[i]);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.
//
// Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)
// using central differences with step eps on every coordinate of x.

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5) {
  if (!x.requires_grad()) x = Tensor(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  x.zero_grad();
  const Tensor y = f(x);
  backward(y);
  const std::vector<double> analytic = x.grad_or_zero();
  double worst = 0.0;
  auto xd = x.mutable_data();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double orig = xd[i];
    xd[i] = orig + eps;
    const double fp = f(x).item();
    xd[i] = orig - eps;
    const double fm = f(x).item();
    xd[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace sgm
