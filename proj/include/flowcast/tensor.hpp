#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "flowcast/error.hpp"
#include "flowcast/rng.hpp"

namespace flowcast {

using Shape = std::vector<std::size_t>;

enum class Mode { train, eval };

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. Copies share storage (handle
// semantics); the gradient buffer exists iff requires_grad is set.
// Values are immutable once an op has consumed the tensor; grads are the
// only buffers mutated afterwards.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return Tensor(std::move(shape), value, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor init: shape " + shape_str(shape) +
                       " does not match " + std::to_string(values.size()) +
                       " values");
    }
    Tensor t(std::move(shape), 0.0, requires_grad);
    t.impl_->values = std::move(values);
    return t;
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t size() const { return impl_->values.size(); }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  std::uint64_t id() const { return impl_->id; }

  std::span<double> values() { return impl_->values; }
  std::span<const double> values() const { return impl_->values; }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }

  double value() const {
    if (size() != 1) {
      throw ShapeError("value(): tensor " + shape_str(shape()) +
                       " is not a scalar");
    }
    return impl_->values[0];
  }

  double& operator()(std::size_t i) { return impl_->values[i]; }
  double operator()(std::size_t i) const { return impl_->values[i]; }
  double& operator()(std::size_t i, std::size_t j) {
    return impl_->values[i * impl_->shape[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return impl_->values[i * impl_->shape[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return impl_->values[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return impl_->values[(i * impl_->shape[1] + j) * impl_->shape[2] + k];
  }

  void set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    if (rg) {
      impl_->grad.assign(impl_->values.size(), 0.0);
    } else {
      impl_->grad.clear();
    }
  }

  void zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Deep copy; the clone never keeps grad history.
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>(*impl_);
    t.impl_->id = next_id();
    t.impl_->requires_grad = false;
    t.impl_->grad.clear();
    return t;
  }

  bool all_finite() const {
    for (double v : impl_->values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;
    std::uint64_t id = 0;
  };

  Tensor(Shape shape, double fill, bool requires_grad) {
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->values.assign(shape_numel(impl_->shape), fill);
    impl_->id = next_id();
    if (requires_grad) {
      impl_->requires_grad = true;
      impl_->grad.assign(impl_->values.size(), 0.0);
    }
  }

  static std::uint64_t next_id() {
    static std::uint64_t counter = 0;
    return ++counter;
  }

  std::shared_ptr<Impl> impl_;
};

// Records the forward graph in creation order; reversing that order is a
// valid reverse-topological traversal because every op's inputs were
// created before its output. One tape per forward pass, confined to a
// single thread. Passing a null Tape* to an op runs it untracked.
class Tape {
 public:
  struct Op {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  void record(std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward) {
    ops_.push_back({std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return ops_.size(); }
  const Op& op(std::size_t i) const { return ops_[i]; }

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse. Gradients
  // accumulate across fan-out because every backward rule adds into the
  // input grad buffers.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    Tensor seed = loss;
    seed.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (it->output.requires_grad()) it->backward();
    }
  }

 private:
  std::vector<Op> ops_;
};

namespace detail {

inline bool track(const Tape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void require_same_shape(const char* op, const Tensor& a,
                               const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void accumulate(Tensor& t, std::span<const double> delta) {
  auto g = t.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, Tape* tape, Tensor a, Fwd fwd, Bwd bwd) {
  (void)name;
  Tensor out = Tensor::zeros(a.shape(), detail::track(tape, {&a}));
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out, bwd]() mutable {
      if (!a.requires_grad()) return;
      auto ag = a.grad();
      auto og = out.grad();
      auto av = a.values();
      auto ov = out.values();
      for (std::size_t i = 0; i < ag.size(); ++i) {
        ag[i] += og[i] * bwd(av[i], ov[i]);
      }
    });
  }
  return out;
}

inline Tensor sigmoid(Tape* tape, Tensor a) {
  return unary_op(
      "sigmoid", tape, a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(Tape* tape, Tensor a) {
  return unary_op(
      "tanh", tape, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

// d/dx relu at exactly 0 is defined as 0.
inline Tensor relu(Tape* tape, Tensor a) {
  return unary_op(
      "relu", tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const char* name, Tape* tape, Tensor a, Tensor b, Fwd fwd,
                 DA da, DB db) {
  detail::require_same_shape(name, a, b);
  Tensor out = Tensor::zeros(a.shape(), detail::track(tape, {&a, &b}));
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  if (tape && out.requires_grad()) {
    tape->record({a, b}, out, [a, b, out, da, db]() mutable {
      auto og = out.grad();
      auto av = a.values();
      auto bv = b.values();
      if (a.requires_grad()) {
        auto ag = a.grad();
        for (std::size_t i = 0; i < ag.size(); ++i) {
          ag[i] += og[i] * da(av[i], bv[i]);
        }
      }
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (std::size_t i = 0; i < bg.size(); ++i) {
          bg[i] += og[i] * db(av[i], bv[i]);
        }
      }
    });
  }
  return out;
}

inline Tensor add(Tape* tape, Tensor a, Tensor b) {
  return binary_op(
      "add", tape, a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(Tape* tape, Tensor a, Tensor b) {
  return binary_op(
      "sub", tape, a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(Tape* tape, Tensor a, Tensor b) {
  return binary_op(
      "mul", tape, a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor scale(Tape* tape, Tensor a, double c) {
  return unary_op(
      "scale", tape, a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(Tape* tape, Tensor a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor out = Tensor::zeros(std::move(shape), detail::track(tape, {&a}));
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out]() mutable {
      if (a.requires_grad()) detail::accumulate(a, out.grad());
    });
  }
  return out;
}

inline Tensor flatten(Tape* tape, Tensor a) {
  return reshape(tape, a, {a.size()});
}

inline Tensor transpose(Tape* tape, Tensor a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose: expected a matrix, got " +
                     shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m}, detail::track(tape, {&a}));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  }
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out, m, n]() mutable {
      if (!a.requires_grad()) return;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          a.grad()[i * n + j] += out.grad()[j * m + i];
        }
      }
    });
  }
  return out;
}

// Concatenation along axis 0; trailing dimensions must agree. On vectors
// this is plain concatenation.
inline Tensor concat_rows(Tape* tape, std::vector<Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no tensors given");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    Shape ptail(p.shape().begin() + 1, p.shape().end());
    if (p.rank() != parts[0].rank() || ptail != tail) {
      throw ShapeError("concat: shape mismatch " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    rows += p.dim(0);
    rg = rg || (tape && p.requires_grad());
  }
  Shape oshape{rows};
  oshape.insert(oshape.end(), tail.begin(), tail.end());
  Tensor out = Tensor::zeros(std::move(oshape), rg);
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    std::copy(p.values().begin(), p.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.size();
  }
  if (tape && out.requires_grad()) {
    tape->record(parts, out, [parts, out]() mutable {
      std::size_t at = 0;
      for (Tensor& p : parts) {
        if (p.requires_grad()) {
          auto pg = p.grad();
          auto og = out.grad();
          for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += og[at + i];
        }
        at += p.size();
      }
    });
  }
  return out;
}

inline Tensor concat_cols(Tape* tape, std::vector<Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no tensors given");
  const std::size_t m = parts[0].dim(0);
  std::size_t cols = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) {
      throw ShapeError("concat_cols: shape mismatch " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    cols += p.dim(1);
    rg = rg || (tape && p.requires_grad());
  }
  Tensor out = Tensor::zeros({m, cols}, rg);
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p.dim(1); ++j) out(i, at + j) = p(i, j);
    }
    at += p.dim(1);
  }
  if (tape && out.requires_grad()) {
    tape->record(parts, out, [parts, out, m, cols]() mutable {
      std::size_t at = 0;
      for (Tensor& p : parts) {
        const std::size_t pc = p.dim(1);
        if (p.requires_grad()) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < pc; ++j) {
              p.grad()[i * pc + j] += out.grad()[i * cols + at + j];
            }
          }
        }
        at += pc;
      }
    });
  }
  return out;
}

inline Tensor slice_rows(Tape* tape, Tensor a, std::size_t start,
                         std::size_t len) {
  if (a.rank() == 0 || start + len > a.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " +
                     shape_str(a.shape()));
  }
  Shape oshape = a.shape();
  oshape[0] = len;
  const std::size_t stride = a.size() / a.dim(0);
  Tensor out = Tensor::zeros(std::move(oshape), detail::track(tape, {&a}));
  std::copy(a.values().begin() + static_cast<std::ptrdiff_t>(start * stride),
            a.values().begin() +
                static_cast<std::ptrdiff_t>((start + len) * stride),
            out.values().begin());
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out, start, stride]() mutable {
      if (!a.requires_grad()) return;
      auto ag = a.grad();
      auto og = out.grad();
      for (std::size_t i = 0; i < og.size(); ++i) {
        ag[start * stride + i] += og[i];
      }
    });
  }
  return out;
}

inline Tensor slice_cols(Tape* tape, Tensor a, std::size_t start,
                         std::size_t len) {
  if (a.rank() != 2 || start + len > a.dim(1)) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " +
                     shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({m, len}, detail::track(tape, {&a}));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < len; ++j) out(i, j) = a(i, start + j);
  }
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out, start, m, n, len]() mutable {
      if (!a.requires_grad()) return;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
          a.grad()[i * n + start + j] += out.grad()[i * len + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape* tape, Tensor a, Tensor b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n}, detail::track(tape, {&a, &b}));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a(i, l);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += av * b(l, j);
    }
  }
  if (tape && out.requires_grad()) {
    tape->record({a, b}, out, [a, b, out, m, k, n]() mutable {
      auto og = out.grad();
      if (a.requires_grad()) {
        auto ag = a.grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t l = 0; l < k; ++l) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += og[i * n + j] * b(l, j);
            ag[i * k + l] += s;
          }
        }
      }
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (std::size_t l = 0; l < k; ++l) {
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += a(i, l) * og[i * n + j];
            bg[l * n + j] += s;
          }
        }
      }
    });
  }
  return out;
}

// W [out x in] applied to a vector [in].
inline Tensor matvec(Tape* tape, Tensor w, Tensor x) {
  if (x.rank() != 1) {
    throw ShapeError("matvec: expected a vector, got " + shape_str(x.shape()));
  }
  Tensor col = reshape(tape, x, {x.size(), 1});
  return flatten(tape, matmul(tape, w, col));
}

// Broadcasts a row vector over every row of a matrix.
inline Tensor add_rowvec(Tape* tape, Tensor a, Tensor b) {
  if (a.rank() != 2 || b.rank() != 1 || a.dim(1) != b.dim(0)) {
    throw ShapeError("add_rowvec: incompatible shapes " +
                     shape_str(a.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({m, n}, detail::track(tape, {&a, &b}));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = a(i, j) + b(j);
  }
  if (tape && out.requires_grad()) {
    tape->record({a, b}, out, [a, b, out, m, n]() mutable {
      auto og = out.grad();
      if (a.requires_grad()) detail::accumulate(a, og);
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += og[i * n + j];
          bg[j] += s;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(Tape* tape, Tensor a) {
  Tensor out = Tensor::zeros({1}, detail::track(tape, {&a}));
  double s = 0.0;
  for (double v : a.values()) s += v;
  out(0) = s;
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      const double g = out.grad()[0];
      for (double& ag : a.grad()) ag += g;
    });
  }
  return out;
}

inline Tensor mean_rows(Tape* tape, Tensor a) {
  if (a.rank() != 2) {
    throw ShapeError("mean_rows: expected a matrix, got " +
                     shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n}, detail::track(tape, {&a}));
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a(i, j);
    out(j) = s / static_cast<double>(m);
  }
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out, m, n]() mutable {
      if (!a.requires_grad()) return;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          a.grad()[i * n + j] += out.grad()[j] / static_cast<double>(m);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis
// ---------------------------------------------------------------------------

inline Tensor softmax(Tape* tape, Tensor a) {
  if (a.rank() == 0 || a.dim(a.rank() - 1) == 0) {
    throw ShapeError("softmax: empty last axis in " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / n;
  Tensor out = Tensor::zeros(a.shape(), detail::track(tape, {&a}));
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    double mx = av[base];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av[base + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      ov[base + j] = std::exp(av[base + j] - mx);
      denom += ov[base + j];
    }
    for (std::size_t j = 0; j < n; ++j) ov[base + j] /= denom;
  }
  if (tape && out.requires_grad()) {
    tape->record({a}, out, [a, out, rows, n]() mutable {
      if (!a.requires_grad()) return;
      auto ag = a.grad();
      auto og = out.grad();
      auto ov = out.values();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += og[base + j] * ov[base + j];
        for (std::size_t j = 0; j < n; ++j) {
          ag[base + j] += ov[base + j] * (og[base + j] - dot);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1-D convolution (cross-correlation), zero same-padding, stride 1
// ---------------------------------------------------------------------------

inline Tensor conv1d(Tape* tape, Tensor input, Tensor kernels, Tensor bias) {
  if (input.rank() != 2 || kernels.rank() != 3 || bias.rank() != 1) {
    throw ShapeError("conv1d: expected input [C_in x L], kernels "
                     "[C_out x C_in x k], bias [C_out]; got " +
                     shape_str(input.shape()) + ", " +
                     shape_str(kernels.shape()) + ", " +
                     shape_str(bias.shape()));
  }
  const std::size_t cin = input.dim(0), len = input.dim(1);
  const std::size_t cout = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != cin) {
    throw ShapeError("conv1d: kernel channels " + shape_str(kernels.shape()) +
                     " do not match input " + shape_str(input.shape()));
  }
  if (bias.dim(0) != cout) {
    throw ShapeError("conv1d: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(cout) + " kernels");
  }
  if (k % 2 == 0) {
    throw ShapeError("conv1d: kernel size " + std::to_string(k) +
                     " must be odd for symmetric same-padding");
  }
  const std::size_t pad = (k - 1) / 2;
  Tensor out =
      Tensor::zeros({cout, len}, detail::track(tape, {&input, &kernels, &bias}));
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t i = 0; i < len; ++i) {
      double acc = bias(co);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t t = 0; t < k; ++t) {
          const std::ptrdiff_t src =
              static_cast<std::ptrdiff_t>(i + t) - static_cast<std::ptrdiff_t>(pad);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
          acc += kernels(co, ci, t) * input(ci, static_cast<std::size_t>(src));
        }
      }
      out(co, i) = acc;
    }
  }
  if (tape && out.requires_grad()) {
    tape->record(
        {input, kernels, bias}, out,
        [input, kernels, bias, out, cin, cout, len, k, pad]() mutable {
          for (std::size_t co = 0; co < cout; ++co) {
            for (std::size_t i = 0; i < len; ++i) {
              const double g = out.grad()[co * len + i];
              if (bias.requires_grad()) bias.grad()[co] += g;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                for (std::size_t t = 0; t < k; ++t) {
                  const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + t) -
                                             static_cast<std::ptrdiff_t>(pad);
                  if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) {
                    continue;
                  }
                  const std::size_t s = static_cast<std::size_t>(src);
                  if (kernels.requires_grad()) {
                    kernels.grad()[(co * cin + ci) * k + t] += g * input(ci, s);
                  }
                  if (input.requires_grad()) {
                    input.grad()[ci * len + s] += g * kernels(co, ci, t);
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1-D max pooling; gradient goes to the lowest-index maximum
// ---------------------------------------------------------------------------

inline Tensor maxpool1d(Tape* tape, Tensor input, std::size_t window,
                        std::size_t stride) {
  if (input.rank() != 2) {
    throw ShapeError("maxpool1d: expected [C x L], got " +
                     shape_str(input.shape()));
  }
  if (window < 1 || stride < 1) {
    throw ShapeError("maxpool1d: window and stride must be >= 1");
  }
  const std::size_t c = input.dim(0), len = input.dim(1);
  if (len < window) {
    throw ShapeError("maxpool1d: input length " + std::to_string(len) +
                     " shorter than window " + std::to_string(window));
  }
  const std::size_t lout = (len - window) / stride + 1;
  Tensor out = Tensor::zeros({c, lout}, detail::track(tape, {&input}));
  auto argmax = std::make_shared<std::vector<std::size_t>>(c * lout);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t o = 0; o < lout; ++o) {
      const std::size_t start = o * stride;
      std::size_t best = start;
      double bv = input(ch, start);
      for (std::size_t t = 1; t < window; ++t) {
        if (input(ch, start + t) > bv) {
          bv = input(ch, start + t);
          best = start + t;
        }
      }
      out(ch, o) = bv;
      (*argmax)[ch * lout + o] = best;
    }
  }
  if (tape && out.requires_grad()) {
    tape->record({input}, out, [input, out, argmax, c, lout, len]() mutable {
      if (!input.requires_grad()) return;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t o = 0; o < lout; ++o) {
          input.grad()[ch * len + (*argmax)[ch * lout + o]] +=
              out.grad()[ch * lout + o];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization (per-feature over rows)
// ---------------------------------------------------------------------------

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;

  static BatchNormState init(std::size_t features, double momentum = 0.9) {
    BatchNormState s;
    s.running_mean = Tensor::zeros({features});
    s.running_var = Tensor::full({features}, 1.0);
    s.momentum = momentum;
    return s;
  }
};

// Train mode standardizes each feature with the batch's own biased
// statistics and folds them into the running estimates; eval mode uses the
// running estimates and never mutates state. Differentiable through the
// batch mean and variance.
inline Tensor batchnorm(Tape* tape, Tensor z, Tensor gamma, Tensor beta,
                        double eps, Mode mode, BatchNormState& state) {
  if (z.rank() != 2) {
    throw ShapeError("batchnorm: expected [batch x features], got " +
                     shape_str(z.shape()));
  }
  const std::size_t n = z.dim(0), f = z.dim(1);
  if (gamma.shape() != Shape{f} || beta.shape() != Shape{f}) {
    throw ShapeError("batchnorm: gamma " + shape_str(gamma.shape()) +
                     " / beta " + shape_str(beta.shape()) +
                     " do not match features of " + shape_str(z.shape()));
  }
  if (eps <= 0.0) throw ConfigError("batchnorm: eps must be positive");
  if (mode == Mode::train && n < 2) {
    throw ShapeError("batchnorm: train mode needs batch >= 2, got " +
                     std::to_string(n));
  }

  std::vector<double> mean(f), var(f);
  if (mode == Mode::train) {
    for (std::size_t j = 0; j < f; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += z(i, j);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = z(i, j) - m;
        v += d * d;
      }
      v /= static_cast<double>(n);  // biased
      mean[j] = m;
      var[j] = v;
      state.running_mean(j) =
          state.momentum * state.running_mean(j) + (1.0 - state.momentum) * m;
      state.running_var(j) =
          state.momentum * state.running_var(j) + (1.0 - state.momentum) * v;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mean[j] = state.running_mean(j);
      var[j] = state.running_var(j);
    }
  }

  Tensor out =
      Tensor::zeros({n, f}, detail::track(tape, {&z, &gamma, &beta}));
  auto xhat = std::make_shared<std::vector<double>>(n * f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const double xh = (z(i, j) - mean[j]) / std::sqrt(var[j] + eps);
      (*xhat)[i * f + j] = xh;
      out(i, j) = gamma(j) * xh + beta(j);
    }
  }

  if (tape && out.requires_grad()) {
    const bool through_stats = (mode == Mode::train);
    auto inv_std = std::make_shared<std::vector<double>>(f);
    for (std::size_t j = 0; j < f; ++j) {
      (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
    }
    tape->record(
        {z, gamma, beta}, out,
        [z, gamma, beta, out, xhat, inv_std, n, f, through_stats]() mutable {
          auto og = out.grad();
          for (std::size_t j = 0; j < f; ++j) {
            double sum_dy = 0.0, sum_dy_xh = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              sum_dy += og[i * f + j];
              sum_dy_xh += og[i * f + j] * (*xhat)[i * f + j];
            }
            if (gamma.requires_grad()) gamma.grad()[j] += sum_dy_xh;
            if (beta.requires_grad()) beta.grad()[j] += sum_dy;
            if (z.requires_grad()) {
              const double g = gamma(j);
              const double is = (*inv_std)[j];
              for (std::size_t i = 0; i < n; ++i) {
                const double dy = og[i * f + j];
                if (through_stats) {
                  z.grad()[i * f + j] +=
                      g * is *
                      (dy - sum_dy / static_cast<double>(n) -
                       (*xhat)[i * f + j] * sum_dy_xh / static_cast<double>(n));
                } else {
                  z.grad()[i * f + j] += g * is * dy;
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout helper (inverted): mask of 0 or 1/(1-rate) entries
// ---------------------------------------------------------------------------

inline Tensor dropout_mask(Rng& rng, const Shape& shape, double rate) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout rate " + std::to_string(rate) +
                      " outside [0, 1)");
  }
  Tensor mask = Tensor::zeros(shape);
  const double keep = 1.0 / (1.0 - rate);
  for (double& v : mask.values()) v = rng.uniform() < rate ? 0.0 : keep;
  return mask;
}

inline Tensor backward(Tape& tape, const Tensor& loss) {
  tape.backward(loss);
  return loss;
}

}  // namespace flowcast
