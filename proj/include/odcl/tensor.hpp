#pragma once

// Reverse-mode automatic differentiation over dense row-major double
// matrices. The graph is rebuilt on every forward pass (define-by-run);
// backward() walks it once in reverse topological order. Just enough ops
// to run small transformer towers: matmul, elementwise, softmax, layer
// norm, slicing/concat, embedding lookup and a fused cross-entropy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "odcl/errors.hpp"

namespace odcl {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on demand during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  // Pulls this node's grad into its inputs. Owned by the node itself, so
  // it may capture a raw pointer to the node but must own the inputs.
  std::function<void()> backprop;

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// While alive, newly built nodes record no inputs and no backprop
// closures; forward values are still computed.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(flag()) { flag() = true; }
  ~NoGradGuard() { flag() = prev_; }
  static bool active() { return flag(); }

 private:
  static bool& flag() {
    thread_local bool f = false;
    return f;
  }
  bool prev_;
};

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values) {
    require(shape_size(shape) == values.size(), "tensor: values length must equal product of shape extents");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor zeros(std::vector<std::size_t> shape) { return full(std::move(shape), 0.0); }
  static Tensor full(std::vector<std::size_t> shape, double v) {
    std::vector<double> values(shape_size(shape), v);
    return from(std::move(shape), std::move(values));
  }
  static Tensor scalar(double v) { return from({1}, {v}); }
  static Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = dist(rng);
    return from(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->rows(); }
  std::size_t cols() const { return node_->cols(); }
  std::size_t size() const { return node_->size(); }

  const std::vector<double>& values() const { return node_->values; }
  std::vector<double>& mutable_values() { return node_->values; }
  double value() const {
    require(node_->size() == 1, "tensor: value() requires a scalar");
    return node_->values[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

 private:
  NodePtr node_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value produced by op '") + op + "'");
  }
}

inline Tensor make_node(const char* op, std::vector<std::size_t> shape, std::vector<double> values,
                        std::vector<Tensor> inputs, std::function<void(TensorNode*)> make_backprop) {
  check_finite(op, values);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->op = op;
  bool needs = false;
  if (!NoGradGuard::active()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (Tensor& t : inputs) n->inputs.push_back(t.node());
    TensorNode* self = n.get();
    n->backprop = [self, fn = std::move(make_backprop)]() { fn(self); };
  }
  return Tensor(std::move(n));
}

// Sums a multiset of doubles in an order independent of how the caller
// enumerated it; keeps attention mixes bit-stable under row permutation.
inline double canonical_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end(), [](double a, double b) {
    if (a < b) return true;
    if (b < a) return false;
    return std::signbit(a) && !std::signbit(b);
  });
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace detail

enum class SumOrder { Fast, Canonical };

// ---------------------------------------------------------------------------
// elementwise and linear ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return detail::make_node("add", a.shape(), std::move(out), {a, b}, [](TensorNode* self) {
    for (int k = 0; k < 2; ++k) {
      TensorNode* in = self->inputs[k].get();
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i) in->grad[i] += self->grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return detail::make_node("sub", a.shape(), std::move(out), {a, b}, [](TensorNode* self) {
    TensorNode* ia = self->inputs[0].get();
    TensorNode* ib = self->inputs[1].get();
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i) ia->grad[i] += self->grad[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i) ib->grad[i] -= self->grad[i];
    }
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "hadamard: shape mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return detail::make_node("hadamard", a.shape(), std::move(out), {a, b}, [](TensorNode* self) {
    TensorNode* ia = self->inputs[0].get();
    TensorNode* ib = self->inputs[1].get();
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i) ia->grad[i] += self->grad[i] * ib->values[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i) ib->grad[i] += self->grad[i] * ia->values[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  return detail::make_node("scale", a.shape(), std::move(out), {a}, [c](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self->grad.size(); ++i) in->grad[i] += self->grad[i] * c;
  });
}

// x: [r x c], bias: [1 x c] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require(bias.rows() == 1 && bias.cols() == x.cols(), "add_row_bias: bias must be [1 x cols]");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] + bias.values()[j];
  return detail::make_node("add_row_bias", x.shape(), std::move(out), {x, bias}, [r, c](TensorNode* self) {
    TensorNode* ix = self->inputs[0].get();
    TensorNode* ib = self->inputs[1].get();
    if (ix->requires_grad) {
      ix->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i) ix->grad[i] += self->grad[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ib->grad[j] += self->grad[i * c + j];
    }
  });
}

namespace detail {
// c += a * b with a [m x k], b [k x n]
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// c += a * b^T with a [m x k], b [n x k]
inline void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += arow[t] * brow[t];
      c[i * n + j] += s;
    }
  }
}
// c += a^T * b with a [m x k], b [m x n], c [k x n]
inline void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      double* crow = c + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
}  // namespace detail

// a [m x k] times b [k x n]. Canonical order sums each output entry over a
// sorted multiset of products, making the result invariant under paired
// permutations of a's columns / b's rows.
inline Tensor matmul(const Tensor& a, const Tensor& b, SumOrder order = SumOrder::Fast) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: 2-d operands required");
  require(a.cols() == b.rows(), "matmul: inner extents disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  if (order == SumOrder::Fast) {
    detail::matmul_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  } else {
    std::vector<double> terms(k);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < k; ++t) terms[t] = a.values()[i * k + t] * b.values()[t * n + j];
        out[i * n + j] = detail::canonical_sum(terms);
      }
  }
  return detail::make_node("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TensorNode* self) {
    TensorNode* ia = self->inputs[0].get();
    TensorNode* ib = self->inputs[1].get();
    if (ia->requires_grad) {
      ia->ensure_grad();  // dA += dC * B^T
      detail::matmul_nt_acc(self->grad.data(), ib->values.data(), ia->grad.data(), m, n, k);
    }
    if (ib->requires_grad) {
      ib->ensure_grad();  // dB += A^T * dC
      detail::matmul_tn_acc(ia->values.data(), self->grad.data(), ib->grad.data(), m, k, n);
    }
  });
}

// a [m x k] times b^T with b [n x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul_nt: 2-d operands required");
  require(a.cols() == b.cols(), "matmul_nt: inner extents disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  detail::matmul_nt_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_node("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](TensorNode* self) {
    TensorNode* ia = self->inputs[0].get();
    TensorNode* ib = self->inputs[1].get();
    if (ia->requires_grad) {
      ia->ensure_grad();  // dA += dC * B
      detail::matmul_acc(self->grad.data(), ib->values.data(), ia->grad.data(), m, n, k);
    }
    if (ib->requires_grad) {
      ib->ensure_grad();  // dB += dC^T * A
      detail::matmul_tn_acc(self->grad.data(), ia->values.data(), ib->grad.data(), m, n, k);
    }
  });
}

inline Tensor gelu(const Tensor& x) {
  // tanh approximation; exactly zero at zero.
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return detail::make_node("gelu", x.shape(), std::move(out), {x}, [](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    constexpr double kC = 0.7978845608028654;
    constexpr double kA = 0.044715;
    for (std::size_t i = 0; i < self->grad.size(); ++i) {
      const double v = in->values[i];
      const double u = kC * (v + kA * v * v * v);
      const double t = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * v * v);
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      in->grad[i] += self->grad[i] * d;
    }
  });
}

// Row-wise softmax with max subtraction. Canonical order makes each row's
// normalizer independent of column order.
inline Tensor softmax_rows(const Tensor& x, SumOrder order = SumOrder::Fast) {
  const std::size_t r = x.rows(), c = x.cols();
  require(c >= 1, "softmax_rows: empty rows");
  std::vector<double> out(x.size());
  std::vector<double> terms;
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.values().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z;
    if (order == SumOrder::Fast) {
      z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    } else {
      terms.resize(c);
      for (std::size_t j = 0; j < c; ++j) terms[j] = std::exp(row[j] - mx);
      z = detail::canonical_sum(terms);
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = std::exp(row[j] - mx) / z;
  }
  return detail::make_node("softmax_rows", x.shape(), std::move(out), {x}, [r, c](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self->values.data() + i * c;
      const double* dy = self->grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < c; ++j) in->grad[i * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

// Row-wise layer norm with learnable gain/bias [1 x c]; eps = 1e-5.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-5;
  const std::size_t r = x.rows(), c = x.cols();
  require(gain.rows() == 1 && gain.cols() == c && bias.rows() == 1 && bias.cols() == c,
          "layer_norm_rows: gain/bias must be [1 x cols]");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.values().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = gain.values()[j] * ((row[j] - mean) * inv) + bias.values()[j];
  }
  return detail::make_node("layer_norm_rows", x.shape(), std::move(out), {x, gain, bias}, [r, c](TensorNode* self) {
    TensorNode* ix = self->inputs[0].get();
    TensorNode* ig = self->inputs[1].get();
    TensorNode* ib = self->inputs[2].get();
    constexpr double kEps = 1e-5;
    for (std::size_t i = 0; i < r; ++i) {
      const double* row = ix->values.data() + i * c;
      const double* dy = self->grad.data() + i * c;
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + kEps);
      if (ig->requires_grad) {
        ig->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) ig->grad[j] += dy[j] * ((row[j] - mean) * inv);
      }
      if (ib->requires_grad) {
        ib->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) ib->grad[j] += dy[j];
      }
      if (ix->requires_grad) {
        ix->ensure_grad();
        // d/dx of gain * (x - mean) * inv, standard layer-norm backward
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double g = dy[j] * ig->values[j];
          sum_g += g;
          sum_gx += g * (row[j] - mean) * inv;
        }
        for (std::size_t j = 0; j < c; ++j) {
          const double g = dy[j] * ig->values[j];
          const double xhat = (row[j] - mean) * inv;
          ix->grad[i * c + j] += inv * (g - sum_g / static_cast<double>(c) - xhat * sum_gx / static_cast<double>(c));
        }
      }
    }
  });
}

// Row-wise L2 normalization; rejects (near-)zero rows.
inline Tensor l2_normalize_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.values().data() + i * c;
    double nrm = 0.0;
    for (std::size_t j = 0; j < c; ++j) nrm += row[j] * row[j];
    nrm = std::sqrt(nrm);
    if (nrm < 1e-30) throw NumericalError("l2_normalize_rows: zero-norm row");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] / nrm;
  }
  return detail::make_node("l2_normalize_rows", x.shape(), std::move(out), {x}, [r, c](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const double* row = in->values.data() + i * c;
      const double* y = self->values.data() + i * c;
      const double* dy = self->grad.data() + i * c;
      double nrm = 0.0;
      for (std::size_t j = 0; j < c; ++j) nrm += row[j] * row[j];
      nrm = std::sqrt(nrm);
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < c; ++j) in->grad[i * c + j] += (dy[j] - y[j] * dot) / nrm;
    }
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  require(r0 < r1 && r1 <= x.rows(), "slice_rows: range out of bounds");
  const std::size_t c = x.cols();
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(r0 * c),
                          x.values().begin() + static_cast<std::ptrdiff_t>(r1 * c));
  return detail::make_node("slice_rows", {r1 - r0, c}, std::move(out), {x}, [r0, c](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self->grad.size(); ++i) in->grad[r0 * c + i] += self->grad[i];
  });
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  require(c0 < c1 && c1 <= x.cols(), "slice_cols: range out of bounds");
  const std::size_t r = x.rows(), c = x.cols(), w = c1 - c0;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.values()[i * c + c0 + j];
  return detail::make_node("slice_cols", {r, w}, std::move(out), {x}, [r, c, c0, w](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) in->grad[i * c + c0 + j] += self->grad[i * w + j];
  });
}

inline Tensor row(const Tensor& x, std::size_t i) { return slice_rows(x, i, i + 1); }

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const Tensor& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch");
    r += p.rows();
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_node("concat_rows", {r, c}, std::move(out), parts, [](TensorNode* self) {
    std::size_t off = 0;
    for (auto& inp : self->inputs) {
      TensorNode* in = inp.get();
      if (in->requires_grad) {
        in->ensure_grad();
        for (std::size_t i = 0; i < in->values.size(); ++i) in->grad[i] += self->grad[off + i];
      }
      off += in->values.size();
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const Tensor& p : parts) {
    require(p.rows() == r, "concat_cols: row mismatch");
    c += p.cols();
  }
  std::vector<double> out(r * c);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * c + off + j] = p.values()[i * w + j];
    off += w;
  }
  return detail::make_node("concat_cols", {r, c}, std::move(out), parts, [r, c](TensorNode* self) {
    std::size_t off = 0;
    for (auto& inp : self->inputs) {
      TensorNode* in = inp.get();
      const std::size_t w = in->cols();
      if (in->requires_grad) {
        in->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) in->grad[i * w + j] += self->grad[i * c + off + j];
      }
      off += w;
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_node("sum", {1}, {s}, {x}, [](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (double& g : in->grad) g += self->grad[0];
  });
}

// Gathers rows of `table` [v x c] at `ids`; backward scatter-adds.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  require(!ids.empty(), "embedding_rows: empty id list");
  const std::size_t c = table.cols();
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < table.rows(), "embedding_rows: id out of range");
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * c, c, out.data() + i * c);
  }
  return detail::make_node("embedding_rows", {ids.size(), c}, std::move(out), {table}, [ids, c](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) in->grad[static_cast<std::size_t>(ids[i]) * c + j] += self->grad[i * c + j];
  });
}

// Mean cross-entropy of raw logits [b x k] against integer targets,
// computed through a fused log-softmax.
inline Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets) {
  const std::size_t b = logits.rows(), k = logits.cols();
  require(targets.size() == b, "cross_entropy_with_logits: one target per row required");
  for (int t : targets) require(t >= 0 && static_cast<std::size_t>(t) < k, "cross_entropy_with_logits: target out of range");
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* rowv = logits.values().data() + i * k;
    double mx = rowv[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, rowv[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(rowv[j] - mx);
    loss += (mx + std::log(z)) - rowv[static_cast<std::size_t>(targets[i])];
  }
  loss /= static_cast<double>(b);
  return detail::make_node("cross_entropy_with_logits", {1}, {loss}, {logits}, [targets, b, k](TensorNode* self) {
    TensorNode* in = self->inputs[0].get();
    if (!in->requires_grad) return;
    in->ensure_grad();
    const double g = self->grad[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      const double* rowv = in->values.data() + i * k;
      double mx = rowv[0];
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, rowv[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) z += std::exp(rowv[j] - mx);
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(rowv[j] - mx) / z;
        in->grad[i * k + j] += g * (p - (static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// backward pass

inline void backward(const Tensor& loss) {
  require(loss.size() == 1, "backward: loss must be a scalar");
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.raw(), 0);
  seen.insert(loss.raw());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  loss.raw()->ensure_grad();
  loss.raw()->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop();
  }
  for (TensorNode* n : topo) {
    for (double g : n->grad) {
      if (!std::isfinite(g)) throw NumericalError(std::string("non-finite gradient at op '") + n->op + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step_count = 0;
  std::vector<std::vector<double>> m, v;
};

// Standard Adam with bias correction; parameters without a gradient are
// treated as zero-gradient (moments decay, value still moves accordingly).
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      state.m[p].assign(params[p].size(), 0.0);
      state.v[p].assign(params[p].size(), 0.0);
    }
  }
  require(state.m.size() == params.size(), "adam_step: state tracks a different parameter list");
  ++state.step_count;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t p = 0; p < params.size(); ++p) {
    require(state.m[p].size() == params[p].size(), "adam_step: parameter shape changed under the optimizer");
    std::vector<double>& x = params[p].mutable_values();
    const std::vector<double>* gp = params[p].has_grad() ? &params[p].grad() : nullptr;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double g = gp ? (*gp)[i] : 0.0;
      state.m[p][i] = state.beta1 * state.m[p][i] + (1.0 - state.beta1) * g;
      state.v[p][i] = state.beta2 * state.v[p][i] + (1.0 - state.beta2) * g * g;
      const double mhat = state.m[p][i] / c1;
      const double vhat = state.v[p][i] / c2;
      x[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

// Max over all entries of all params of
// |analytic - central| / (|analytic| + |central| + eps).
inline double finite_difference_check(const std::function<Tensor()>& forward, std::vector<Tensor> params,
                                      double step) {
  require(step > 0.0, "finite_difference_check: step must be positive");
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = forward();
  backward(loss);
  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t p = 0; p < params.size(); ++p)
    analytic[p] = params[p].has_grad() ? params[p].grad() : std::vector<double>(params[p].size(), 0.0);

  constexpr double kEps = 1e-12;
  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double>& x = params[p].mutable_values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      x[i] = keep + step;
      const double fp = forward().value();
      x[i] = keep - step;
      const double fm = forward().value();
      x[i] = keep;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[p][i];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + kEps));
    }
  }
  for (Tensor& p : params) p.zero_grad();
  return worst;
}

}  // namespace odcl
