#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "weam/errors.hpp"

namespace weam {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

/// Dense n-dimensional array. `grad`, when non-empty, matches `values`
/// element for element.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;
  std::vector<T> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (shape_numel(shape) != values.size())
      throw dimension_error("tensor value count " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape s, T v) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? numel() : shape[1]; }

  T& at(std::size_t i, std::size_t j) { return values[i * cols() + j]; }
  const T& at(std::size_t i, std::size_t j) const { return values[i * cols() + j]; }

  void zero_grad() { grad.assign(values.size(), T(0)); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

namespace kernels {

// C[m x n] += A[m x k] * B[k x n]; saxpy inner loop so it vectorizes
// without reassociation.
template <typename T>
void mm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T s = arow[l];
      if (s == T(0)) continue;
      const T* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// C[k x n] += A^T[k x m] * B[m x n] with A given as [m x k].
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const T s = arow[l];
      if (s == T(0)) continue;
      T* crow = c + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

template <typename T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
}

// C[m x n] += A[m x k] * B^T with B given as [n x k].
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n) {
  thread_local std::vector<T> scratch;
  scratch.resize(k * n);
  transpose(b, scratch.data(), n, k);
  mm_acc(a, scratch.data(), c, m, k, n);
}

}  // namespace kernels

/// Append-only operation tape. Nodes are recorded in execution order and
/// walked strictly backwards by backward(); a node's inputs always precede
/// it. Rebuilt from scratch every forward pass.
template <typename T>
class Graph {
 public:
  enum class Op : std::uint8_t {
    Leaf, Constant,
    Add, Sub, Mul, Div, Scale,
    Tanh, Sigmoid, Exp, Log, Clamp,
    Matmul, MatmulNT,
    Softmax, LogSoftmax,
    Concat, GatherRows, GatherCols, RepeatRows,
    Sum, LayerNorm,
  };

  struct Node {
    Op op;
    std::vector<int> inputs;
    Tensor<T> value;
    std::vector<T> adj;       // adjoint buffer, filled during backward
    bool needs_grad = false;
    Tensor<T>* param = nullptr;        // Leaf only
    T a = 0, b = 0;                    // scale factor / clamp bounds / eps
    int axis = 0;
    std::vector<std::size_t> ids;      // gather indices / repeat count
    std::vector<T> saved;              // layer-norm per-row mean and rstd
  };

  std::size_t size() const { return nodes_.size(); }
  const Tensor<T>& val(int id) const { return nodes_[id].value; }
  const std::vector<T>& adjoint(int id) const { return nodes_[id].adj; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  void reserve(std::size_t n) { nodes_.reserve(n); }

  /// Registers a parameter tensor. backward() accumulates into its `grad`.
  int leaf(Tensor<T>& t) {
    Node n;
    n.op = Op::Leaf;
    n.value = t;  // copy of the current values
    n.param = &t;
    n.needs_grad = t.requires_grad;
    return push(std::move(n));
  }

  /// A value that takes no gradient (inputs, masks, noise draws).
  int constant(Tensor<T> t) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(t);
    return push(std::move(n));
  }
  int constant(Shape s, std::vector<T> v) {
    return constant(Tensor<T>(std::move(s), std::move(v)));
  }
  int scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  int add(int x, int y) { return binary(Op::Add, x, y); }
  int sub(int x, int y) { return binary(Op::Sub, x, y); }
  int mul(int x, int y) { return binary(Op::Mul, x, y); }
  int div(int x, int y) { return binary(Op::Div, x, y); }

  int scale(int x, T s) {
    Node n = unary(Op::Scale, x);
    n.a = s;
    for (auto& v : n.value.values) v *= s;
    return push(std::move(n));
  }

  int tanh(int x) {
    Node n = unary(Op::Tanh, x);
    for (auto& v : n.value.values) v = std::tanh(v);
    return push(std::move(n));
  }

  int sigmoid(int x) {
    Node n = unary(Op::Sigmoid, x);
    for (auto& v : n.value.values) v = T(1) / (T(1) + std::exp(-v));
    return push(std::move(n));
  }

  int exp(int x) {
    Node n = unary(Op::Exp, x);
    for (auto& v : n.value.values) v = std::exp(v);
    return push(std::move(n));
  }

  int log(int x) {
    Node n = unary(Op::Log, x);
    for (auto& v : n.value.values) {
      if (!(v > T(0)))
        throw numeric_error("log of non-positive value " + std::to_string(v));
      v = std::log(v);
    }
    return push(std::move(n));
  }

  int clamp(int x, T lo, T hi) {
    Node n = unary(Op::Clamp, x);
    n.a = lo;
    n.b = hi;
    for (auto& v : n.value.values) v = std::min(hi, std::max(lo, v));
    return push(std::move(n));
  }

  int matmul(int x, int y) {
    const Tensor<T>& A = nodes_[x].value;
    const Tensor<T>& B = nodes_[y].value;
    require_2d(A, "matmul lhs");
    require_2d(B, "matmul rhs");
    if (A.shape[1] != B.shape[0])
      throw dimension_error("matmul inner extents differ: " + shape_str(A.shape) +
                            " vs " + shape_str(B.shape));
    Node n;
    n.op = Op::Matmul;
    n.inputs = {x, y};
    n.needs_grad = nodes_[x].needs_grad || nodes_[y].needs_grad;
    n.value = Tensor<T>::zeros({A.shape[0], B.shape[1]});
    kernels::mm_acc(A.values.data(), B.values.data(), n.value.values.data(),
                    A.shape[0], A.shape[1], B.shape[1]);
    return push(std::move(n));
  }

  /// x * y^T without materializing the transpose at the call site.
  int matmul_nt(int x, int y) {
    const Tensor<T>& A = nodes_[x].value;
    const Tensor<T>& B = nodes_[y].value;
    require_2d(A, "matmul_nt lhs");
    require_2d(B, "matmul_nt rhs");
    if (A.shape[1] != B.shape[1])
      throw dimension_error("matmul_nt inner extents differ: " +
                            shape_str(A.shape) + " vs " + shape_str(B.shape));
    Node n;
    n.op = Op::MatmulNT;
    n.inputs = {x, y};
    n.needs_grad = nodes_[x].needs_grad || nodes_[y].needs_grad;
    n.value = Tensor<T>::zeros({A.shape[0], B.shape[0]});
    kernels::mm_nt_acc(A.values.data(), B.values.data(), n.value.values.data(),
                       A.shape[0], A.shape[1], B.shape[0]);
    return push(std::move(n));
  }

  /// Probabilities along `axis`, computed as exp of the max-shifted
  /// log-sum-exp form so large logits cannot overflow.
  int softmax(int x, int axis) { return softmax_impl(x, axis, false); }

  /// log softmax along `axis`; the form consumed by the loss.
  int log_softmax(int x, int axis) { return softmax_impl(x, axis, true); }

  int concat(const std::vector<int>& parts, int axis) {
    if (parts.empty()) throw contract_error("concat of zero parts");
    const Shape& first = nodes_[parts[0]].value.shape;
    if (axis < 0 || static_cast<std::size_t>(axis) >= first.size())
      throw dimension_error("concat axis " + std::to_string(axis) +
                            " invalid for shape " + shape_str(first));
    Shape out = first;
    out[axis] = 0;
    for (int p : parts) {
      const Shape& s = nodes_[p].value.shape;
      if (s.size() != first.size())
        throw dimension_error("concat rank mismatch: " + shape_str(first) +
                              " vs " + shape_str(s));
      for (std::size_t d = 0; d < s.size(); ++d)
        if (d != static_cast<std::size_t>(axis) && s[d] != first[d])
          throw dimension_error("concat extent mismatch off axis: " +
                                shape_str(first) + " vs " + shape_str(s));
      out[axis] += s[axis];
    }
    Node n;
    n.op = Op::Concat;
    n.inputs = parts;
    n.axis = axis;
    for (int p : parts) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    n.value = Tensor<T>::zeros(out);
    std::size_t outer = 1;
    for (int d = 0; d < axis; ++d) outer *= out[d];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < out.size(); ++d) inner *= out[d];
    std::size_t offset = 0;
    for (int p : parts) {
      const Tensor<T>& v = nodes_[p].value;
      std::size_t chunk = v.shape[axis] * inner;
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(v.values.data() + o * chunk, chunk,
                    n.value.values.data() + o * out[axis] * inner + offset);
      offset += chunk;
    }
    return push(std::move(n));
  }

  /// Row gather from a 2-D tensor. Backward scatter-adds into the gathered
  /// rows only; repeated ids accumulate.
  int gather_rows(int x, std::vector<std::size_t> ids) {
    const Tensor<T>& A = nodes_[x].value;
    require_2d(A, "gather_rows input");
    for (std::size_t id : ids)
      if (id >= A.shape[0])
        throw vocab_error("row id " + std::to_string(id) +
                          " out of range for " + shape_str(A.shape));
    Node n;
    n.op = Op::GatherRows;
    n.inputs = {x};
    n.needs_grad = nodes_[x].needs_grad;
    std::size_t c = A.shape[1];
    n.value = Tensor<T>::zeros({ids.size(), c});
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(A.values.data() + ids[i] * c, c, n.value.values.data() + i * c);
    n.ids = std::move(ids);
    return push(std::move(n));
  }

  int gather_cols(int x, std::vector<std::size_t> ids) {
    const Tensor<T>& A = nodes_[x].value;
    require_2d(A, "gather_cols input");
    for (std::size_t id : ids)
      if (id >= A.shape[1])
        throw vocab_error("column id " + std::to_string(id) +
                          " out of range for " + shape_str(A.shape));
    Node n;
    n.op = Op::GatherCols;
    n.inputs = {x};
    n.needs_grad = nodes_[x].needs_grad;
    std::size_t r = A.shape[0], c = A.shape[1];
    n.value = Tensor<T>::zeros({r, ids.size()});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < ids.size(); ++j)
        n.value.values[i * ids.size() + j] = A.values[i * c + ids[j]];
    n.ids = std::move(ids);
    return push(std::move(n));
  }

  /// Tiles a [1 x c] row n times; backward sums the rows back. This is the
  /// explicit form of row broadcasting (bias add and the like).
  int repeat_rows(int x, std::size_t count) {
    const Tensor<T>& A = nodes_[x].value;
    require_2d(A, "repeat_rows input");
    if (A.shape[0] != 1)
      throw dimension_error("repeat_rows expects a single row, got " +
                            shape_str(A.shape));
    Node n;
    n.op = Op::RepeatRows;
    n.inputs = {x};
    n.needs_grad = nodes_[x].needs_grad;
    std::size_t c = A.shape[1];
    n.value = Tensor<T>::zeros({count, c});
    for (std::size_t i = 0; i < count; ++i)
      std::copy_n(A.values.data(), c, n.value.values.data() + i * c);
    n.ids = {count};
    return push(std::move(n));
  }

  int sum(int x) {
    Node n;
    n.op = Op::Sum;
    n.inputs = {x};
    n.needs_grad = nodes_[x].needs_grad;
    T acc = 0;
    for (T v : nodes_[x].value.values) acc += v;
    n.value = Tensor<T>::scalar(acc);
    return push(std::move(n));
  }

  /// Row-wise layer normalization of a [r x c] tensor with [1 x c] gain and
  /// bias. Fused; saves per-row mean and reciprocal std for backward.
  int layer_norm(int x, int gain, int bias, T eps = T(1e-5)) {
    const Tensor<T>& A = nodes_[x].value;
    const Tensor<T>& G = nodes_[gain].value;
    const Tensor<T>& Bv = nodes_[bias].value;
    require_2d(A, "layer_norm input");
    std::size_t r = A.shape[0], c = A.shape[1];
    if (G.numel() != c || Bv.numel() != c)
      throw dimension_error("layer_norm gain/bias width mismatch: " +
                            shape_str(A.shape) + " vs gain " + shape_str(G.shape));
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {x, gain, bias};
    n.a = eps;
    n.needs_grad = nodes_[x].needs_grad || nodes_[gain].needs_grad ||
                   nodes_[bias].needs_grad;
    n.value = Tensor<T>::zeros({r, c});
    n.saved.resize(2 * r);
    for (std::size_t i = 0; i < r; ++i) {
      const T* row = A.values.data() + i * c;
      T mean = 0;
      for (std::size_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<T>(c);
      T var = 0;
      for (std::size_t j = 0; j < c; ++j) {
        T d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      T rstd = T(1) / std::sqrt(var + eps);
      n.saved[2 * i] = mean;
      n.saved[2 * i + 1] = rstd;
      T* out = n.value.values.data() + i * c;
      for (std::size_t j = 0; j < c; ++j)
        out[j] = (row[j] - mean) * rstd * G.values[j] + Bv.values[j];
    }
    return push(std::move(n));
  }

  /// Reverse pass from a scalar loss. Every requires_grad leaf reachable
  /// from it gets its gradient accumulated into the underlying tensor.
  void backward(int loss) {
    if (loss < 0 || static_cast<std::size_t>(loss) >= nodes_.size())
      throw contract_error("backward: unknown node id");
    if (nodes_[loss].value.numel() != 1)
      throw contract_error("backward requires a scalar loss, got shape " +
                           shape_str(nodes_[loss].value.shape));
    for (auto& n : nodes_) n.adj.clear();
    nodes_[loss].adj.assign(1, T(1));
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.adj.empty()) continue;
      backward_node(n);
    }
    for (auto& n : nodes_)
      if (n.op == Op::Leaf && n.needs_grad && !n.adj.empty()) {
        n.param->ensure_grad();
        for (std::size_t i = 0; i < n.adj.size(); ++i)
          n.param->grad[i] += n.adj[i];
      }
  }

 private:
  std::vector<Node> nodes_;

  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  static void require_2d(const Tensor<T>& t, const char* what) {
    if (t.shape.size() != 2)
      throw dimension_error(std::string(what) + " must be 2-D, got " +
                            shape_str(t.shape));
  }

  Node unary(Op op, int x) {
    Node n;
    n.op = op;
    n.inputs = {x};
    n.needs_grad = nodes_[x].needs_grad;
    n.value = nodes_[x].value;
    n.value.requires_grad = false;
    n.value.grad.clear();
    return n;
  }

  // Binary elementwise op; shapes must match or one operand must be a
  // single element (scalar broadcast, the only broadcast allowed).
  int binary(Op op, int x, int y) {
    const Tensor<T>& A = nodes_[x].value;
    const Tensor<T>& B = nodes_[y].value;
    bool a_scalar = A.numel() == 1, b_scalar = B.numel() == 1;
    if (!a_scalar && !b_scalar && A.shape != B.shape)
      throw dimension_error("elementwise shape mismatch: " + shape_str(A.shape) +
                            " vs " + shape_str(B.shape));
    Node n;
    n.op = op;
    n.inputs = {x, y};
    n.needs_grad = nodes_[x].needs_grad || nodes_[y].needs_grad;
    const Tensor<T>& big = a_scalar && !b_scalar ? B : A;
    n.value = Tensor<T>::zeros(big.shape);
    std::size_t sz = big.numel();
    for (std::size_t i = 0; i < sz; ++i) {
      T av = A.values[a_scalar ? 0 : i];
      T bv = B.values[b_scalar ? 0 : i];
      switch (op) {
        case Op::Add: n.value.values[i] = av + bv; break;
        case Op::Sub: n.value.values[i] = av - bv; break;
        case Op::Mul: n.value.values[i] = av * bv; break;
        case Op::Div: n.value.values[i] = av / bv; break;
        default: break;
      }
    }
    return push(std::move(n));
  }

  int softmax_impl(int x, int axis, bool log_form) {
    const Tensor<T>& A = nodes_[x].value;
    if (axis < 0 || static_cast<std::size_t>(axis) >= A.shape.size())
      throw dimension_error("softmax axis " + std::to_string(axis) +
                            " invalid for shape " + shape_str(A.shape));
    for (T v : A.values)
      if (std::isnan(v)) throw numeric_error("softmax received NaN input");
    Node n;
    n.op = log_form ? Op::LogSoftmax : Op::Softmax;
    n.inputs = {x};
    n.axis = axis;
    n.needs_grad = nodes_[x].needs_grad;
    n.value = Tensor<T>::zeros(A.shape);
    std::size_t outer = 1, inner = 1;
    std::size_t L = A.shape[axis];
    for (int d = 0; d < axis; ++d) outer *= A.shape[d];
    for (std::size_t d = axis + 1; d < A.shape.size(); ++d) inner *= A.shape[d];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * L * inner + in;
        T mx = A.values[base];
        for (std::size_t l = 1; l < L; ++l)
          mx = std::max(mx, A.values[base + l * inner]);
        T lse = 0;
        for (std::size_t l = 0; l < L; ++l)
          lse += std::exp(A.values[base + l * inner] - mx);
        lse = std::log(lse) + mx;
        for (std::size_t l = 0; l < L; ++l) {
          T y = A.values[base + l * inner] - lse;
          n.value.values[base + l * inner] = log_form ? y : std::exp(y);
        }
      }
    return push(std::move(n));
  }

  std::vector<T>& want(int id) {
    Node& n = nodes_[id];
    if (n.adj.empty()) n.adj.assign(n.value.numel(), T(0));
    return n.adj;
  }

  void backward_node(Node& n) {
    const std::vector<T>& g = n.adj;
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const Tensor<T>& A = nodes_[n.inputs[0]].value;
        const Tensor<T>& B = nodes_[n.inputs[1]].value;
        bool a_scalar = A.numel() == 1 && n.value.numel() > 1;
        bool b_scalar = B.numel() == 1 && n.value.numel() > 1;
        bool wa = nodes_[n.inputs[0]].needs_grad;
        bool wb = nodes_[n.inputs[1]].needs_grad;
        std::vector<T>* ga = wa ? &want(n.inputs[0]) : nullptr;
        std::vector<T>* gb = wb ? &want(n.inputs[1]) : nullptr;
        for (std::size_t i = 0; i < g.size(); ++i) {
          T av = A.values[a_scalar ? 0 : i];
          T bv = B.values[b_scalar ? 0 : i];
          T da = 0, db = 0;
          switch (n.op) {
            case Op::Add: da = g[i]; db = g[i]; break;
            case Op::Sub: da = g[i]; db = -g[i]; break;
            case Op::Mul: da = g[i] * bv; db = g[i] * av; break;
            case Op::Div: da = g[i] / bv; db = -g[i] * av / (bv * bv); break;
            default: break;
          }
          if (ga) (*ga)[a_scalar ? 0 : i] += da;
          if (gb) (*gb)[b_scalar ? 0 : i] += db;
        }
        break;
      }
      case Op::Scale: {
        auto& gi = want(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * n.a;
        break;
      }
      case Op::Tanh: {
        auto& gi = want(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
          gi[i] += g[i] * (T(1) - n.value.values[i] * n.value.values[i]);
        break;
      }
      case Op::Sigmoid: {
        auto& gi = want(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          T s = n.value.values[i];
          gi[i] += g[i] * s * (T(1) - s);
        }
        break;
      }
      case Op::Exp: {
        auto& gi = want(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * n.value.values[i];
        break;
      }
      case Op::Log: {
        const Tensor<T>& A = nodes_[n.inputs[0]].value;
        auto& gi = want(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / A.values[i];
        break;
      }
      case Op::Clamp: {
        const Tensor<T>& A = nodes_[n.inputs[0]].value;
        auto& gi = want(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (A.values[i] >= n.a && A.values[i] <= n.b) gi[i] += g[i];
        break;
      }
      case Op::Matmul: {
        const Tensor<T>& A = nodes_[n.inputs[0]].value;
        const Tensor<T>& B = nodes_[n.inputs[1]].value;
        std::size_t m = A.shape[0], k = A.shape[1], c = B.shape[1];
        if (nodes_[n.inputs[0]].needs_grad)
          kernels::mm_nt_acc(g.data(), B.values.data(), want(n.inputs[0]).data(),
                             m, c, k);
        if (nodes_[n.inputs[1]].needs_grad)
          kernels::mm_tn_acc(A.values.data(), g.data(), want(n.inputs[1]).data(),
                             m, k, c);
        break;
      }
      case Op::MatmulNT: {
        const Tensor<T>& A = nodes_[n.inputs[0]].value;
        const Tensor<T>& B = nodes_[n.inputs[1]].value;
        std::size_t m = A.shape[0], k = A.shape[1], c = B.shape[0];
        // C = A B^T: dA = dC B, dB = dC^T A
        if (nodes_[n.inputs[0]].needs_grad)
          kernels::mm_acc(g.data(), B.values.data(), want(n.inputs[0]).data(),
                          m, c, k);
        if (nodes_[n.inputs[1]].needs_grad)
          kernels::mm_tn_acc(g.data(), A.values.data(), want(n.inputs[1]).data(),
                             m, c, k);
        break;
      }
      case Op::Softmax: {
        auto& gi = want(n.inputs[0]);
        const Shape& s = n.value.shape;
        std::size_t outer = 1, inner = 1, L = s[n.axis];
        for (int d = 0; d < n.axis; ++d) outer *= s[d];
        for (std::size_t d = n.axis + 1; d < s.size(); ++d) inner *= s[d];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * L * inner + in;
            T dot = 0;
            for (std::size_t l = 0; l < L; ++l)
              dot += g[base + l * inner] * n.value.values[base + l * inner];
            for (std::size_t l = 0; l < L; ++l) {
              std::size_t idx = base + l * inner;
              gi[idx] += n.value.values[idx] * (g[idx] - dot);
            }
          }
        break;
      }
      case Op::LogSoftmax: {
        auto& gi = want(n.inputs[0]);
        const Shape& s = n.value.shape;
        std::size_t outer = 1, inner = 1, L = s[n.axis];
        for (int d = 0; d < n.axis; ++d) outer *= s[d];
        for (std::size_t d = n.axis + 1; d < s.size(); ++d) inner *= s[d];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * L * inner + in;
            T gsum = 0;
            for (std::size_t l = 0; l < L; ++l) gsum += g[base + l * inner];
            for (std::size_t l = 0; l < L; ++l) {
              std::size_t idx = base + l * inner;
              gi[idx] += g[idx] - std::exp(n.value.values[idx]) * gsum;
            }
          }
        break;
      }
      case Op::Concat: {
        const Shape& out = n.value.shape;
        std::size_t outer = 1, inner = 1;
        for (int d = 0; d < n.axis; ++d) outer *= out[d];
        for (std::size_t d = n.axis + 1; d < out.size(); ++d) inner *= out[d];
        std::size_t offset = 0;
        for (int p : n.inputs) {
          const Tensor<T>& v = nodes_[p].value;
          std::size_t chunk = v.shape[n.axis] * inner;
          if (nodes_[p].needs_grad) {
            auto& gp = want(p);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < chunk; ++i)
                gp[o * chunk + i] += g[o * out[n.axis] * inner + offset + i];
          }
          offset += chunk;
        }
        break;
      }
      case Op::GatherRows: {
        auto& gi = want(n.inputs[0]);
        std::size_t c = n.value.shape.size() == 2 ? n.value.shape[1] : 0;
        for (std::size_t i = 0; i < n.ids.size(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            gi[n.ids[i] * c + j] += g[i * c + j];
        break;
      }
      case Op::GatherCols: {
        auto& gi = want(n.inputs[0]);
        std::size_t r = n.value.shape[0];
        std::size_t cin = nodes_[n.inputs[0]].value.shape[1];
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < n.ids.size(); ++j)
            gi[i * cin + n.ids[j]] += g[i * n.ids.size() + j];
        break;
      }
      case Op::RepeatRows: {
        auto& gi = want(n.inputs[0]);
        std::size_t c = n.value.shape[1];
        for (std::size_t i = 0; i < n.value.shape[0]; ++i)
          for (std::size_t j = 0; j < c; ++j) gi[j] += g[i * c + j];
        break;
      }
      case Op::Sum: {
        auto& gi = want(n.inputs[0]);
        for (auto& v : gi) v += g[0];
        break;
      }
      case Op::LayerNorm: {
        const Tensor<T>& A = nodes_[n.inputs[0]].value;
        const Tensor<T>& G = nodes_[n.inputs[1]].value;
        std::size_t r = A.shape[0], c = A.shape[1];
        bool wx = nodes_[n.inputs[0]].needs_grad;
        bool wg = nodes_[n.inputs[1]].needs_grad;
        bool wb = nodes_[n.inputs[2]].needs_grad;
        std::vector<T>* gx = wx ? &want(n.inputs[0]) : nullptr;
        std::vector<T>* gg = wg ? &want(n.inputs[1]) : nullptr;
        std::vector<T>* gb = wb ? &want(n.inputs[2]) : nullptr;
        for (std::size_t i = 0; i < r; ++i) {
          const T mean = n.saved[2 * i], rstd = n.saved[2 * i + 1];
          const T* row = A.values.data() + i * c;
          const T* grow = g.data() + i * c;
          T sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (std::size_t j = 0; j < c; ++j) {
            T xhat = (row[j] - mean) * rstd;
            T dxhat = grow[j] * G.values[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (gg) (*gg)[j] += grow[j] * xhat;
            if (gb) (*gb)[j] += grow[j];
          }
          if (gx) {
            const T inv_c = T(1) / static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              T xhat = (row[j] - mean) * rstd;
              T dxhat = grow[j] * G.values[j];
              (*gx)[i * c + j] +=
                  rstd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
            }
          }
        }
        break;
      }
    }
  }
};

}  // namespace weam
